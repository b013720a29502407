"""Synthetic generator: oracle identities, effect shapes and determinism."""

import numpy as np
import pandas as pd
import pytest

from treatfx.dgp import DgpConfig, EffectSpec, Oracle, generate, oracle_summary
from treatfx.errors import ConfigError, DataError


def test_config_validation():
    with pytest.raises(ConfigError):
        DgpConfig(m_treatments=1)
    with pytest.raises(ConfigError):
        DgpConfig(noise_sd=0.0)
    with pytest.raises(ConfigError):
        DgpConfig(confounding_strength=-1.0)


def test_effect_specs_filled_and_coerced():
    cfg = DgpConfig(m_treatments=4,
                    effect_specs={"1": {"kind": "constant", "value": 3.0}})
    assert cfg.effect_specs[1].kind == "constant"
    assert cfg.effect_specs[2].kind == "zero"
    assert cfg.effect_specs[3].kind == "zero"


def test_effect_spec_shapes():
    df = pd.DataFrame({"x": [-1.0, 0.0, 2.0], "u": [0.0, 1.0, 2.0]})
    assert np.array_equal(EffectSpec("zero").evaluate(df), [0, 0, 0])
    assert np.array_equal(EffectSpec("constant", value=5).evaluate(df), [5, 5, 5])
    assert np.array_equal(
        EffectSpec("linear", column="x", slope=2.0).evaluate(df), [-2, 0, 4])
    step_thr = EffectSpec("step", column="x", hi=10, lo=1, threshold=0.0)
    assert np.array_equal(step_thr.evaluate(df), [10, 10, 1])
    step_lvl = EffectSpec("step", column="u", hi=7, lo=2, levels=(1, 2))
    assert np.array_equal(step_lvl.evaluate(df), [2, 7, 7])
    with pytest.raises(ConfigError):
        EffectSpec("cubic").evaluate(df)


def test_effect_spec_dict_round_trip():
    for es in (EffectSpec("zero"),
               EffectSpec("constant", value=2.5),
               EffectSpec("linear", column="x1", slope=-1.0),
               EffectSpec("step", column="o1", hi=4, lo=0, levels=(0, 2)),
               EffectSpec("step", column="x1", hi=4, lo=0, threshold=1.5)):
        back = EffectSpec.from_dict(es.to_dict())
        assert back.evaluate(pd.DataFrame({"x1": [0.5], "o1": [2.0]})) == pytest.approx(
            es.evaluate(pd.DataFrame({"x1": [0.5], "o1": [2.0]})))


def test_oracle_antisymmetry_and_triangle():
    cfg = DgpConfig(n=200, m_treatments=4, seed=1,
                    effect_specs={1: EffectSpec("constant", value=3),
                                  2: EffectSpec("linear", column="x2", slope=2),
                                  3: EffectSpec("step", column="x3", hi=6, lo=1,
                                                threshold=0.0)})
    _, oracle = generate(cfg)
    for m in range(4):
        for l in range(4):
            if m == l:
                continue
            assert np.array_equal(oracle.true_iate(m, l), -oracle.true_iate(l, m))
    tri = oracle.true_iate(3, 1) + oracle.true_iate(1, 0)
    np.testing.assert_allclose(tri, oracle.true_iate(3, 0), rtol=0, atol=1e-10)


def test_observed_mean_matches_oracle_at_scale():
    cfg = DgpConfig(n=50_000, m_treatments=3, seed=9, noise_sd=10.0,
                    confounding_strength=1.0, horizons=2,
                    effect_specs={1: EffectSpec("constant", value=8)})
    data, oracle = generate(cfg)
    d = data.treatment
    y = data.df["y2"].to_numpy()
    for arm in range(3):
        mask = d == arm
        n_d = int(mask.sum())
        gap = abs(y[mask].mean() - oracle.true_po[mask, arm].mean())
        assert gap <= 3 * cfg.noise_sd / np.sqrt(n_d)


def test_propensities_and_confounding():
    cfg = DgpConfig(n=2000, m_treatments=3, seed=2, confounding_strength=0.0)
    _, oracle = generate(cfg)
    np.testing.assert_allclose(oracle.true_propensity.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(oracle.true_propensity, 1.0 / 3.0, atol=1e-12)

    cfg2 = DgpConfig(n=2000, m_treatments=3, seed=2, confounding_strength=2.0)
    data2, oracle2 = generate(cfg2)
    x1 = data2.df["x1"].to_numpy()
    # stronger x1 pushes assignment toward the higher arms
    hi = oracle2.true_propensity[x1 > 1, 2].mean()
    lo = oracle2.true_propensity[x1 < -1, 2].mean()
    assert hi > lo


def test_horizons_accrue_linearly():
    cfg = DgpConfig(n=50, m_treatments=2, seed=0, horizons=4,
                    effect_specs={1: EffectSpec("constant", value=10)})
    _, oracle = generate(cfg)
    for h in range(4):
        np.testing.assert_allclose(oracle.true_po_by_horizon[h],
                                   (h + 1) / 4 * oracle.true_po, atol=1e-12)


def test_generate_deterministic():
    cfg = DgpConfig(n=100, seed=5)
    d1, o1 = generate(cfg)
    d2, o2 = generate(DgpConfig(n=100, seed=5))
    d3, _ = generate(DgpConfig(n=100, seed=6))
    pd.testing.assert_frame_equal(d1.df, d2.df)
    assert np.array_equal(o1.true_po, o2.true_po)
    assert not d1.df.equals(d3.df)


def test_dataset_shape_and_roles():
    cfg = DgpConfig(n=80, p_continuous=2, p_ordered=1, p_unordered=2,
                    m_treatments=3, horizons=3, seed=0)
    data, _ = generate(cfg)
    assert data.n == 80
    assert data.outcome_columns == ["y1", "y2", "y3"]
    assert data.m_treatments == 3
    names = [s.name for s in data.covariate_specs()]
    assert names == ["x1", "x2", "o1", "u1", "u2"]


def test_oracle_json_round_trip():
    _, oracle = generate(DgpConfig(n=30, seed=1))
    back = Oracle.from_dict(oracle.to_dict())
    assert np.array_equal(back.true_po, oracle.true_po)
    assert np.array_equal(back.true_propensity, oracle.true_propensity)
    assert np.array_equal(back.true_po_by_horizon, oracle.true_po_by_horizon)


def test_config_dict_round_trip():
    cfg = DgpConfig(n=70, m_treatments=3, seed=4,
                    effect_specs={1: EffectSpec("linear", column="x1", slope=2.0)})
    back = DgpConfig(**cfg.to_dict())
    d1, _ = generate(cfg)
    d2, _ = generate(back)
    pd.testing.assert_frame_equal(d1.df, d2.df)


def test_oracle_summary_gates():
    _, oracle = generate(DgpConfig(n=40, seed=3,
                                   effect_specs={1: EffectSpec("constant", value=5)}))
    groups = np.tile([0, 1], 20)
    out = oracle_summary(oracle, (1, 0), groups)
    assert out["ate"] == pytest.approx(5.0)
    assert set(out["gates"]) == {0, 1}
    with pytest.raises(DataError):
        oracle_summary(oracle, (1, 0), np.full(40, np.nan))
