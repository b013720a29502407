"""Honest forest: honesty, weights algebra, determinism, tuning, OOB tools."""

import pickle
import warnings

import numpy as np
import pytest

from treatfx.data import split_samples
from treatfx.dgp import DgpConfig, EffectSpec, generate
from treatfx.errors import DataError
from treatfx.forest import (Forest, ForestParams, common_support_trim,
                            feature_select, fit, min_feasible_arm_count, tune,
                            variable_importance)


class TestParams:
    def test_validation(self):
        with pytest.raises(DataError):
            ForestParams(subsample_fraction=0.0)
        with pytest.raises(DataError):
            ForestParams(honesty_fraction=1.0)
        with pytest.raises(DataError):
            ForestParams(min_leaf_per_arm=0)
        with pytest.raises(DataError):
            ForestParams(n_trees=0)
        with pytest.raises(DataError):
            ForestParams(cs_threshold=0.6)


class TestHonestyAndLeaves:
    def test_structure_and_honest_disjoint(self, small_forest):
        for tree in small_forest.trees:
            assert not set(tree.struct_idx) & set(tree.honest_idx)

    def test_leaf_members_are_honest_rows(self, small_forest):
        for tree in small_forest.trees:
            honest = set(tree.honest_idx)
            struct = set(tree.struct_idx)
            for members in tree.leaf_members:
                for arm_members in members:
                    s = set(arm_members)
                    assert s <= honest
                    assert not s & struct

    def test_min_leaf_respected_for_all_arms(self, small_forest):
        # all three arms clear the eligibility bar in this balanced fixture,
        # so every honest leaf must hold at least min_leaf rows of every arm
        min_leaf = small_forest.params.min_leaf_per_arm
        for tree in small_forest.trees:
            assert (tree.cnt >= min_leaf).all()

    def test_every_honest_row_lands_in_one_leaf(self, small_forest):
        for tree in small_forest.trees:
            flat = np.concatenate(
                [m for members in tree.leaf_members for m in members])
            assert sorted(flat) == sorted(tree.honest_idx)


class TestWeights:
    def test_weight_contract(self, small_forest, small_query):
        wm = small_forest.weights(small_query)
        for a in range(small_forest.n_arms):
            assert (wm.w[a] >= 0).all()
            sums = wm.w[a].sum(axis=1)
            on = wm.support[:, a]
            np.testing.assert_allclose(sums[on], 1.0, atol=1e-10)
            np.testing.assert_allclose(sums[~on], 0.0, atol=1e-12)

    def test_weights_reproduce_predictions(self, small_forest, small_query):
        """PO point estimates must equal the weight-average of honest outcomes."""
        wm = small_forest.weights(small_query)
        pred = small_forest.predict_po(small_query)
        y = small_forest.y_train
        for a in range(small_forest.n_arms):
            manual = wm.w[a] @ y[wm.arm_rows[a]]
            on = wm.support[:, a]
            np.testing.assert_allclose(manual[on], pred.po[on, a, :], atol=1e-8)

    def test_outcome_column_subsets_match_joint(self, small_forest, small_query):
        joint = small_forest.predict_po(small_query)
        one = small_forest.predict_po(small_query, columns=["y2"])
        np.testing.assert_array_equal(one.po[:, :, 0], joint.po[:, :, 1])
        with pytest.raises(DataError):
            small_forest.predict_po(small_query, columns=["nope"])


class TestDeterminism:
    def test_seed_and_thread_invariance(self, small_data, small_split):
        train = small_data.subset(small_split.train_ids)
        params = ForestParams(n_trees=20, min_leaf_per_arm=8, seed=5)
        f1 = fit(train, params, n_jobs=1)
        f2 = fit(train, params, n_jobs=4)
        f3 = fit(train, ForestParams(n_trees=20, min_leaf_per_arm=8, seed=6))
        assert f1.fingerprint() == f2.fingerprint()
        assert f1.fingerprint() != f3.fingerprint()

    def test_save_load_round_trip(self, small_forest, small_query, tmp_path):
        path = tmp_path / "f.bin"
        small_forest.save(path)
        back = Forest.load(path)
        assert back.fingerprint() == small_forest.fingerprint()
        np.testing.assert_array_equal(back.predict_po(small_query).po,
                                      small_forest.predict_po(small_query).po)

    def test_load_rejects_foreign_pickles(self, tmp_path):
        path = tmp_path / "junk.bin"
        with open(path, "wb") as fh:
            pickle.dump({"format": "something-else"}, fh)
        with pytest.raises(DataError):
            Forest.load(path)


class TestQueriesAndErrors:
    def test_array_query_accepted(self, small_forest):
        X = small_forest.X_train[:5]
        pred = small_forest.predict_po(X)
        assert pred.po.shape[0] == 5

    def test_wrong_width_rejected(self, small_forest):
        with pytest.raises(DataError):
            small_forest.predict_po(np.zeros((3, 2)))

    def test_schema_mismatch_rejected(self, small_forest, small_query):
        cfg = DgpConfig(n=50, p_continuous=3, p_ordered=1, p_unordered=1,
                        unordered_levels=6, seed=0)
        other, _ = generate(cfg)
        with pytest.raises(DataError):
            small_forest.predict_po(other)

    def test_missing_arm_rejected(self, small_data):
        from treatfx.data import Dataset
        # dropping the middle arm breaks the contiguous 0..M label range
        keep = np.flatnonzero(small_data.treatment != 1)
        broken = small_data.df.iloc[keep].reset_index(drop=True)
        with pytest.raises(DataError):
            Dataset(broken, small_data.specs)


class TestAccuracy:
    def test_constant_effect_recovered(self, small_forest, small_query, small_oracle):
        pred = small_forest.predict_po(small_query)
        iate = pred.po[:, 1, -1] - pred.po[:, 0, -1]
        assert abs(iate.mean() - 10.0) < 2.5


class TestOob:
    def test_oob_mse_positive_finite(self, small_forest):
        mse = small_forest.oob_mse()
        assert np.isfinite(mse) and mse > 0

    def test_informative_feature_ranks_first(self):
        cfg = DgpConfig(n=900, m_treatments=2, seed=11, noise_sd=3.0, horizons=1)
        data, _ = generate(cfg)
        forest = fit(data, ForestParams(n_trees=60, min_leaf_per_arm=10, seed=1),
                     n_jobs=2)
        scores = variable_importance(forest, seed=0, n_repeats=3)
        # x1 carries the whole baseline signal; everything else is noise
        others = [v for k, v in scores.items() if k != "x1"]
        assert scores["x1"] > max(others)


class TestTune:
    def test_picks_from_grid_and_reports(self, small_data, small_split):
        train = small_data.subset(small_split.train_ids)
        base = ForestParams(n_trees=15, seed=2)
        best, results = tune(train, {"min_leaf_per_arm": [8, 15], "mtry": [2, None]},
                             base, seed=2, n_jobs=2)
        assert best.min_leaf_per_arm in (8, 15)
        assert len(results) == 4
        assert all(np.isfinite(r["oob_mse"]) for r in results)
        best_row = min(results, key=lambda r: r["oob_mse"])
        assert best.min_leaf_per_arm == best_row["min_leaf_per_arm"]

    def test_infeasible_leaf_sizes_skipped(self, small_data, small_split):
        train = small_data.subset(small_split.train_ids)
        base = ForestParams(n_trees=5, seed=2)
        bar = min_feasible_arm_count(train, base)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            best, results = tune(train, {"min_leaf_per_arm": [8, bar + 50]}, base, seed=0)
        assert any("infeasible" in str(w.message) for w in caught)
        assert len(results) == 1
        with pytest.raises(DataError):
            tune(train, {"min_leaf_per_arm": [bar + 50]}, base, seed=0)

    def test_empty_grid_rejected(self, small_data, small_split):
        train = small_data.subset(small_split.train_ids)
        with pytest.raises(DataError):
            tune(train, {"min_leaf_per_arm": []}, ForestParams(n_trees=5), seed=0)


class TestFeatureSelect:
    def test_pinned_columns_survive(self):
        cfg = DgpConfig(n=900, m_treatments=2, seed=13, noise_sd=5.0, horizons=1)
        data, _ = generate(cfg)
        split = split_samples(data, (0.4, 0.2, 0.4), seed=1)
        selected, scores = feature_select(
            data, split, ForestParams(n_trees=40, min_leaf_per_arm=10, seed=1),
            pinned=("u1",), n_jobs=2)
        assert "u1" in selected
        assert "x1" in selected
        assert set(scores) == {s.name for s in data.covariate_specs()}

    def test_empty_selection_slice_rejected(self, small_data):
        split = split_samples(small_data, (0.6, 0.4, 0.0), seed=1)
        with pytest.raises(DataError):
            feature_select(small_data, split, ForestParams(n_trees=5))


class TestCommonSupport:
    def test_zero_threshold_is_noop(self, small_data):
        kept, report, ids, probs = common_support_trim(small_data, eps=0.0)
        assert kept.n == small_data.n
        assert report["n_dropped"] == 0
        assert probs is None

    def test_confounded_data_gets_trimmed(self):
        cfg = DgpConfig(n=2500, m_treatments=3, seed=21, confounding_strength=3.0)
        data, _ = generate(cfg)
        kept, report, kept_ids, probs = common_support_trim(data, eps=0.05, seed=0)
        assert report["n_dropped"] > 0
        assert kept.n == data.n - report["n_dropped"]
        assert (probs[kept_ids] >= 0.05).all()
        assert sum(report["dropped_by_arm"].values()) == report["n_dropped"]

    def test_bad_threshold(self, small_data):
        with pytest.raises(DataError):
            common_support_trim(small_data, eps=0.7)
