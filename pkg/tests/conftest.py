"""Shared fixtures: small synthetic datasets and a fitted forest."""

import numpy as np
import pytest

from treatfx.data import split_samples
from treatfx.dgp import DgpConfig, EffectSpec, generate
from treatfx.forest import ForestParams, fit


@pytest.fixture(scope="session")
def small_gen():
    cfg = DgpConfig(
        n=600, m_treatments=3, seed=42, noise_sd=8.0, horizons=3,
        effect_specs={1: EffectSpec("constant", value=10.0),
                      2: EffectSpec("linear", column="x2", slope=4.0)},
    )
    return generate(cfg)


@pytest.fixture(scope="session")
def small_data(small_gen):
    return small_gen[0]


@pytest.fixture(scope="session")
def small_oracle(small_gen):
    return small_gen[1]


@pytest.fixture(scope="session")
def small_split(small_data):
    return split_samples(small_data, (0.6, 0.4, 0.0), seed=5)


@pytest.fixture(scope="session")
def small_forest(small_data, small_split):
    train = small_data.subset(small_split.train_ids)
    params = ForestParams(n_trees=60, min_leaf_per_arm=8, seed=3)
    return fit(train, params, n_jobs=2)


@pytest.fixture(scope="session")
def small_query(small_data, small_split):
    return small_data.subset(small_split.predict_ids)


def rng_po_instance(seed, n=None, n_arms=None):
    """Random allocation instance used by allocation / policy-tree tests."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(4, 13))
    n_arms = n_arms or int(rng.integers(2, 5))
    po = np.round(rng.uniform(0.0, 100.0, size=(n, n_arms)), 3)
    observed = rng.integers(0, n_arms, n)
    return po, observed
