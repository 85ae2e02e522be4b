import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gab import rng


def test_keys_shape_and_distinct():
    k = rng.cell_keys(7, rng.MAIN, np.arange(5), 11)
    assert k.shape == (5, 11)
    assert np.unique(k).size == 55


def test_streams_and_seeds_differ():
    a = rng.cell_keys(7, rng.MAIN, [0], 4)
    assert not np.array_equal(a, rng.cell_keys(7, rng.INIT, [0], 4))
    assert not np.array_equal(a, rng.cell_keys(8, rng.MAIN, [0], 4))


def test_rep_addressing_independent_of_batch():
    full = rng.cell_keys(3, rng.MAIN, np.arange(10), 3)
    np.testing.assert_array_equal(full[[4, 7]], rng.cell_keys(3, rng.MAIN, [4, 7], 3))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**63), t=st.integers(0, 10**9))
def test_uniform_range(seed, t):
    u = rng.uniforms(rng.cell_keys(seed, rng.MAIN, np.arange(4), 8), t)
    assert ((u > 0) & (u <= 1)).all()


def test_uniform_distribution():
    keys = rng.cell_keys(0, rng.MAIN, np.arange(200), 50)
    u = np.concatenate([rng.uniforms(keys, t).ravel() for t in range(20)])
    assert stats.kstest(u, "uniform").pvalue > 1e-3
    # consecutive times are uncorrelated
    a, b = rng.uniforms(keys, 0).ravel(), rng.uniforms(keys, 1).ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05
