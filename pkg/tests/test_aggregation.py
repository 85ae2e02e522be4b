import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gab.aggregation import (
    RareEventScaling,
    bernoulli_sum_pmf,
    build_regular_network,
    diagnostics_to_csv,
    feasible_grid,
    le_cam_bound,
    log_degree,
    make_rare_event_spec,
    poisson_tv_distance,
    run_limit_experiment,
    run_network_limit_experiment,
)
from gab.model import PanelState
from gab.poisson import simulate_poisson_ar
from gab.simulate import SimConfig, one_step_draws, simulate

DEFAULT = RareEventScaling()


def test_rare_event_spec_values():
    spec = make_rare_event_spec(DEFAULT, 50)
    np.testing.assert_allclose(spec.params["omega"], 0.005)
    np.testing.assert_allclose(spec.params["alpha"], 0.01)
    np.testing.assert_array_equal(spec.params["beta"], 0.6)
    np.testing.assert_array_equal(spec.params["gamma"], 0.2)
    big = make_rare_event_spec(DEFAULT, 100)
    assert (big.params["omega"] == spec.params["omega"][0] / 2).all()
    assert (big.params["alpha"] == spec.params["alpha"][0] / 2).all()


def test_zero_intercept_is_absorbing():
    spec = make_rare_event_spec(RareEventScaling(c=(0.0,)), 20)
    assert simulate(spec, SimConfig(horizon=100)).y.sum() == 0


def test_feasible_grid_reports_small_n():
    sc = RareEventScaling(n_grid=(1, 50), c=(0.3,), a=(0.5,))
    assert feasible_grid(sc) == {1: False, 50: True}
    with pytest.raises(ValueError):
        RareEventScaling(c=(2.0,), bound=1.0)


def test_limit_constants():
    assert DEFAULT.limit_mean() == pytest.approx(1.25)
    assert DEFAULT.limit_var_sum_p() == pytest.approx(0.1389, abs=5e-5)
    # stationary variance of the limiting intensity
    lam = simulate_poisson_ar(DEFAULT.limit_params(), 400000, seed=0).lam
    assert lam.var() == pytest.approx(DEFAULT.limit_var_sum_p(), rel=0.03)


# ---- exact oracles ------------------------------------------------------------------


def test_pmf_examples():
    np.testing.assert_allclose(bernoulli_sum_pmf([0.5, 0.5]), [0.25, 0.5, 0.25])
    np.testing.assert_allclose(bernoulli_sum_pmf([0.1, 0.2]), [0.72, 0.26, 0.02])
    np.testing.assert_array_equal(bernoulli_sum_pmf(np.zeros(4)), [1, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        bernoulli_sum_pmf([1.2])


@settings(max_examples=60, deadline=None)
@given(q=st.lists(st.floats(0, 1), min_size=1, max_size=60).map(np.array))
def test_pmf_moments(q):
    pmf = bernoulli_sum_pmf(q)
    k = np.arange(pmf.size)
    assert abs(pmf.sum() - 1) <= 1e-12
    assert abs(k @ pmf - q.sum()) <= 1e-12 * max(1, q.size)
    var = (k**2) @ pmf - (k @ pmf) ** 2
    assert abs(var - np.sum(q * (1 - q))) <= 1e-10


def test_pmf_matches_brute_force():
    rng = np.random.default_rng(0)
    q = rng.random(5)
    brute = np.zeros(6)
    for bits in range(32):
        b = np.array([(bits >> i) & 1 for i in range(5)])
        brute[b.sum()] += np.prod(np.where(b, q, 1 - q))
    np.testing.assert_allclose(bernoulli_sum_pmf(q), brute, atol=1e-15)
    np.testing.assert_allclose(bernoulli_sum_pmf(q, kmax=2), brute[:3], atol=1e-15)


def test_tv_exact_cases():
    assert poisson_tv_distance([1.0]) == pytest.approx(1 - np.exp(-1), abs=1e-12)
    assert poisson_tv_distance(np.zeros(7)) == 0.0
    q = np.full(1000, 1.25 / 1000)
    assert poisson_tv_distance(q) <= le_cam_bound(q) == pytest.approx(1.5625e-3)


def test_tv_matches_direct_sum():
    q = np.array([0.3, 0.1, 0.05, 0.2])
    k = np.arange(60)
    pb = np.concatenate([bernoulli_sum_pmf(q), np.zeros(60 - 5)])
    direct = 0.5 * np.abs(pb - stats.poisson.pmf(k, q.sum())).sum()
    assert poisson_tv_distance(q) == pytest.approx(direct, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(q=st.lists(st.floats(0, 1), min_size=1, max_size=40).map(np.array))
def test_le_cam_inequality(q):
    tv = poisson_tv_distance(q)
    assert 0 <= tv <= 1
    assert tv <= le_cam_bound(q) + 1e-12


# ---- networks -------------------------------------------------------------------------


def test_regular_network():
    W = build_regular_network(4, 2)
    np.testing.assert_allclose(W.sum(0), 1)
    np.testing.assert_allclose(W.sum(1), 1)
    assert set(np.unique(W)) == {0.0, 0.5}
    np.testing.assert_allclose(build_regular_network(5, 5), 0.2)
    P = build_regular_network(6, 1)
    assert (P.sum(0) == 1).all() and (P.sum(1) == 1).all() and set(np.unique(P)) == {0.0, 1.0}
    with pytest.raises(ValueError):
        build_regular_network(3, 4)
    assert log_degree()(800) == 27


# ---- experiments ------------------------------------------------------------------------


def test_conditional_law_is_poisson_binomial():
    spec = make_rare_event_spec(DEFAULT, 50)
    rng = np.random.default_rng(1)
    ph = rng.uniform(0, 0.06, (1, 50))
    yh = (rng.random((1, 50)) < 0.03).astype(float)
    p, y = one_step_draws(spec, PanelState(ph, yh), seed=3, reps=40000)
    counts = np.bincount(y.sum(axis=1), minlength=51)
    pmf = bernoulli_sum_pmf(p)
    keep = pmf * 40000 >= 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(pmf[keep], pmf[~keep].sum()) * 40000
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_no_feedback_reduces_to_exact_oracle():
    sc = RareEventScaling(n_grid=(40,), a=(0.0,), gamma=(0.0,))
    (d,) = run_limit_experiment(sc, T=50, reps=3, warmup=10)
    q = np.full(40, 0.25 / 40 / 0.4)
    assert d.tv_exact == pytest.approx(poisson_tv_distance(q), rel=1e-9)


def test_small_experiment_shapes(tmp_path):
    sc = RareEventScaling(n_grid=(20, 80))
    diags = run_limit_experiment(sc, T=300, reps=10, warmup=100)
    assert [d.N for d in diags] == [20, 80]
    for d in diags:
        row = d.row()
        assert all(np.isfinite(v) for v in row.values())
        assert 0 <= d.tv_exact <= 1 and 0 <= d.tv_pooled <= 1
    assert diags[1].mean_max_p < diags[0].mean_max_p
    diagnostics_to_csv(diags, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "N,statistic,value" and len(lines) == 1 + 2 * (len(diags[0].row()) - 1)


def test_complete_degree_reproduces_interactive():
    sc = RareEventScaling(n_grid=(30,))
    (cmp,) = run_network_limit_experiment(sc, degree=lambda N: N, T=200, reps=4, warmup=50)
    assert cmp.network.mean_X == cmp.complete.mean_X
    assert cmp.network.var_sum_p == pytest.approx(cmp.complete.var_sum_p, rel=1e-9)
    assert cmp.rel_diff("mean_sum_p") < 1e-9
