import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gab.model import ModelSpec, PanelState, eval_g
from gab.simulate import (
    Fixed,
    SimConfig,
    StationaryWarmup,
    aggregate_counts,
    coupled_simulate,
    fit_log_decay,
    one_step_draws,
    simulate,
    simulate_batch,
    stationary_covariance,
    stationary_moments,
)
from gab.errors import SpecValidationError, UnsupportedFamily

INTERACTIVE = ModelSpec.interactive(0.05, 0.1, 0.2, 0.6, 5)


def test_deterministic_and_seed_sensitive():
    cfg = SimConfig(seed=11, horizon=200)
    a, b = simulate(INTERACTIVE, cfg), simulate(INTERACTIVE, cfg)
    np.testing.assert_array_equal(a.p, b.p)
    np.testing.assert_array_equal(a.y, b.y)
    c = simulate(INTERACTIVE, SimConfig(seed=12, horizon=200))
    assert not np.array_equal(a.y, c.y)


def test_thread_count_invariance():
    r1 = simulate_batch(INTERACTIVE, SimConfig(seed=3, horizon=100, threads=1), 9, panels=True)
    r3 = simulate_batch(INTERACTIVE, SimConfig(seed=3, horizon=100, threads=3), 9, panels=True)
    np.testing.assert_array_equal(r1.p, r3.p)
    np.testing.assert_array_equal(r1.X, r3.X)


def test_replication_addressable():
    batch = simulate_batch(INTERACTIVE, SimConfig(seed=5, horizon=50), 6, panels=True)
    single = simulate(INTERACTIVE, SimConfig(seed=5, horizon=50), rep=4)
    np.testing.assert_array_equal(batch.p[4], single.p)


def test_recursion_is_respected():
    spec = ModelSpec.linear_multilag(0.05, [0.1, 0.2], [0.3, 0.1], n_series=2)
    tr = simulate(spec, SimConfig(seed=1, horizon=60, init=Fixed(0.3)))
    for t in range(2, 60):
        st_ = PanelState(tr.p[:, [t - 1, t - 2]].T, tr.y[:, [t - 1, t - 2]].T.astype(float))
        np.testing.assert_allclose(tr.p[:, t], eval_g(spec, st_), atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5))
def test_trajectory_ranges(seed, n):
    rs = np.random.default_rng(seed)
    w = rs.dirichlet(np.ones(5), size=n)
    spec = ModelSpec.interactive(w[:, 0], w[:, 1], w[:, 2], w[:, 3], n)
    tr = simulate(spec, SimConfig(seed=seed, horizon=40, init=Fixed(rs.random())))
    assert ((tr.p >= 0) & (tr.p <= 1)).all()
    assert set(np.unique(tr.y)) <= {0, 1}
    np.testing.assert_array_equal(aggregate_counts(tr).X, tr.y.sum(axis=0))


def test_boundary_probabilities_are_deterministic():
    zero = ModelSpec.linear(0.0, 0.0, 0.0, n_series=3)
    assert simulate(zero, SimConfig(horizon=500, init=Fixed(0.0))).y.sum() == 0
    one = ModelSpec.linear(1.0, 0.0, 0.0, n_series=3)
    assert simulate(one, SimConfig(horizon=500, init=Fixed(1.0))).y.min() == 1


def test_one_step_frequency():
    spec = ModelSpec.linear(0.1, 0.2, 0.3)
    p, y = one_step_draws(spec, PanelState([[0.4]], [[1.0]]), seed=0, reps=40000)
    assert p[0] == pytest.approx(0.42)
    se = np.sqrt(0.42 * 0.58 / 40000)
    assert abs(y.mean() - 0.42) < 4 * se


def test_invalid_spec_rejected():
    with pytest.raises(SpecValidationError):
        simulate(ModelSpec.linear(0.5, 0.4, 0.3), SimConfig(horizon=10))


def test_fixed_init_shapes():
    spec = ModelSpec.linear_multilag(0.05, [0.1, 0.2], [0.3], n_series=2)
    p, y = Fixed(0.2).arrays(spec)
    assert p.shape == (2, 2) and y is None
    with pytest.raises(ValueError):
        Fixed(1.5).arrays(spec)
    with pytest.raises(ValueError):
        SimConfig(horizon=0)


def test_warmup_from_explicit_start():
    spec = ModelSpec.linear(0.1, 0.2, 0.3)
    a = simulate(spec, SimConfig(seed=1, horizon=30, init=StationaryWarmup(extra=50, start=0.9)))
    b = simulate(spec, SimConfig(seed=1, horizon=30, init=StationaryWarmup(extra=50, start=0.1)))
    # same uniforms, contraction rate 0.5 per step: the starts are forgotten
    np.testing.assert_allclose(a.p, b.p, atol=1e-12)


def test_trajectory_csv(tmp_path):
    tr = simulate(INTERACTIVE, SimConfig(seed=0, horizon=20))
    tr.to_csv(tmp_path)
    lines = (tmp_path / "y.csv").read_text().splitlines()
    assert lines[0] == "t,s0,s1,s2,s3,s4,X"
    assert len(lines) == 21
    assert (tmp_path / "p.csv").exists() and (tmp_path / "X.csv").exists()


# ---- coupling -------------------------------------------------------------------


def test_coupling_identical_starts_is_zero():
    spec = ModelSpec.linear(0.0, 0.2, 0.3)
    tr = coupled_simulate(spec, 0.4, 0.4, SimConfig(seed=0, horizon=30), reps=20)
    assert (tr.distance == 0).all()


def test_coupling_decays_for_linear():
    spec = ModelSpec.linear(0.0, 0.2, 0.3)
    tr = coupled_simulate(spec, 0.0, 1.0, SimConfig(seed=0, horizon=40), reps=200)
    assert tr.distance[0] == pytest.approx(0.5)  # |beta (p0 - p0') + alpha (y0 - y0')| with y drawn 0 and 1
    assert tr.distance[-1] < tr.distance[0]
    assert tr.slope < np.log(0.5) + 0.05


def test_coupling_warns_without_contraction():
    spec = ModelSpec.interactive(0.0, 0.3, 0.3, 0.4, 2)
    with pytest.warns(RuntimeWarning):
        coupled_simulate(spec, 0.0, 1.0, SimConfig(seed=0, horizon=5), reps=3)


def test_fit_log_decay_exact():
    d = 3.0 * 0.7 ** np.arange(30)
    slope, icpt, n = fit_log_decay(d)
    assert slope == pytest.approx(np.log(0.7))
    assert icpt == pytest.approx(np.log(3.0))
    assert n == 30
    assert np.isnan(fit_log_decay(np.zeros(5))[0])


# ---- stationary moments --------------------------------------------------------


def test_covariance_matches_scalar_formula():
    # one series: the interactive model is a linear chain with alpha + gamma
    w, a, b, g = 0.1, 0.15, 0.3, 0.1
    spec = ModelSpec.interactive(w, a, g, b, 1)
    ae = a + g
    mu = w / (1 - ae - b)
    v = ae**2 * mu * (1 - mu) / (1 - (ae + b) ** 2 + ae**2)
    assert stationary_covariance(spec)[0, 0] == pytest.approx(v, rel=1e-12)


def test_covariance_symmetric_psd():
    rs = np.random.default_rng(4)
    w = rs.dirichlet(np.ones(5), size=4)
    om = stationary_covariance(ModelSpec.interactive(w[:, 0], w[:, 1], w[:, 2], w[:, 3], 4))
    np.testing.assert_allclose(om, om.T)
    assert np.linalg.eigvalsh(om).min() > -1e-14


def test_stationary_moments_monte_carlo():
    mom = stationary_moments(INTERACTIVE, SimConfig(seed=2, horizon=4000), reps=20)
    assert mom.mean_sum_p == pytest.approx(2.5)
    assert abs(mom.mc_mean_sum_p - 2.5) < 0.05
    assert mom.mc_var_sum_p == pytest.approx(mom.var_sum_p, rel=0.1)
    with pytest.raises(UnsupportedFamily):
        stationary_moments(ModelSpec.linear(0.1, 0.2, 0.3))
