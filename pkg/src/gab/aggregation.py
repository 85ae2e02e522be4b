"""Rare-event scaling experiments: binary panels aggregating to a Poisson AR.

Exact small-instance oracles (Poisson-binomial PMF, total variation to the
matched Poisson law) sit next to the Monte Carlo drivers that compare
simulated aggregate counts with the limiting intensity recursion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import SpecValidationError
from .model import ModelSpec, validate_spec
from .poisson import PoissonParams, filter_lambda
from .simulate import SimConfig, StationaryWarmup, simulate_batch, stationary_covariance

POISSON_TAIL = 1e-12


@dataclass(frozen=True)
class RareEventScaling:
    """omega_i = c_i / N, alpha_i = a_i / N**kappa, beta_i = beta.

    ``c``, ``a`` and ``gamma`` are value patterns tiled cyclically over the
    N series, so their cross-sectional averages are exact at every N that is
    a multiple of the pattern length.
    """

    n_grid: Sequence[int] = (50, 200, 800)
    kappa: float = 1.0
    c: Sequence[float] = (0.25,)
    a: Sequence[float] = (0.5,)
    beta: float = 0.6
    gamma: Sequence[float] = (0.2,)
    bound: Optional[float] = None  # C: upper bound on every c_i and a_i

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        for name in ("c", "a", "gamma"):
            v = np.asarray(getattr(self, name), float)
            if v.size == 0 or (v < 0).any():
                raise ValueError(f"{name} must be a nonempty nonnegative pattern")
        if self.bound is not None and max(max(self.c), max(self.a)) > self.bound:
            raise ValueError("c_i and a_i must not exceed the bound C")

    def tiled(self, name, N):
        return np.resize(np.asarray(getattr(self, name), float), N)

    @property
    def c_bar(self):
        return float(np.mean(self.c))

    @property
    def gamma_bar(self):
        return float(np.mean(self.gamma))

    def limit_params(self) -> PoissonParams:
        return PoissonParams(self.c_bar, self.gamma_bar, self.beta)

    def limit_mean(self):
        return self.c_bar / (1.0 - self.beta - self.gamma_bar)

    def limit_var_sum_p(self):
        b, g, c = self.beta, self.gamma_bar, self.c_bar
        return c * g * g / ((1.0 - (b + g) ** 2) * (1.0 - b - g))


def make_rare_event_spec(scaling: RareEventScaling, N: int) -> ModelSpec:
    spec = ModelSpec.interactive(scaling.tiled("c", N) / N, scaling.tiled("a", N) / N ** scaling.kappa,
                                 scaling.tiled("gamma", N), scaling.beta, n_series=N)
    rep = validate_spec(spec)
    if not rep.ok:
        raise SpecValidationError(rep)
    return spec


def feasible_grid(scaling: RareEventScaling):
    """{N: passes validation} over the configured grid."""
    out = {}
    for N in scaling.n_grid:
        try:
            make_rare_event_spec(scaling, N)
            out[N] = True
        except SpecValidationError:
            out[N] = False
    return out


def build_regular_network(N: int, d: int) -> np.ndarray:
    """Circulant W with weight 1/d on the d cyclic successors i+1, ..., i+d."""
    if not (1 <= d <= N):
        raise ValueError(f"need 1 <= d <= N, got d={d}, N={N}")
    W = np.zeros((N, N))
    rows = np.arange(N)
    for k in range(1, d + 1):
        W[rows, (rows + k) % N] = 1.0 / d
    return W


def log_degree(factor=4.0):
    """d(N) = ceil(factor * log N), capped at N."""
    return lambda N: min(N, int(math.ceil(factor * math.log(N))))


# --------------------------------------------------------------------------
# exact oracles
# --------------------------------------------------------------------------


def bernoulli_sum_pmf(q, kmax=None) -> np.ndarray:
    """PMF of sum_i Bernoulli(q_i) by iterative convolution.

    With ``kmax`` the support is cut at kmax; entries 0..kmax stay exact
    because convolution only moves mass upward.
    """
    q = np.asarray(q, float).ravel()
    if ((q < 0) | (q > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    K = q.size if kmax is None else min(int(kmax), q.size)
    pmf = np.zeros(K + 1)
    pmf[0] = 1.0
    for qi in q:
        pmf[1:] = pmf[1:] * (1.0 - qi) + pmf[:-1] * qi
        pmf[0] *= 1.0 - qi
    return pmf


def _pb_pmf_batch(Q, K):
    """Rows of Q are probability vectors; returns (rows, K+1) truncated PMFs."""
    S, N = Q.shape
    pmf = np.zeros((S, K + 1))
    pmf[:, 0] = 1.0
    for i in range(N):
        qi = Q[:, i:i + 1]
        pmf[:, 1:] = pmf[:, 1:] * (1.0 - qi) + pmf[:, :-1] * qi
        pmf[:, 0] *= 1.0 - qi[:, 0]
    return pmf


def _tv_rows(Q):
    lam = Q.sum(axis=1)
    K = int(max(stats.poisson.ppf(1.0 - POISSON_TAIL, max(lam.max(), 1e-300)), 1)) + 1
    pb = _pb_pmf_batch(Q, K)
    k = np.arange(K + 1)
    pois = stats.poisson.pmf(k[None, :], lam[:, None])
    # leftover mass beyond K counts as disjoint on both sides
    tail = np.clip(1.0 - pb.sum(axis=1), 0, None) + np.clip(1.0 - pois.sum(axis=1), 0, None)
    return 0.5 * (np.abs(pb - pois).sum(axis=1) + tail)


def poisson_tv_distance(q) -> float:
    """Total variation between Poisson-binomial(q) and Poisson(sum q)."""
    q = np.asarray(q, float).ravel()
    if not q.any():
        return 0.0
    return float(_tv_rows(q[None, :])[0])


def le_cam_bound(q) -> float:
    q = np.asarray(q, float)
    return float(np.sum(q * q))


# --------------------------------------------------------------------------
# Monte Carlo experiments
# --------------------------------------------------------------------------


@dataclass
class LimitDiagnostics:
    N: int
    mean_X: float
    mean_sum_p: float
    var_sum_p: float
    var_sum_p_exact: float
    mean_X_limit: float
    var_sum_p_limit: float
    tv_exact: float  # PB(p_t) vs Poisson(sum p_t), averaged over sampled cells
    tv_pooled: float  # empirical law of X vs Poisson mixture with intensities sum p_t
    tv_lambda: float  # same, intensities from the limiting recursion
    dispersion: float  # mean (X - sum p)^2 / mean sum p
    pit_deviation: float  # max |bin frequency - 1/bins| of the randomized PIT
    mean_max_p: float
    mean_abs_lambda_gap: float  # mean |lambda_t - sum p_t|
    extra: dict = field(default_factory=dict)

    def row(self):
        d = asdict(self)
        d.pop("extra")
        d.update(self.extra)
        return d


def _mixture_tv(X, lam, kmax=None):
    """TV between the empirical law of pooled counts X and the average of
    Poisson(lam) over the same cells."""
    X = X.ravel()
    lam = lam.ravel()
    K = int(max(X.max(), stats.poisson.ppf(1.0 - POISSON_TAIL, lam.max()))) + 1
    emp = np.bincount(X, minlength=K + 1)[: K + 1] / X.size
    # lambda values repeat heavily only in degenerate cases; bin them to keep memory flat
    mix = np.zeros(K + 1)
    k = np.arange(K + 1)
    for chunk in np.array_split(lam, max(1, lam.size // 20000)):
        mix += stats.poisson.pmf(k[None, :], chunk[:, None]).sum(axis=0)
    mix /= lam.size
    return 0.5 * (np.abs(emp - mix).sum() + max(0.0, 1.0 - mix.sum()))


def _pit_deviation(X, lam, seed, bins=10):
    rng = np.random.default_rng(seed)
    X = X.ravel()
    lam = lam.ravel()
    lo = np.where(X > 0, stats.poisson.cdf(X - 1, lam), 0.0)
    hi = stats.poisson.cdf(X, lam)
    u = lo + rng.random(X.size) * (hi - lo)
    freq = np.histogram(u, bins=bins, range=(0, 1))[0] / X.size
    return float(np.max(np.abs(freq - 1.0 / bins)))


def diagnose_batch(spec, res, scaling, seed, var_exact=None):
    """LimitDiagnostics from a BatchResult of a rare-event spec."""
    N = spec.n_series
    X, SP = res.X, res.sum_p
    lim = scaling.limit_params()
    lam = np.empty_like(SP)
    for r in range(X.shape[0]):
        lam[r, 0] = SP[r, 0]
        lam[r, 1:] = filter_lambda(lim, X[r, :-1], SP[r, 0])
    tv_exact = float(np.mean(_tv_rows(res.snapshots.reshape(-1, N)))) if res.snapshots is not None else float("nan")
    if var_exact is None:
        var_exact = float(stationary_covariance(spec).sum())
    return LimitDiagnostics(
        N=N,
        mean_X=float(X.mean()),
        mean_sum_p=float(SP.mean()),
        var_sum_p=float(SP.var()),
        var_sum_p_exact=var_exact,
        mean_X_limit=scaling.limit_mean(),
        var_sum_p_limit=scaling.limit_var_sum_p(),
        tv_exact=tv_exact,
        tv_pooled=float(_mixture_tv(X, SP)),
        tv_lambda=float(_mixture_tv(X, lam)),
        dispersion=float(np.mean((X - SP) ** 2) / SP.mean()),
        pit_deviation=_pit_deviation(X, SP, seed),
        mean_max_p=float(res.max_p.mean()),
        mean_abs_lambda_gap=float(np.mean(np.abs(lam - SP))),
    )


def _snapshot_times(T, k):
    return tuple(np.unique(np.linspace(0, T - 1, k).astype(int)))


def run_limit_experiment(scaling: RareEventScaling, T=2000, reps=200, seed=0, threads=1,
                         warmup=300, n_snapshots=8):
    """Diagnostics per N of the grid (list in grid order)."""
    out = []
    for N in scaling.n_grid:
        spec = make_rare_event_spec(scaling, N)
        cfg = SimConfig(seed=seed, horizon=T, init=StationaryWarmup(extra=warmup), threads=threads)
        res = simulate_batch(spec, cfg, reps, snapshot_times=_snapshot_times(T, n_snapshots))
        out.append(diagnose_batch(spec, res, scaling, seed))
    return out


@dataclass
class NetworkComparison:
    N: int
    d: int
    network: LimitDiagnostics
    complete: LimitDiagnostics

    def rel_diff(self, stat):
        a, b = getattr(self.network, stat), getattr(self.complete, stat)
        return abs(a - b) / abs(b)


def make_network_spec(scaling: RareEventScaling, N, W):
    g = scaling.tiled("gamma", N)
    if np.ptp(g) != 0:
        raise ValueError("the network experiment needs a homogeneous gamma")
    spec = ModelSpec.network_model(scaling.tiled("c", N) / N, scaling.tiled("a", N) / N ** scaling.kappa,
                                   g, scaling.beta, W)
    rep = validate_spec(spec)
    if not rep.ok:
        raise SpecValidationError(rep)
    return spec


def run_network_limit_experiment(scaling: RareEventScaling, degree: Callable[[int], int] = None, T=2000,
                                 reps=200, seed=0, threads=1, warmup=300, n_snapshots=8, min_growth=None):
    """d-regular circulant network vs the complete graph, on shared draws.

    ``min_growth`` (the constant d in d(N) >= d log N) is checked when given;
    violating degrees are still run, as a diagnostic.
    """
    degree = degree or log_degree(4.0)
    out = []
    for N in scaling.n_grid:
        d = int(degree(N))
        W = build_regular_network(N, d)
        spec_net = make_network_spec(scaling, N, W)
        spec_cg = make_rare_event_spec(scaling, N)
        cfg = SimConfig(seed=seed, horizon=T, init=StationaryWarmup(extra=warmup), threads=threads)
        snaps = _snapshot_times(T, n_snapshots)
        res_cg = simulate_batch(spec_cg, cfg, reps, snapshot_times=snaps)
        res_net = simulate_batch(spec_net, cfg, reps, snapshot_times=snaps)
        cg = diagnose_batch(spec_cg, res_cg, scaling, seed)
        net = diagnose_batch(spec_net, res_net, scaling, seed, var_exact=float("nan"))
        net.extra["degree"] = d
        if min_growth is not None:
            net.extra["growth_ok"] = d / math.log(N) >= min_growth
        out.append(NetworkComparison(N, d, net, cg))
    return out


def diagnostics_to_csv(diags, path):
    """Long format: one row per (N, statistic)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "statistic", "value"])
        for d in diags:
            for k, v in d.row().items():
                if k != "N":
                    w.writerow([d.N, k, repr(float(v))])
