"""Trajectory simulation, coupled runs and stationary moments.

All draws come from :mod:`gab.rng`, addressed by (replication, series, step),
so the output of a batch does not depend on how it is split across threads.
"""

from __future__ import annotations

import csv
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from . import rng
from .errors import NonConvergence, ShapeMismatch, UnsupportedFamily
from .model import (
    Family,
    ModelSpec,
    PanelState,
    check_contraction,
    eval_g,
    require_valid,
    unconditional_mean,
)
from .poisson import CountSeries

log = logging.getLogger(__name__)

DEFAULT_WARMUP = 1000


@dataclass(frozen=True)
class Fixed:
    """Initial probabilities p_0, p_{-1}, ... (index 0 is p_0).

    ``p`` may be a scalar, an (N,) vector used for every lag, or an
    (max(s,q), N) array.  Initial outcomes are drawn from these
    probabilities on a dedicated stream unless ``y`` is given.
    """

    p: Union[float, np.ndarray] = 0.5
    y: Optional[np.ndarray] = None

    def arrays(self, spec):
        m, n = spec.max_lag, spec.n_series
        p = np.asarray(self.p, float)
        if p.ndim <= 1:
            p = np.broadcast_to(p, (n,))
            p = np.broadcast_to(p, (m, n))
        elif p.shape != (m, n):
            raise ShapeMismatch(f"initial p has shape {p.shape}; need ({m}, {n})")
        if ((p < 0) | (p > 1)).any():
            raise ValueError("initial probabilities must lie in [0, 1]")
        y = None
        if self.y is not None:
            y = np.broadcast_to(np.asarray(self.y, float), (spec.q, n))
        return p, y


@dataclass(frozen=True)
class StationaryWarmup:
    """Start at the unconditional mean (or ``start``) and discard ``extra`` steps."""

    extra: int = DEFAULT_WARMUP
    start: Optional[float] = None


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    horizon: int = 1000
    burn_in: int = 0
    init: Union[Fixed, StationaryWarmup] = field(default_factory=StationaryWarmup)
    threads: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")


@dataclass(frozen=True)
class Trajectory:
    p: np.ndarray  # (N, T)
    y: np.ndarray  # (N, T) of 0/1
    seed: int
    spec_hash: str
    rep: int = 0

    @property
    def n_series(self):
        return self.p.shape[0]

    @property
    def horizon(self):
        return self.p.shape[1]

    def to_csv(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        n = self.n_series
        cols = [f"s{i}" for i in range(n)]
        X = self.y.sum(axis=0).astype(int)
        with open(os.path.join(out_dir, "p.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + cols)
            for t in range(self.horizon):
                w.writerow([t] + [repr(float(v)) for v in self.p[:, t]])
        with open(os.path.join(out_dir, "y.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + cols + ["X"])
            for t in range(self.horizon):
                w.writerow([t] + [int(v) for v in self.y[:, t]] + [X[t]])
        with open(os.path.join(out_dir, "X.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "X", "sum_p"])
            sp = self.p.sum(axis=0)
            for t in range(self.horizon):
                w.writerow([t, X[t], repr(float(sp[t]))])


@dataclass
class BatchResult:
    """Per-replication summaries, each of shape (reps, T) unless noted."""

    X: np.ndarray
    sum_p: np.ndarray
    max_p: np.ndarray
    p: Optional[np.ndarray] = None  # (reps, N, T)
    y: Optional[np.ndarray] = None
    snapshots: Optional[np.ndarray] = None  # (reps, len(times), N)
    snapshot_times: tuple = ()


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------


def _start_arrays(spec, init):
    m, n = spec.max_lag, spec.n_series
    if isinstance(init, Fixed):
        return init.arrays(spec)
    if init.start is not None:
        return np.full((m, n), float(init.start)), None
    try:
        mu = unconditional_mean(spec).per_series_mean
    except Exception:  # no closed form for this family
        mu = np.full(n, 0.5)
    return np.broadcast_to(np.clip(mu, 0.0, 1.0), (m, n)).copy(), None


def _initial_rings(spec, p0, y0, keys_init):
    """Rings of shape (B, s, N) and (B, q, N).  p0 broadcasts to (B, m, N)."""
    B, n = keys_init.shape
    m, s, q = spec.max_lag, spec.s, spec.q
    p0 = np.broadcast_to(p0, (B, m, n))
    if y0 is None:
        y0 = np.stack([(rng.uniforms(keys_init, j) <= p0[:, j]).astype(float) for j in range(q)], axis=1)
    else:
        y0 = np.broadcast_to(np.asarray(y0, float), (B, q, n))
    return np.array(p0[:, :s], dtype=float), np.array(y0, dtype=float)


def _steps(spec, keys, ph, yh, n_steps, offset=0):
    """Advance rings in place, yielding (k, p_k, y_k) for each step."""
    for k in range(n_steps):
        p = eval_g(spec, PanelState(ph, yh))
        y = (rng.uniforms(keys, offset + k) <= p).astype(float)
        if ph.shape[-2] > 1:
            ph[:, 1:] = ph[:, :-1].copy()
        if yh.shape[-2] > 1:
            yh[:, 1:] = yh[:, :-1].copy()
        ph[:, 0] = p
        yh[:, 0] = y
        yield k, p, y


def _skip_steps(cfg):
    extra = cfg.init.extra if isinstance(cfg.init, StationaryWarmup) else 0
    return extra + cfg.burn_in


def _run_chunk(spec, cfg, reps, p0, y0, panels, snap_idx):
    n, T = spec.n_series, cfg.horizon
    keys = rng.cell_keys(cfg.seed, rng.MAIN, reps, n)
    keys_init = rng.cell_keys(cfg.seed, rng.INIT, reps, n)
    ph, yh = _initial_rings(spec, p0, y0, keys_init)
    B = len(reps)
    skip = _skip_steps(cfg)
    for _ in _steps(spec, keys, ph, yh, skip):
        pass
    X = np.empty((B, T), dtype=np.int64)
    sp = np.empty((B, T))
    mp = np.empty((B, T))
    P = np.empty((B, n, T)) if panels else None
    Y = np.empty((B, n, T), dtype=np.int8) if panels else None
    snaps = np.empty((B, len(snap_idx), n)) if snap_idx else None
    snap_pos = {t: j for j, t in enumerate(snap_idx)}
    for t, p, y in _steps(spec, keys, ph, yh, T, offset=skip):
        X[:, t] = y.sum(axis=1)
        sp[:, t] = p.sum(axis=1)
        mp[:, t] = p.max(axis=1)
        if panels:
            P[:, :, t] = p
            Y[:, :, t] = y
        if t in snap_pos:
            snaps[:, snap_pos[t]] = p
    return X, sp, mp, P, Y, snaps


def simulate_batch(spec: ModelSpec, cfg: SimConfig, reps: Union[int, Sequence[int]] = 1,
                   panels=False, snapshot_times=(), p0=None) -> BatchResult:
    """Simulate independent replications and keep per-step summaries.

    ``p0`` optionally overrides the initial probabilities with a per-replication
    array of shape (reps, max(s,q), N); replication r always reads row r.
    """
    require_valid(spec)
    reps = np.arange(reps) if np.isscalar(reps) else np.asarray(reps)
    start_p, y0 = _start_arrays(spec, cfg.init)
    if p0 is None:
        p0 = start_p
    else:
        p0 = np.asarray(p0, float)
        if p0.ndim == 3 and p0.shape[0] != len(reps):
            raise ShapeMismatch("per-replication p0 needs one row per replication")
        if p0.ndim == 3:
            # index by position, not by replication id
            p0 = {int(r): p0[j] for j, r in enumerate(reps)}
    snap_idx = tuple(sorted(int(t) for t in snapshot_times))

    threads = max(1, int(cfg.threads))
    chunks = [c for c in np.array_split(reps, min(threads, len(reps))) if len(c)]

    def work(chunk):
        p_init = p0
        if isinstance(p0, dict):
            p_init = np.stack([p0[int(r)] for r in chunk])
        return _run_chunk(spec, cfg, chunk, p_init, y0, panels, snap_idx)

    if threads == 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, chunks))

    def cat(i):
        if parts[0][i] is None:
            return None
        return np.concatenate([pt[i] for pt in parts], axis=0)

    return BatchResult(cat(0), cat(1), cat(2), cat(3), cat(4), cat(5), snap_idx)


def simulate(spec: ModelSpec, cfg: SimConfig, rep: int = 0) -> Trajectory:
    """A single replication with full (N, T) panels."""
    res = simulate_batch(spec, cfg, [rep], panels=True)
    return Trajectory(res.p[0], res.y[0].astype(np.int8), cfg.seed, spec.digest(), rep)


def aggregate_counts(traj: Trajectory) -> CountSeries:
    y = np.asarray(traj.y)
    if y.ndim != 2:
        raise ShapeMismatch("expected an (N, T) outcome panel")
    return CountSeries(y.sum(axis=0).astype(np.int64))


def one_step_draws(spec: ModelSpec, state: PanelState, seed: int, reps: int, t: int = 0):
    """Outcomes for ``reps`` independent draws from a frozen history.

    Returns (p, y) with p of shape (N,) and y of shape (reps, N).
    """
    require_valid(spec)
    p = eval_g(spec, state)
    keys = rng.cell_keys(seed, rng.MAIN, np.arange(reps), spec.n_series)
    y = (rng.uniforms(keys, t) <= p).astype(np.int8)
    return p, y


# --------------------------------------------------------------------------
# coupling
# --------------------------------------------------------------------------


@dataclass
class CouplingTrace:
    distance: np.ndarray  # mean over replications of sum_i |p - p'|, per t
    slope: float
    intercept: float
    n_fit: int
    reps: int

    @property
    def rate(self):
        return float(np.exp(self.slope))


def fit_log_decay(distance, floor=1e-12):
    d = np.asarray(distance, float)
    t = np.arange(d.size)
    keep = d > floor
    if keep.sum() < 2:
        return float("nan"), float("nan"), int(keep.sum())
    slope, icpt = np.polyfit(t[keep], np.log(d[keep]), 1)
    return float(slope), float(icpt), int(keep.sum())


def coupled_simulate(spec: ModelSpec, init_a, init_b, cfg: SimConfig, reps: int) -> CouplingTrace:
    """Two copies of the chain driven by the same uniforms (including the
    draws for the initial outcomes)."""
    require_valid(spec)
    rep_ = check_contraction(spec)
    if not (rep_.spectral_condition_holds or rep_.lipschitz_condition_holds):
        warnings.warn(f"{spec.family.value} spec does not satisfy a contraction condition "
                      f"(rho={rep_.rho}); the coupling need not decay", RuntimeWarning, stacklevel=2)
    init_a = init_a if isinstance(init_a, Fixed) else Fixed(init_a)
    init_b = init_b if isinstance(init_b, Fixed) else Fixed(init_b)
    pa, ya = init_a.arrays(spec)
    pb, yb = init_b.arrays(spec)
    ids = np.arange(reps)
    n = spec.n_series
    keys = rng.cell_keys(cfg.seed, rng.MAIN, ids, n)
    keys_init = rng.cell_keys(cfg.seed, rng.INIT, ids, n)
    pha, yha = _initial_rings(spec, pa, ya, keys_init)
    phb, yhb = _initial_rings(spec, pb, yb, keys_init)
    ph = np.concatenate([pha, phb])
    yh = np.concatenate([yha, yhb])
    keys2 = np.concatenate([keys, keys])
    dist = np.empty(cfg.horizon)
    for t, p, _ in _steps(spec, keys2, ph, yh, cfg.burn_in + cfg.horizon):
        if t >= cfg.burn_in:
            dist[t - cfg.burn_in] = np.abs(p[:reps] - p[reps:]).sum(axis=1).mean()
    slope, icpt, n_fit = fit_log_decay(dist)
    return CouplingTrace(dist, slope, icpt, n_fit, reps)


# --------------------------------------------------------------------------
# stationary moments of the interactive model
# --------------------------------------------------------------------------


def _interactive_blocks(spec):
    P, n = spec.params, spec.n_series
    Pi = np.diag(P["alpha"]) + np.outer(P["gamma"], np.ones(n)) / n
    Phi = Pi + np.diag(P["beta"])
    return Pi, Phi


def stationary_covariance(spec: ModelSpec, tol=1e-14, max_iter=10_000) -> np.ndarray:
    """Exact stationary covariance of p_t for the interactive model.

    Solves Omega = Phi Omega Phi' + Pi diag(mu(1-mu) - diag Omega) Pi' by
    iterating on diag(Omega); each sweep is a discrete Lyapunov solve.
    """
    if spec.family is not Family.Interactive:
        raise UnsupportedFamily("stationary covariance is implemented for the interactive family")
    mu = unconditional_mean(spec).per_series_mean
    Pi, Phi = _interactive_blocks(spec)
    base = mu * (1.0 - mu)
    d = np.zeros_like(mu)
    for it in range(max_iter):
        Q = (Pi * (base - d)) @ Pi.T
        Om = solve_discrete_lyapunov(Phi, Q)
        d_new = np.diag(Om).copy()
        if np.max(np.abs(d_new - d)) <= tol * max(1.0, np.max(np.abs(d_new))):
            return 0.5 * (Om + Om.T)
        d = d_new
    raise NonConvergence("covariance fixed point did not settle", iterations=max_iter)


@dataclass
class StationaryMoments:
    mean_sum_p: float  # exact
    var_sum_p: float  # exact finite-N
    mc_mean_sum_p: float
    mc_var_sum_p: float
    mc_mean_max_p: float
    mc_mean_X: float


def stationary_moments(spec: ModelSpec, cfg: Optional[SimConfig] = None, reps: int = 20) -> StationaryMoments:
    if spec.family is not Family.Interactive:
        raise UnsupportedFamily("stationary moments are implemented for the interactive family")
    require_valid(spec)
    mean = unconditional_mean(spec).total_mean
    Om = stationary_covariance(spec)
    var = float(Om.sum())
    cfg = cfg or SimConfig(seed=0, horizon=5000)
    res = simulate_batch(spec, cfg, reps)
    return StationaryMoments(mean, var, float(res.sum_p.mean()), float(res.sum_p.var()),
                             float(res.max_p.mean()), float(res.X.mean()))
