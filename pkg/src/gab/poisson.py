"""Poisson autoregression for aggregate counts.

Linear recursion: lam_{t+1} = c + gamma * X_t + beta * lam_t.  Also the
general nonlinear recursion obtained as the aggregate limit of the nonlinear
interactive model, Poisson likelihood and MLE, and the map from fitted
Poisson parameters back to a homogeneous interactive binary model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.signal import lfilter
from scipy.special import gammaln

from .errors import NoConvergence, ShapeMismatch, UnsupportedFamily
from .model import F_GAMMA, ModelSpec, f_gamma_eval, require_valid
from .transforms import PositiveThenSimplex

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CountSeries:
    X: np.ndarray
    lam: Optional[np.ndarray] = None
    lam0: Optional[float] = None

    def __post_init__(self):
        X = np.asarray(self.X)
        if X.ndim != 1:
            raise ShapeMismatch("counts must be one-dimensional")
        if (X < 0).any() or not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("counts must be nonnegative integers")
        object.__setattr__(self, "X", X.astype(np.int64))

    def __len__(self):
        return self.X.size

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "X"] + (["lambda"] if self.lam is not None else []))
            for t, x in enumerate(self.X):
                w.writerow([t, int(x)] + ([repr(float(self.lam[t]))] if self.lam is not None else []))


def _counts(X):
    return X.X if isinstance(X, CountSeries) else np.asarray(X)


@dataclass(frozen=True)
class PoissonParams:
    c_bar: float
    gamma_bar: float
    beta: float

    def __post_init__(self):
        if min(self.c_bar, self.gamma_bar, self.beta) < 0:
            raise ValueError("Poisson AR coefficients must be nonnegative")
        if self.beta >= 1:
            raise ValueError("beta must be < 1")

    @property
    def stationary(self):
        return self.gamma_bar + self.beta < 1

    @property
    def mean(self):
        if not self.stationary:
            return float("inf")
        return self.c_bar / (1.0 - self.gamma_bar - self.beta)

    def as_array(self):
        return np.array([self.c_bar, self.gamma_bar, self.beta])

    def to_dict(self):
        return {"c_bar": self.c_bar, "gamma_bar": self.gamma_bar, "beta": self.beta}


@dataclass(frozen=True)
class GeneralPoissonParams:
    """Nonlinear recursion

        lam_{t+1} = c + sum_tau beta_tau lam_{t+1-tau}
                    + fbar . (X_t..X_{t-s+1}, lam_t..lam_{t-s+1})
                    + sum_j gamma_j f_gamma_j(X_t..., lam_t...)
    """

    c_bar: float
    betas: np.ndarray
    fbar: np.ndarray  # length 2s: weights on the s count lags then the s intensity lags
    gammas: np.ndarray
    f_gamma: Sequence[str]

    def __post_init__(self):
        betas = np.atleast_1d(np.asarray(self.betas, float))
        object.__setattr__(self, "betas", betas)
        s = betas.size
        fbar = np.zeros(2 * s) if self.fbar is None else np.asarray(self.fbar, float)
        if fbar.shape != (2 * s,):
            raise ShapeMismatch(f"fbar must have length {2 * s}")
        object.__setattr__(self, "fbar", fbar)
        gammas = np.atleast_1d(np.asarray(self.gammas, float))
        ids = (self.f_gamma,) if isinstance(self.f_gamma, str) else tuple(self.f_gamma)
        if gammas.size != len(ids):
            raise ShapeMismatch("one gamma weight per f_gamma catalog entry")
        for k in ids:
            if k not in F_GAMMA:
                raise UnsupportedFamily(f"unknown f_gamma catalog id {k!r}")
        object.__setattr__(self, "gammas", gammas)
        object.__setattr__(self, "f_gamma", ids)

    @property
    def s(self):
        return self.betas.size


# --------------------------------------------------------------------------
# filters and likelihood
# --------------------------------------------------------------------------


def filter_lambda(params: PoissonParams, X, lam0) -> np.ndarray:
    """lam[k] = c + gamma X[k] + beta lam[k-1], with lam[-1] = lam0.

    lam[k] is the intensity of the count that follows X[k].
    """
    X = _counts(X).astype(float)
    if lam0 < 0:
        raise ValueError("lam0 must be >= 0")
    b = params.beta
    lam, _ = lfilter([1.0], [1.0, -b], params.c_bar + params.gamma_bar * X, zi=[b * lam0])
    return lam


def filter_lambda_general(params: GeneralPoissonParams, X, lam_hist, x_hist=None) -> np.ndarray:
    """General recursion with the same alignment as :func:`filter_lambda`.

    ``lam_hist`` holds (lam_0, lam_{-1}, ...) and ``x_hist`` the counts
    preceding X[0] (most recent first); both are padded with their last
    value when shorter than s.
    """
    X = _counts(X).astype(float)
    s = params.s
    lam_hist = np.atleast_1d(np.asarray(lam_hist, float))
    lam_ring = np.concatenate([lam_hist, np.full(s, lam_hist[-1])])[:s]
    xh = np.zeros(0) if x_hist is None else np.atleast_1d(np.asarray(x_hist, float))
    # ring is shifted before use, so it starts one slot behind
    x_ring = np.concatenate([xh, np.full(s, xh[-1] if xh.size else 0.0)])[:s]
    out = np.empty(X.size)
    for k, x in enumerate(X):
        x_ring = np.concatenate([[x], x_ring[:-1]])
        val = params.c_bar + params.betas @ lam_ring
        val += params.fbar @ np.concatenate([x_ring, lam_ring])
        for g, kind in zip(params.gammas, params.f_gamma):
            if g:
                val += g * float(f_gamma_eval(kind, x_ring[None, :])[0])
        out[k] = val
        lam_ring = np.concatenate([[val], lam_ring[:-1]])
    return out


def loglik_from_intensity(X, lam):
    """sum_t [-lam_t + X_t log lam_t - log X_t!]; -inf when lam_t = 0 < X_t."""
    X = _counts(X).astype(float)
    lam = np.asarray(lam, float)
    if X.shape != lam.shape:
        raise ShapeMismatch("counts and intensities must align")
    bad = (lam <= 0) & (X > 0)
    if bad.any():
        log.warning("zero intensity with a positive count at %d periods", int(bad.sum()))
        return float("-inf")
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(X > 0, X * np.log(lam), 0.0)
    return float(np.sum(-lam + term - gammaln(X + 1.0)))


def poisson_loglik(params: PoissonParams, X, lam0) -> float:
    """Log-likelihood with lam0 the intensity of X[0]."""
    X = _counts(X)
    lam = np.concatenate([[lam0], filter_lambda(params, X[:-1], lam0)]) if X.size else np.empty(0)
    return loglik_from_intensity(X, lam)


def _intensities_and_sens(theta, X, x_pre, lam_pre):
    """Intensity of each X[t] given the pre-sample (x_pre, lam_pre), plus
    d lam / d (c, gamma, beta)."""
    c, g, b = theta
    Xlag = np.concatenate([[x_pre], X[:-1]])
    a = [1.0, -b]
    lam, _ = lfilter([1.0], a, c + g * Xlag, zi=[b * lam_pre])
    lam_lag = np.concatenate([[lam_pre], lam[:-1]])
    D = lfilter([1.0], a, np.column_stack([np.ones_like(lam), Xlag, lam_lag]), axis=0)
    return lam, D


@dataclass
class PoissonFit:
    params: PoissonParams
    std_errors: np.ndarray
    loglik: float
    lam0: float
    n_obs: int
    iterations: int
    grad_norm: float
    converged: bool
    lam: np.ndarray = field(repr=False, default=None)

    def within(self, truth: PoissonParams, k=3.0):
        d = np.abs(self.params.as_array() - truth.as_array())
        return d <= k * self.std_errors

    def to_dict(self):
        d = self.params.to_dict()
        d.update({"se": dict(zip(("c_bar", "gamma_bar", "beta"), map(float, self.std_errors))),
                  "loglik": self.loglik, "lam0": self.lam0, "n_obs": self.n_obs,
                  "iterations": self.iterations, "grad_norm": self.grad_norm, "converged": self.converged})
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def poisson_score(theta, X, lam0):
    """Log-likelihood and score in (c, gamma, beta), pre-sample X_{-1} = lam_{-1} = lam0."""
    X = _counts(X).astype(float)
    lam, D = _intensities_and_sens(np.asarray(theta, float), X, lam0, lam0)
    ll = loglik_from_intensity(X, lam)
    return ll, D.T @ (X / lam - 1.0)


def fit_poisson_mle(X, n_starts=3, seed=0, min_T=20, restrict=None, gtol=1e-10) -> PoissonFit:
    """Conditional MLE.  The pre-sample count and intensity are both fixed at
    the sample mean of X, so every observation enters the likelihood.

    ``restrict="iid"`` imposes gamma = beta = 0 (then c-hat is the sample mean).
    """
    X = _counts(X).astype(float)
    if X.size < min_T:
        raise ShapeMismatch(f"need at least {min_T} counts")
    if not X.any():
        raise ValueError("all counts are zero: intensity is not identified")
    lam0 = float(X.mean())
    if restrict == "iid":
        c = lam0
        ll = loglik_from_intensity(X, np.full(X.size, c))
        se = np.array([np.sqrt(c / X.size), np.nan, np.nan])
        return PoissonFit(PoissonParams(c, 0.0, 0.0), se, ll, lam0, X.size, 0, 0.0, True, np.full(X.size, c))

    tr = PositiveThenSimplex(3)
    n = X.size

    def fun(z):
        th, J = tr.forward(z)
        ll, g = poisson_score(th, X, lam0)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(z)
        return -ll / n, -(J.T @ g) / n

    rng = np.random.default_rng(seed)
    base = tr.inverse([lam0 * 0.3, 0.2, 0.5])
    best = None
    for j in range(n_starts):
        z0 = base if j == 0 else base + rng.normal(0, 1.0, 3)
        with np.errstate(all="ignore"):
            res = optimize.minimize(fun, z0, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": 2000})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise NoConvergence("Poisson likelihood was not finite at any start")
    th = tr.forward(best.x)[0]
    ll, g = poisson_score(th, X, lam0)
    gz = tr.forward(best.x)[1].T @ g
    gnorm = float(np.linalg.norm(gz) / n)
    if not (best.success or gnorm < 1e-6):
        raise NoConvergence(f"Poisson MLE did not converge: {best.message}", iterations=int(best.nit))
    H = _numerical_hessian(lambda t: poisson_score(t, X, lam0)[1], th)
    try:
        cov = np.linalg.inv(-H)
        se = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
    except np.linalg.LinAlgError:
        se = np.full(3, np.nan)
    params = PoissonParams(float(th[0]), float(th[1]), float(th[2]))
    lam = _intensities_and_sens(th, X, lam0, lam0)[0]
    return PoissonFit(params, se, ll, lam0, n, int(best.nit), gnorm, True, lam)


def _numerical_hessian(grad, x, rel=1e-5):
    x = np.asarray(x, float)
    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        h = rel * max(abs(x[j]), 1e-3)
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (grad(x + e) - grad(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def simulate_poisson_ar(params: PoissonParams, T: int, seed: int = 0, burn_in: int = 500) -> CountSeries:
    """Draw X_t ~ Poisson(lam_t) from the linear recursion, started at the mean."""
    rng = np.random.default_rng(seed)
    lam = params.mean if params.stationary else params.c_bar
    X = np.empty(T + burn_in, dtype=np.int64)
    L = np.empty(T + burn_in)
    for t in range(T + burn_in):
        L[t] = lam
        X[t] = rng.poisson(lam)
        lam = params.c_bar + params.gamma_bar * X[t] + params.beta * lam
    return CountSeries(X[burn_in:], L[burn_in:], float(L[burn_in]))


def calibrate_binary_from_poisson(params: PoissonParams, N: int) -> ModelSpec:
    """Homogeneous interactive spec with omega = c/N, alpha = 0, gamma, beta."""
    if N < 1:
        raise ValueError("N must be >= 1")
    spec = ModelSpec.interactive(params.c_bar / N, 0.0, params.gamma_bar, params.beta, n_series=N)
    return require_valid(spec)
