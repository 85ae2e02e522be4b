"""Binary GAB likelihood, analytic score, Fisher information and MLE.

Each family is reduced to one or more independent *units*.  A unit has a
driver recursion

    s_t = z_t' b + sum_tau beta_tau s_{t-tau},     p_t = link(s_t),

where z_t holds the lagged regressors (constant, own outcome lags and the
cross-sectional or network average), and contributes
k_t log p_t + (m - k_t) log(1 - p_t) to the log-likelihood.  Per-series
families give one unit per series with m = 1; the exchangeable family
collapses to a single unit with k_t = X_t and m = N.  The recursion and its
parameter sensitivities are all linear filters, evaluated with
``scipy.signal.lfilter``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import optimize
from scipy.signal import lfilter, lfiltic
from scipy.special import expit, logit

from .errors import NoConvergence, ShapeMismatch, SingularInformation, UnsupportedFamily
from .model import Family, ModelSpec, PanelState, eval_g, require_valid
from .transforms import IdentityTransform, SimplexTransform

log = logging.getLogger(__name__)

EPS = 1e-10
SINGULAR_TOL = 1e-12
FAMILIES = ("constant", "linear", "logit11", "exchangeable", "interactive", "network")


@dataclass(frozen=True)
class BinaryFamily:
    """Estimable family.  ``use_alpha=False`` drops the own-lag term (the
    interactive model with alpha_i = 0)."""

    name: str
    n_series: int
    s: int = 1
    q: int = 1
    use_alpha: bool = True
    W: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.name not in FAMILIES:
            raise UnsupportedFamily(f"unknown estimable family {self.name!r}")
        if self.name == "constant":
            object.__setattr__(self, "s", 0)
            object.__setattr__(self, "q", 0)
        elif self.name != "linear":
            if (self.s, self.q) != (1, 1):
                raise ShapeMismatch(f"{self.name} family is defined for s = q = 1")
        if self.name == "network":
            if self.W is None or np.shape(self.W) != (self.n_series, self.n_series):
                raise ShapeMismatch("network family needs an N x N weight matrix")

    @property
    def separable(self):
        return self.name != "exchangeable"

    @property
    def unit_labels(self):
        n = self.name
        if n == "constant":
            return ["omega"]
        if n == "linear":
            return (["omega"] + [f"alpha{t + 1}" for t in range(self.q)]
                    + [f"beta{t + 1}" for t in range(self.s)])
        if n == "logit11":
            return ["omega", "alpha", "beta"]
        if n == "exchangeable":
            return ["omega", "gamma", "beta"]
        return ["omega"] + (["alpha"] if self.use_alpha else []) + ["gamma", "beta"]

    @property
    def labels(self):
        if not self.separable:
            return list(self.unit_labels)
        return [f"{lab}[{i}]" for i in range(self.n_series) for lab in self.unit_labels]

    @property
    def n_lin(self):
        return len(self.unit_labels) - self.s

    def transform(self):
        k = len(self.unit_labels)
        return IdentityTransform(k) if self.name == "logit11" else SimplexTransform(k)

    def to_dict(self):
        return {"name": self.name, "n_series": self.n_series, "s": self.s, "q": self.q,
                "use_alpha": self.use_alpha, "W": None if self.W is None else np.asarray(self.W).tolist()}


@dataclass
class _Unit:
    Z: np.ndarray  # (T_eff, n_lin)
    k: np.ndarray  # (T_eff,)
    m: float
    s_init: np.ndarray  # driver values s_{-1}, s_{-2}, ...
    logistic: bool


def _as_panel(y):
    y = np.asarray(y, float)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2:
        raise ShapeMismatch("y panel must be (N, T)")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("y panel must be binary")
    return y


def initial_probabilities(fam: BinaryFamily, y, init_policy="sample_mean"):
    """Per-series starting probability for the filter."""
    y = _as_panel(y)
    if isinstance(init_policy, str):
        if init_policy != "sample_mean":
            raise ValueError(f"unknown init policy {init_policy!r}")
        if fam.name == "exchangeable":
            return np.full(y.shape[0], y.mean())
        return y.mean(axis=1)
    return np.broadcast_to(np.asarray(init_policy, float), (y.shape[0],)).copy()


def _build_units(fam: BinaryFamily, y, p_init):
    y = _as_panel(y)
    N, T = y.shape
    if N != fam.n_series:
        raise ShapeMismatch(f"panel has {N} series, family expects {fam.n_series}")
    q, s = fam.q, fam.s
    if T <= q:
        raise ShapeMismatch(f"need more than q={q} observations")
    span = slice(q, T)
    T_eff = T - q
    one = np.ones(T_eff)
    lag = lambda arr, tau: arr[..., q - tau: T - tau]
    logistic = fam.name == "logit11"

    def drv_init(p):
        p = np.full(s, p)
        return logit(np.clip(p, EPS, 1 - EPS)) if logistic else p

    if fam.name == "exchangeable":
        X = y.sum(axis=0)
        ybar = y.mean(axis=0)
        Z = np.column_stack([one, lag(ybar, 1)])
        return [_Unit(Z, X[span], float(N), drv_init(p_init[0]), False)]
    if fam.name in ("interactive", "network"):
        agg = y.mean(axis=0)[None, :].repeat(N, 0) if fam.name == "interactive" else np.asarray(fam.W) @ y
    units = []
    for i in range(N):
        cols = [one]
        if fam.name in ("linear", "logit11") or (fam.name in ("interactive", "network") and fam.use_alpha):
            cols += [lag(y[i], tau) for tau in range(1, q + 1)]
        if fam.name in ("interactive", "network"):
            cols.append(lag(agg[i], 1))
        units.append(_Unit(np.column_stack(cols), y[i, span], 1.0, drv_init(p_init[i]), logistic))
    return units


def _unit_eval(u: _Unit, theta, eps=EPS, derivs=True):
    n_lin = u.Z.shape[1]
    b, beta = theta[:n_lin], theta[n_lin:]
    s = beta.size
    c = u.Z @ b
    if s:
        a = np.concatenate([[1.0], -beta])
        drv, _ = lfilter([1.0], a, c, zi=lfiltic([1.0], a, u.s_init))
    else:
        drv = c
    p = expit(drv) if u.logistic else drv
    pc = np.clip(p, eps, 1.0 - eps)
    clipped = (p < eps) | (p > 1.0 - eps)
    m, k = u.m, u.k
    ll = float(np.sum(k * np.log(pc) + (m - k) * np.log1p(-pc)))
    out = {"ll": ll, "p": p, "clips": int(clipped.sum())}
    if not derivs:
        return out
    T_eff = c.size
    dS = np.empty((T_eff, n_lin + s))
    if s:
        dS[:, :n_lin] = lfilter([1.0], a, u.Z, axis=0)
        full = np.concatenate([u.s_init[::-1], drv])
        lagged = np.column_stack([full[s - tau: s - tau + T_eff] for tau in range(1, s + 1)])
        dS[:, n_lin:] = lfilter([1.0], a, lagged, axis=0)
    else:
        dS[:] = u.Z
    dp = dS * (p * (1.0 - p))[:, None] if u.logistic else dS
    dp[clipped] = 0.0
    w = k / pc - (m - k) / (1.0 - pc)
    out["per_t_score"] = dp * w[:, None]
    out["score"] = out["per_t_score"].sum(axis=0)
    out["info"] = (dp * (m / (pc * (1.0 - pc)))[:, None]).T @ dp
    return out


def _split_theta(fam, theta):
    theta = np.asarray(theta, float)
    k = len(fam.unit_labels)
    n_units = fam.n_series if fam.separable else 1
    if theta.size != k * n_units:
        raise ShapeMismatch(f"theta has {theta.size} entries, layout needs {k * n_units}")
    return theta.reshape(n_units, k)


def _evaluate(fam, theta, y, init_policy="sample_mean", derivs=True, eps=EPS):
    y = _as_panel(y)
    units = _build_units(fam, y, initial_probabilities(fam, y, init_policy))
    blocks = _split_theta(fam, theta)
    res = [_unit_eval(u, th, eps, derivs) for u, th in zip(units, blocks)]
    out = {"ll": sum(r["ll"] for r in res), "clips": sum(r["clips"] for r in res),
           "T": units[0].k.size, "p": np.array([r["p"] for r in res])}
    if derivs:
        out["score"] = np.concatenate([r["score"] for r in res])
        out["per_t_score"] = np.concatenate([r["per_t_score"] for r in res], axis=1)
        dim = out["score"].size
        info = np.zeros((dim, dim))
        k = blocks.shape[1]
        for j, r in enumerate(res):
            info[j * k:(j + 1) * k, j * k:(j + 1) * k] = r["info"]
        out["info"] = info
    return out


def loglik(fam: BinaryFamily, theta, y_panel, init_policy="sample_mean", eps=EPS, return_clips=False):
    r = _evaluate(fam, theta, y_panel, init_policy, derivs=False, eps=eps)
    if r["clips"]:
        log.debug("probability floor hit %d times", r["clips"])
    return (r["ll"], r["clips"]) if return_clips else r["ll"]


def score(fam: BinaryFamily, theta, y_panel, init_policy="sample_mean", eps=EPS):
    return _evaluate(fam, theta, y_panel, init_policy, eps=eps)["score"]


def fisher_info(fam: BinaryFamily, theta, y_panel, init_policy="sample_mean", eps=EPS, check=True):
    """(1/T) sum_t sum_i (dg dg') / (g (1 - g)) along the filtered path."""
    r = _evaluate(fam, theta, y_panel, init_policy, eps=eps)
    H = r["info"] / r["T"]
    H = 0.5 * (H + H.T)
    if check:
        lo = float(np.linalg.eigvalsh(H).min())
        if lo < SINGULAR_TOL:
            raise SingularInformation(lo)
    return H


def outer_product_of_scores(fam: BinaryFamily, theta, y_panel, init_policy="sample_mean"):
    r = _evaluate(fam, theta, y_panel, init_policy)
    S = r["per_t_score"]  # units own disjoint columns, so each row is the period-t score
    return S.T @ S / r["T"]


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


@dataclass
class FitConfig:
    n_starts: int = 5
    seed: int = 0
    gtol: float = 1e-9
    maxiter: int = 2000
    min_T: int = 10
    eps: float = EPS
    separable: bool = True
    init_policy: Union[str, float] = "sample_mean"
    threads: int = 1


@dataclass
class FitResult:
    family: BinaryFamily
    theta: np.ndarray
    labels: list
    loglik: float
    fisher: np.ndarray
    std_errors: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool
    clip_count: int
    n_obs: int
    p_init: np.ndarray
    starts_tried: int = 0
    singular: bool = False
    extra: dict = field(default_factory=dict)

    def params(self):
        return dict(zip(self.labels, self.theta))

    def unit_params(self):
        return _split_theta(self.family, self.theta)

    def to_spec(self) -> ModelSpec:
        return family_spec(self.family, self.theta)

    def to_dict(self):
        return {
            "family": self.family.to_dict(),
            "labels": list(self.labels),
            "theta": self.theta.tolist(),
            "std_errors": [None if not np.isfinite(v) else float(v) for v in self.std_errors],
            "loglik": self.loglik,
            "n_obs": self.n_obs,
            "clip_count": self.clip_count,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "singular_information": self.singular,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def family_spec(fam: BinaryFamily, theta) -> ModelSpec:
    """ModelSpec equivalent of an estimated parameter vector."""
    B = _split_theta(fam, theta)
    N = fam.n_series
    if fam.name == "constant":
        return ModelSpec.linear(B[:, 0], 0.0, 0.0, n_series=N)
    if fam.name == "linear":
        return ModelSpec.linear_multilag(B[:, 0], B[:, 1:1 + fam.q], B[:, 1 + fam.q:], n_series=N)
    if fam.name == "logit11":
        return ModelSpec.logit11(B[:, 0], B[:, 1], B[:, 2], n_series=N)
    if fam.name == "exchangeable":
        return ModelSpec.exchangeable(*B[0], n_series=N)
    alpha = B[:, 1] if fam.use_alpha else np.zeros(N)
    gamma, beta = B[:, -2], B[:, -1]
    if fam.name == "interactive":
        return ModelSpec.interactive(B[:, 0], alpha, gamma, beta, n_series=N)
    return ModelSpec.network_model(B[:, 0], alpha, gamma, beta, fam.W)


def _start_point(fam, unit: _Unit):
    """Moment-based start: modest persistence, intercept matched to the mean."""
    mean = float(np.clip(unit.k.sum() / (unit.m * unit.k.size), 0.01, 0.99))
    labels = fam.unit_labels
    x = np.zeros(len(labels))
    if fam.name == "logit11":
        x[:] = [logit(mean) * 0.5, 0.1, 0.5]
        return x
    for j, lab in enumerate(labels):
        if lab.startswith("beta"):
            x[j] = 0.4 / max(fam.s, 1)
        elif lab.startswith("alpha") or lab == "gamma":
            x[j] = 0.1 / max(fam.q, 1) if lab.startswith("alpha") else 0.1
    x[0] = mean * (1.0 - x[1:].sum())
    return x


def _minimize_units(units, fam, z0_list, cfg):
    """Minimize the summed negative log-likelihood over a list of units
    whose parameter blocks are concatenated."""
    tr = fam.transform()
    k = tr.k
    n_obs = units[0].k.size * sum(u.m for u in units)

    def fun(zflat):
        Z = zflat.reshape(len(units), k)
        f, g = 0.0, np.empty_like(Z)
        for j, (u, z) in enumerate(zip(units, Z)):
            th, J = tr.forward(z)
            r = _unit_eval(u, th, cfg.eps)
            f -= r["ll"]
            g[j] = -(J.T @ r["score"])
        return f / n_obs, g.ravel() / n_obs

    z0 = np.concatenate(z0_list)
    with np.errstate(all="ignore"):
        res = optimize.minimize(fun, z0, jac=True, method="BFGS",
                                options={"gtol": cfg.gtol, "maxiter": cfg.maxiter})
    return res


def _fit_group(units, fam, cfg, group_id):
    tr = fam.transform()
    rng = np.random.default_rng([cfg.seed, group_id])
    base = np.concatenate([tr.inverse(_start_point(fam, u)) for u in units])
    best, tried = None, 0
    for j in range(cfg.n_starts):
        z0 = base if j == 0 else base + rng.normal(0.0, 1.0, base.size)
        tried += 1
        res = _minimize_units(units, fam, [z0], cfg)
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun - 1e-13:
            best = res
    if best is None:
        raise NoConvergence("every start produced a non-finite objective", iterations=tried)
    gnorm = float(np.linalg.norm(best.jac))
    ok = bool(best.success or gnorm <= 1e-6)
    if not ok:
        raise NoConvergence(f"no start converged (best gradient norm {gnorm:.3g}: {best.message})",
                            iterations=int(best.nit))
    thetas = [tr.forward(z)[0] for z in best.x.reshape(len(units), tr.k)]
    return thetas, int(best.nit), tried


def fit_mle(fam: BinaryFamily, y_panel, cfg: Optional[FitConfig] = None) -> FitResult:
    cfg = cfg or FitConfig()
    y = _as_panel(y_panel)
    if y.shape[1] < cfg.min_T:
        raise ShapeMismatch(f"need at least {cfg.min_T} observations, got {y.shape[1]}")
    p0 = initial_probabilities(fam, y, cfg.init_policy)
    units = _build_units(fam, y, p0)
    if fam.separable and cfg.separable:
        groups = [[u] for u in units]
    else:
        groups = [units]

    def run(args):
        j, g = args
        return _fit_group(g, fam, cfg, j)

    if cfg.threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            parts = list(ex.map(run, enumerate(groups)))
    else:
        parts = [run(a) for a in enumerate(groups)]
    theta = np.concatenate([np.concatenate(t) for t, _, _ in parts])
    iters = sum(n for _, n, _ in parts)
    tried = sum(n for _, _, n in parts)

    ev = _evaluate(fam, theta, y, cfg.init_policy, eps=cfg.eps)
    T = ev["T"]
    H = 0.5 * (ev["info"] + ev["info"].T) / T
    lo = float(np.linalg.eigvalsh(H).min())
    singular = lo < SINGULAR_TOL
    se = np.full(theta.size, np.nan) if singular else np.sqrt(np.diag(np.linalg.inv(H)) / T)
    # first-order check in unconstrained coordinates
    tr = fam.transform()
    Jblocks = [tr.forward(tr.inverse(th))[1] for th in _split_theta(fam, theta)]
    gz = np.concatenate([J.T @ g for J, g in zip(Jblocks, _split_theta(fam, ev["score"]))])
    return FitResult(fam, theta, fam.labels, ev["ll"], H, se, iters, float(np.linalg.norm(gz) / T),
                     True, ev["clips"], T, p0, tried, singular)


# --------------------------------------------------------------------------
# forecasting
# --------------------------------------------------------------------------


def forecast_from_spec(spec: ModelSpec, y_history, p_init, q=None):
    """One-step-ahead probabilities along realized outcomes.

    Column t of the result is the forecast of y[:, t] made at t-1; the first
    max(s,q) columns have no forecast and are NaN.
    """
    require_valid(spec)
    y = _as_panel(y_history)
    N, T = y.shape
    s, qq = spec.s, spec.q
    start = max(qq, s) if q is None else q
    ph = np.tile(np.broadcast_to(np.asarray(p_init, float), (N,)), (s, 1))
    yh = np.stack([y[:, start - tau] for tau in range(1, qq + 1)]) if start >= qq else None
    if yh is None:
        raise ShapeMismatch("history too short for the outcome lags")
    out = np.full((N, T), np.nan)
    for t in range(start, T):
        p = eval_g(spec, PanelState(ph, yh))
        out[:, t] = p
        ph = np.concatenate([p[None], ph[:-1]])
        yh = np.concatenate([y[None, :, t], yh[:-1]])
    return out


def forecast_one_step(fitted: Union[FitResult, ModelSpec], y_history, p_init=None):
    """Forecast panel (N, T) for a fitted model or an explicit spec."""
    if isinstance(fitted, FitResult):
        fam = fitted.family
        if fam.name == "constant":
            y = _as_panel(y_history)
            return np.repeat(fitted.unit_params()[:, :1], y.shape[1], axis=1)
        spec = fitted.to_spec()
        p0 = fitted.p_init if p_init is None else p_init
        return forecast_from_spec(spec, y_history, p0, q=fam.q)
    if p_init is None:
        p_init = _as_panel(y_history).mean(axis=1)
    return forecast_from_spec(fitted, y_history, p_init)


def persistence_forecast(y_history):
    """Tomorrow equals today: column t holds y[:, t-1]."""
    y = _as_panel(y_history)
    out = np.full(y.shape, np.nan)
    out[:, 1:] = y[:, :-1]
    return out


def constant_forecast(y_history, value=0.05):
    return np.full(_as_panel(y_history).shape, float(value))


@dataclass
class MSEReport:
    per_series: np.ndarray
    pooled: float


def mse_eval(forecasts, realized) -> MSEReport:
    f = np.atleast_2d(np.asarray(forecasts, float))
    r = np.atleast_2d(np.asarray(realized, float))
    if f.shape != r.shape:
        raise ShapeMismatch(f"forecast shape {f.shape} != realized shape {r.shape}")
    if not np.isfinite(f).all():
        raise ValueError("forecasts contain non-finite values; slice to the forecast window")
    e2 = (f - r) ** 2
    return MSEReport(e2.mean(axis=1), float(e2.mean()))
