"""GAB model families: the probability update map, means and contraction checks.

A model is described by an immutable :class:`ModelSpec`.  State is carried in a
:class:`PanelState` holding the last ``s`` probability vectors and the last
``q`` outcome vectors (index 0 is lag 1).  Every function here accepts
arbitrary leading batch axes on the state arrays so the simulator can advance
many replications at once.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import (
    DegenerateMean,
    DomainError,
    NonConvergence,
    ShapeMismatch,
    SpecValidationError,
    UnsupportedFamily,
)

SCHEMA_VERSION = 1
ROW_SUM_TOL = 1e-12
_RANGE_TOL = 1e-12


class Family(str, enum.Enum):
    LinearUnivariate = "LinearUnivariate"
    LinearMultiLag = "LinearMultiLag"
    Logit11 = "Logit11"
    NonlinearScalar = "NonlinearScalar"
    Exchangeable = "Exchangeable"
    Interactive = "Interactive"
    Network = "Network"
    NonlinearInteractive = "NonlinearInteractive"


LINEAR_FAMILIES = frozenset(
    {
        Family.LinearUnivariate,
        Family.LinearMultiLag,
        Family.Exchangeable,
        Family.Interactive,
        Family.Network,
    }
)


# --------------------------------------------------------------------------
# nonlinearity catalog
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CubicNonlinearity:
    """A cubic f(p) on [0, 1] with an exact Lipschitz constant."""

    name: str
    coeffs: tuple

    def __call__(self, p):
        return np.polyval(self.coeffs, p)

    def derivative(self, p):
        return np.polyval(np.polyder(self.coeffs), p)

    @property
    def lipschitz(self) -> float:
        # f' is quadratic: its extreme |values| on [0,1] sit at the ends or the vertex
        d = np.polyder(self.coeffs)
        pts = [0.0, 1.0]
        if len(d) == 3 and d[0] != 0.0:
            v = -d[1] / (2.0 * d[0])
            if 0.0 < v < 1.0:
                pts.append(v)
        return float(max(abs(np.polyval(d, x)) for x in pts))

    def range_on_unit(self) -> tuple:
        d = np.polyder(self.coeffs)
        pts = [0.0, 1.0] + [float(r.real) for r in np.roots(d) if abs(r.imag) < 1e-14 and 0 < r.real < 1]
        vals = [float(np.polyval(self.coeffs, x)) for x in pts]
        return min(vals), max(vals)


SCALAR_CATALOG = {
    # 2p(p - 1/2)^2
    "cubic_small": CubicNonlinearity(
        "cubic_small", tuple(np.polymul([2.0, 0.0], np.polymul([1.0, -0.5], [1.0, -0.5])))
    ),
    # (p + 0.7)(p - 5/6)^2
    "cubic_large": CubicNonlinearity(
        "cubic_large", tuple(np.polymul([1.0, 0.7], np.polymul([1.0, -5.0 / 6.0], [1.0, -5.0 / 6.0])))
    ),
}

# Components of the nonlinear interactive model.  Each entry maps to
# (function, sup over the admissible domain).
F_ALPHA = ("linear", "product")
F_GAMMA_I = ("zero", "linear", "saturating")
F_GAMMA = ("zero", "count_lag1", "count_log1p", "count_saturating")


def f_alpha_eval(kind, y_lags):
    """y_lags: (..., s, N) -> (..., N)."""
    if kind == "linear":
        return y_lags.sum(axis=-2)
    if kind == "product":
        return y_lags.prod(axis=-2)
    raise UnsupportedFamily(f"unknown f_alpha catalog id {kind!r}")


def f_alpha_sup(kind, s):
    return float(s) if kind == "linear" else 1.0


def f_gamma_i_eval(kind, weights, z):
    """weights: (N, 2s); z: (..., 2s) cross-sectional averages -> (..., N)."""
    if kind == "zero":
        return np.zeros(z.shape[:-1] + (weights.shape[0],))
    if kind == "linear":
        return z @ weights.T
    if kind == "saturating":
        return (1.0 - np.exp(-z)) @ weights.T
    raise UnsupportedFamily(f"unknown f_gamma_i catalog id {kind!r}")


def f_gamma_i_sup(kind, weights):
    row = weights.sum(axis=1)
    if kind == "zero":
        return np.zeros(weights.shape[0])
    if kind == "linear":
        return row
    return row * (1.0 - np.exp(-1.0))


def f_gamma_eval(kind, counts, lam=None):
    """Common aggregate term.  ``counts`` holds X_{t-1}, ..., X_{t-s} along the last axis.

    Only the first lag of the count enters the catalog entries; ``lam`` is
    accepted for signature symmetry with the limiting recursion.
    """
    x1 = counts[..., 0]
    if kind == "zero":
        return np.zeros_like(x1, dtype=float)
    if kind == "count_lag1":
        return np.asarray(x1, dtype=float)
    if kind == "count_log1p":
        return np.log1p(x1)
    if kind == "count_saturating":
        return x1 / (1.0 + x1)
    raise UnsupportedFamily(f"unknown f_gamma catalog id {kind!r}")


def f_gamma_sup(kind, n):
    return {"zero": 0.0, "count_lag1": float(n), "count_log1p": float(np.log1p(n)),
            "count_saturating": n / (1.0 + n)}[kind]


# --------------------------------------------------------------------------
# spec
# --------------------------------------------------------------------------

_PARAM_NAMES = {
    Family.LinearUnivariate: ("omega", "alpha", "beta"),
    Family.LinearMultiLag: ("omega", "alpha", "beta"),
    Family.Logit11: ("omega", "alpha", "beta"),
    Family.NonlinearScalar: ("omega", "alpha"),
    Family.Exchangeable: ("omega", "gamma", "beta"),
    Family.Interactive: ("omega", "alpha", "gamma", "beta"),
    Family.Network: ("omega", "alpha", "gamma", "beta"),
    Family.NonlinearInteractive: ("c", "a", "kappa", "beta", "fgi_weight", "gamma"),
}


# per-series parameters: trailing shape after the leading N axis (None = lag count)
_PER_SERIES = {
    Family.LinearUnivariate: {"omega": (), "alpha": (), "beta": ()},
    Family.LinearMultiLag: {"omega": (), "alpha": ("q",), "beta": ("s",)},
    Family.Logit11: {"omega": (), "alpha": (), "beta": ()},
    Family.NonlinearScalar: {"omega": (), "alpha": ()},
    Family.Interactive: {"omega": (), "alpha": (), "gamma": (), "beta": ()},
    Family.Network: {"omega": (), "alpha": (), "gamma": (), "beta": ()},
    Family.NonlinearInteractive: {"c": (), "a": (), "gamma": (), "fgi_weight": ("2s",)},
}


def _broadcast_params(family, n, s, q, params):
    """Expand scalars (and per-lag rows) to the full per-series shape."""
    dims = {"q": q, "s": s, "2s": 2 * s}
    out = dict(params)
    for name, tail in _PER_SERIES.get(family, {}).items():
        if name not in out:
            continue
        v = np.asarray(out[name], float)
        shape = (n,) + tuple(dims[t] for t in tail)
        if v.shape != shape and v.ndim <= len(shape):
            try:
                v = np.broadcast_to(v, shape)
            except ValueError:
                pass  # left for validation to report
        out[name] = v
    return out


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelSpec:
    family: Family
    n_series: int
    s: int = 1
    q: int = 1
    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    nonlinearity: Any = None
    network: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "params", {k: _frozen(v) for k, v in self.params.items()})
        if self.network is not None:
            object.__setattr__(self, "network", _frozen(self.network))
            W = self.network
            if W.ndim == 2 and W.shape[0] >= 64 and np.count_nonzero(W) <= 0.25 * W.size:
                object.__setattr__(self, "_w_sparse", sparse.csr_matrix(W))
        if isinstance(self.nonlinearity, Mapping):
            object.__setattr__(self, "nonlinearity", dict(self.nonlinearity))
        expected = set(_PARAM_NAMES[self.family])
        if set(self.params) != expected:
            raise ShapeMismatch(f"{self.family.value} needs params {sorted(expected)}, got {sorted(self.params)}")

    def __getitem__(self, name):
        return self.params[name]

    @property
    def max_lag(self) -> int:
        return max(self.s, self.q)

    # ---- constructors -----------------------------------------------------

    @classmethod
    def linear(cls, omega, alpha, beta, n_series=1):
        b = lambda v: np.broadcast_to(np.asarray(v, float), (n_series,))
        return cls(Family.LinearUnivariate, n_series, 1, 1, {"omega": b(omega), "alpha": b(alpha), "beta": b(beta)})

    @classmethod
    def linear_multilag(cls, omega, alpha, beta, n_series=1):
        """``alpha`` holds q outcome-lag coefficients, ``beta`` s probability-lag ones."""
        alpha = np.atleast_1d(np.asarray(alpha, float))
        beta = np.atleast_1d(np.asarray(beta, float))
        if alpha.ndim == 1:
            alpha = np.broadcast_to(alpha, (n_series, alpha.size))
        if beta.ndim == 1:
            beta = np.broadcast_to(beta, (n_series, beta.size))
        omega = np.broadcast_to(np.asarray(omega, float), (n_series,))
        return cls(Family.LinearMultiLag, n_series, beta.shape[1], alpha.shape[1],
                   {"omega": omega, "alpha": alpha, "beta": beta})

    @classmethod
    def logit11(cls, omega, alpha, beta, n_series=1):
        b = lambda v: np.broadcast_to(np.asarray(v, float), (n_series,))
        return cls(Family.Logit11, n_series, 1, 1, {"omega": b(omega), "alpha": b(alpha), "beta": b(beta)})

    @classmethod
    def nonlinear_scalar(cls, omega, alpha, f="cubic_small", n_series=1):
        b = lambda v: np.broadcast_to(np.asarray(v, float), (n_series,))
        return cls(Family.NonlinearScalar, n_series, 1, 1, {"omega": b(omega), "alpha": b(alpha)}, nonlinearity=f)

    @classmethod
    def exchangeable(cls, omega, gamma, beta, n_series):
        return cls(Family.Exchangeable, n_series, 1, 1, {"omega": omega, "gamma": gamma, "beta": beta})

    @classmethod
    def interactive(cls, omega, alpha, gamma, beta, n_series):
        b = lambda v: np.broadcast_to(np.asarray(v, float), (n_series,))
        return cls(Family.Interactive, n_series, 1, 1,
                   {"omega": b(omega), "alpha": b(alpha), "gamma": b(gamma), "beta": b(beta)})

    @classmethod
    def network_model(cls, omega, alpha, gamma, beta, W):
        W = np.asarray(W, float)
        n = W.shape[0]
        b = lambda v: np.broadcast_to(np.asarray(v, float), (n,))
        return cls(Family.Network, n, 1, 1,
                   {"omega": b(omega), "alpha": b(alpha), "gamma": b(gamma), "beta": b(beta)}, network=W)

    @classmethod
    def nonlinear_interactive(cls, c, a, kappa, beta, gamma, n_series, fgi_weight=None,
                              f_alpha="linear", f_gamma_i="zero", f_gamma="count_lag1"):
        beta = np.atleast_1d(np.asarray(beta, float))
        s = beta.size
        b = lambda v: np.broadcast_to(np.asarray(v, float), (n_series,))
        if fgi_weight is None:
            fgi_weight = np.zeros((n_series, 2 * s))
        fgi_weight = np.broadcast_to(np.asarray(fgi_weight, float), (n_series, 2 * s))
        return cls(Family.NonlinearInteractive, n_series, s, s,
                   {"c": b(c), "a": b(a), "kappa": kappa, "beta": beta, "fgi_weight": fgi_weight, "gamma": b(gamma)},
                   nonlinearity={"f_alpha": f_alpha, "f_gamma_i": f_gamma_i, "f_gamma": f_gamma})

    # ---- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "family": self.family.value,
            "n_series": int(self.n_series),
            "lags": {"s": int(self.s), "q": int(self.q)},
            "params": {k: v.tolist() for k, v in self.params.items()},
            "nonlinearity": self.nonlinearity,
            "network": None if self.network is None else self.network.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported ModelSpec schema_version {version}")
        lags = d.get("lags", {"s": 1, "q": 1})
        network = d.get("network")
        if isinstance(network, str):
            network = load_network_csv(network)
        family, n = Family(d["family"]), int(d["n_series"])
        s, q = int(lags.get("s", 1)), int(lags.get("q", 1))
        params = _broadcast_params(family, n, s, q, d["params"])
        return cls(family, n, s, q, params, d.get("nonlinearity"), network)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, ModelSpec) and self.to_json() == other.to_json()

    __hash__ = None


def load_network_csv(path) -> np.ndarray:
    """N rows of N comma-separated weights."""
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    W = np.array(rows, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ShapeMismatch(f"network matrix in {path} is not square: shape {W.shape}")
    return W


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    def add(self, name, passed, detail=""):
        self.checks.append((name, bool(passed), detail))

    @property
    def ok(self) -> bool:
        return all(p for _, p, _ in self.checks)

    def failures(self):
        return [f"{n}: {d}" for n, p, d in self.checks if not p]

    def __bool__(self):
        return self.ok


def validate_spec(spec: ModelSpec) -> ValidationReport:
    rep = ValidationReport()
    fam, n = spec.family, spec.n_series
    rep.add("n_series", n >= 1, f"n_series={n}")
    rep.add("lags", spec.s >= 1 and spec.q >= 1, f"s={spec.s}, q={spec.q}")
    P = spec.params

    def shape(name, shp):
        ok = P[name].shape == shp
        rep.add(f"shape:{name}", ok, f"expected {shp}, got {P[name].shape}")
        return ok

    if fam in (Family.LinearUnivariate, Family.Logit11):
        if all(shape(k, (n,)) for k in ("omega", "alpha", "beta")) and fam is Family.LinearUnivariate:
            _check_simplex(rep, [P["omega"], P["alpha"], P["beta"]])
        if fam is Family.Logit11:
            rep.add("finite", all(np.isfinite(P[k]).all() for k in P), "parameters must be finite")
    elif fam is Family.LinearMultiLag:
        if shape("omega", (n,)) and shape("alpha", (n, spec.q)) and shape("beta", (n, spec.s)):
            _check_simplex(rep, [P["omega"], P["alpha"].sum(1), P["beta"].sum(1)],
                           nonneg=[P["omega"], P["alpha"], P["beta"]])
    elif fam is Family.Exchangeable:
        if all(shape(k, ()) for k in ("omega", "gamma", "beta")):
            _check_simplex(rep, [P["omega"], P["gamma"], P["beta"]])
    elif fam in (Family.Interactive, Family.Network):
        if all(shape(k, (n,)) for k in ("omega", "alpha", "gamma", "beta")):
            _check_simplex(rep, [P["omega"], P["alpha"], P["gamma"], P["beta"]])
        if fam is Family.Network:
            W = spec.network
            if W is None or W.shape != (n, n):
                rep.add("network", False, f"need an {n}x{n} weight matrix")
            else:
                rep.add("network:nonnegative", (W >= 0).all(), "negative weight")
                dev = np.abs(W.sum(axis=1) - 1.0)
                rep.add("network:row_stochastic", (dev <= ROW_SUM_TOL).all(),
                        f"row sums deviate from 1 by up to {dev.max():.3g}")
    elif fam is Family.NonlinearScalar:
        f = SCALAR_CATALOG.get(spec.nonlinearity)
        rep.add("nonlinearity", f is not None, f"unknown catalog id {spec.nonlinearity!r}")
        if f is not None and shape("omega", (n,)) and shape("alpha", (n,)):
            grid = np.linspace(0.0, 1.0, 10001)
            fg = f(grid)
            lo = np.minimum(P["omega"], P["omega"] + P["alpha"])[:, None] + fg[None, :]
            hi = np.maximum(P["omega"], P["omega"] + P["alpha"])[:, None] + fg[None, :]
            rep.add("range_grid", lo.min() >= -_RANGE_TOL and hi.max() <= 1 + _RANGE_TOL,
                    f"g ranges over [{lo.min():.4g}, {hi.max():.4g}] on the grid")
    elif fam is Family.NonlinearInteractive:
        _validate_nonlinear_interactive(spec, rep)
    return rep


def _check_simplex(rep, parts, nonneg=None):
    nonneg = parts if nonneg is None else nonneg
    rep.add("nonnegative", all((np.asarray(x) >= 0).all() for x in nonneg), "coefficients must be >= 0")
    total = np.sum([np.asarray(x, float) for x in parts], axis=0)
    worst = float(np.max(total))
    rep.add("sum_le_one", worst <= 1.0 + 1e-12, f"coefficient sum {worst:.6g} > 1")


def _validate_nonlinear_interactive(spec, rep):
    P, n, s = spec.params, spec.n_series, spec.s
    nl = spec.nonlinearity or {}
    ok_ids = (nl.get("f_alpha") in F_ALPHA and nl.get("f_gamma_i") in F_GAMMA_I and nl.get("f_gamma") in F_GAMMA)
    rep.add("nonlinearity", ok_ids, f"unknown catalog ids {nl!r}")
    rep.add("lags", spec.s == spec.q, "nonlinear interactive model uses s == q")
    shapes = {"c": (n,), "a": (n,), "kappa": (), "beta": (s,), "fgi_weight": (n, 2 * s), "gamma": (n,)}
    good = True
    for k, shp in shapes.items():
        good &= P[k].shape == shp
        rep.add(f"shape:{k}", P[k].shape == shp, f"expected {shp}, got {P[k].shape}")
    if not (ok_ids and good):
        return
    rep.add("nonnegative", all((P[k] >= 0).all() for k in ("c", "a", "beta", "fgi_weight", "gamma")),
            "coefficients must be >= 0")
    rep.add("kappa", float(P["kappa"]) > 0, "kappa must be positive")
    bound = (P["c"] / n + P["a"] * n ** (-float(P["kappa"])) * f_alpha_sup(nl["f_alpha"], s)
             + P["beta"].sum() + f_gamma_i_sup(nl["f_gamma_i"], P["fgi_weight"])
             + P["gamma"] * f_gamma_sup(nl["f_gamma"], n) / n)
    rep.add("sum_le_one", bound.max() <= 1.0 + 1e-12, f"worst-case probability bound {bound.max():.6g} > 1")


def require_valid(spec: ModelSpec) -> ModelSpec:
    rep = validate_spec(spec)
    if not rep.ok:
        raise SpecValidationError(rep)
    return spec


# --------------------------------------------------------------------------
# state and update map
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PanelState:
    """p_hist: (..., s, N) in [0,1]; y_hist: (..., q, N) in {0,1}; index 0 is lag 1."""

    p_hist: np.ndarray
    y_hist: np.ndarray

    @classmethod
    def constant(cls, spec, p, y=0.0):
        N = spec.n_series
        ph = np.broadcast_to(np.asarray(p, float), (N,))
        yh = np.broadcast_to(np.asarray(y, float), (N,))
        return cls(np.tile(ph, (spec.s, 1)), np.tile(yh, (spec.q, 1)))

    def advance(self, p_new, y_new):
        ph = np.concatenate([p_new[..., None, :], self.p_hist[..., :-1, :]], axis=-2)
        yh = np.concatenate([y_new[..., None, :], self.y_hist[..., :-1, :]], axis=-2)
        return PanelState(ph, yh)


def _logit_update(omega, alpha, beta, p1, y1):
    # x_t = omega + alpha*y + beta*logit(p); absorbing boundaries propagate exactly
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.log(p1) - np.log1p(-p1)
        bx = np.where(beta == 0.0, 0.0, beta * lg)
    return expit(omega + alpha * y1 + bx)


def eval_g(spec: ModelSpec, state: PanelState) -> np.ndarray:
    """Next-period success probabilities for every series."""
    P, fam = spec.params, spec.family
    ph = np.asarray(state.p_hist, float)
    yh = np.asarray(state.y_hist, float)
    if ph.shape[-2:] != (spec.s, spec.n_series) or yh.shape[-2:] != (spec.q, spec.n_series):
        raise ShapeMismatch(f"state rings have shapes {ph.shape}, {yh.shape}; "
                            f"need (..., {spec.s}, {spec.n_series}) and (..., {spec.q}, {spec.n_series})")
    p1, y1 = ph[..., 0, :], yh[..., 0, :]

    if fam is Family.LinearUnivariate:
        out = P["omega"] + P["alpha"] * y1 + P["beta"] * p1
    elif fam is Family.LinearMultiLag:
        out = (P["omega"] + np.einsum("...tn,nt->...n", yh, P["alpha"])
               + np.einsum("...tn,nt->...n", ph, P["beta"]))
    elif fam is Family.Logit11:
        with np.errstate(over="ignore"):
            out = _logit_update(P["omega"], P["alpha"], P["beta"], p1, y1)
    elif fam is Family.NonlinearScalar:
        f = SCALAR_CATALOG[spec.nonlinearity]
        out = P["omega"] + P["alpha"] * y1 + f(p1)
        if out.min() < -_RANGE_TOL or out.max() > 1 + _RANGE_TOL:
            raise DomainError(f"{spec.nonlinearity} update left [0,1]: range [{out.min()}, {out.max()}]")
    elif fam is Family.Exchangeable:
        ybar = y1.mean(axis=-1, keepdims=True)
        out = P["omega"] + P["gamma"] * ybar + P["beta"] * p1
    elif fam is Family.Interactive:
        ybar = y1.mean(axis=-1, keepdims=True)
        out = P["omega"] + P["alpha"] * y1 + P["gamma"] * ybar + P["beta"] * p1
    elif fam is Family.Network:
        wy = network_product(spec, y1)
        out = P["omega"] + P["alpha"] * y1 + P["gamma"] * wy + P["beta"] * p1
    elif fam is Family.NonlinearInteractive:
        out = _eval_nonlinear_interactive(spec, ph, yh)
    else:  # pragma: no cover
        raise UnsupportedFamily(fam)
    # linear families can overshoot [0,1] only by floating-point rounding
    return np.clip(out, 0.0, 1.0)


def _eval_nonlinear_interactive(spec, ph, yh):
    P, nl, n = spec.params, spec.nonlinearity, spec.n_series
    out = P["c"] / n + n ** (-float(P["kappa"])) * P["a"] * f_alpha_eval(nl["f_alpha"], yh)
    out = out + np.einsum("...tn,t->...n", ph, P["beta"])
    z = np.concatenate([yh.mean(axis=-1), ph.mean(axis=-1)], axis=-1)
    out = out + f_gamma_i_eval(nl["f_gamma_i"], P["fgi_weight"], z)
    counts = yh.sum(axis=-1)
    fg = f_gamma_eval(nl["f_gamma"], counts, ph.sum(axis=-1))
    return out + P["gamma"] * fg[..., None] / n


# --------------------------------------------------------------------------
# unconditional means
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanReport:
    per_series_mean: np.ndarray
    total_mean: float
    method: str  # "ClosedForm" or "LinearSolve"


def unconditional_mean(spec: ModelSpec) -> MeanReport:
    P, fam, n = spec.params, spec.family, spec.n_series
    if fam in (Family.LinearUnivariate, Family.LinearMultiLag):
        persistence = P["alpha"].reshape(n, -1).sum(1) + P["beta"].reshape(n, -1).sum(1)
        denom = 1.0 - persistence
        if (denom <= 0).any():
            raise DegenerateMean(f"alpha + beta sums {persistence} leave no finite mean")
        mu = P["omega"] / denom
        method = "ClosedForm"
    elif fam is Family.Exchangeable:
        denom = 1.0 - float(P["gamma"]) - float(P["beta"])
        if denom <= 0:
            raise DegenerateMean("gamma + beta >= 1")
        mu = np.full(n, float(P["omega"]) / denom)
        method = "ClosedForm"
    elif fam is Family.Interactive:
        d = 1.0 - P["alpha"] - P["beta"]
        if (d <= 0).any():
            raise DegenerateMean("alpha_i + beta_i >= 1 for some series")
        k = np.mean(P["gamma"] / d)
        if k >= 1.0:
            raise DegenerateMean(f"(1/N) sum gamma_i/(1-alpha_i-beta_i) = {k:.6g} >= 1")
        own = P["omega"] / d
        total = own.sum() / (1.0 - k)
        mu = own + P["gamma"] / (n * d) * total
        method = "ClosedForm"
    elif fam is Family.Network:
        M = network_block(spec)
        if spectral_radius(M) >= 1.0:
            raise DegenerateMean("rho(A + Gamma W) >= 1: I - A - Gamma W is not invertible")
        mu = np.linalg.solve(np.eye(n) - M, P["omega"])
        method = "LinearSolve"
    else:
        raise UnsupportedFamily(f"no unconditional mean formula for {fam.value}")
    mu = np.asarray(mu, float)
    return MeanReport(mu, float(mu.sum()), method)


def network_product(spec: ModelSpec, y):
    """(W y) applied along the last axis of ``y``."""
    Ws = getattr(spec, "_w_sparse", None)
    if Ws is None:
        return y @ spec.network.T
    flat = y.reshape(-1, spec.n_series)
    return np.asarray(Ws @ flat.T).T.reshape(y.shape)


def network_block(spec: ModelSpec) -> np.ndarray:
    P = spec.params
    return np.diag(P["alpha"] + P["beta"]) + P["gamma"][:, None] * spec.network


# --------------------------------------------------------------------------
# contraction
# --------------------------------------------------------------------------


def companion_matrix(alpha=None, beta=None) -> np.ndarray:
    """Companion matrix from Lipschitz coefficient arrays.

    ``alpha`` has shape (q, N, N) (outcome lags), ``beta`` shape (s, N, N)
    (probability lags); 2-D inputs are read as a single lag.  Lags beyond
    each array are zero.
    """
    blocks = [np.asarray(x, float) for x in (alpha, beta) if x is not None]
    if not blocks:
        raise ShapeMismatch("need at least one coefficient array")
    blocks = [b[None] if b.ndim == 2 else b for b in blocks]
    n = blocks[0].shape[1]
    for b in blocks:
        if b.ndim != 3 or b.shape[1:] != (n, n):
            raise ShapeMismatch(f"coefficient array shape {b.shape} is not (lags, {n}, {n})")
        if (b < 0).any():
            raise ValueError("Lipschitz coefficients must be nonnegative")
    m = max(b.shape[0] for b in blocks)
    top = np.zeros((m, n, n))
    for b in blocks:
        top[: b.shape[0]] += b
    phi = np.zeros((n * m, n * m))
    phi[:n] = np.concatenate(list(top), axis=1)
    if m > 1:
        phi[n:, : n * (m - 1)] = np.eye(n * (m - 1))
    return phi


def spectral_radius(M, tol=1e-12, max_iter=100_000) -> float:
    """Largest eigenvalue modulus.

    Nonnegative matrices use power iteration on M + I with Collatz-Wielandt
    bounds; anything else (or a stalled iteration) falls back to repeated
    squaring of the normalised matrix, i.e. Gelfand's formula.
    """
    M = np.asarray(M, float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatch(f"need a square matrix, got {M.shape}")
    if not np.isfinite(M).all():
        raise ValueError("matrix has non-finite entries")
    n = M.shape[0]
    if n == 0 or not M.any():
        return 0.0
    if (M >= 0).all():
        rho = _perron_power(M, tol, max_iter)
        if rho is not None:
            return rho
    return _gelfand(M, max_iter)


def _perron_power(M, tol, max_iter):
    # triangular (incl. diagonal) matrices: the spectrum is the diagonal
    if not np.triu(M, 1).any() or not np.tril(M, -1).any():
        return float(np.abs(np.diag(M)).max())
    x = np.ones(M.shape[0])
    prev_upper = np.inf
    stall = 0
    for _ in range(max_iter):
        mx = M @ x
        ratio = mx / x
        lower, upper = ratio.min(), ratio.max()
        if upper - lower <= tol * upper:
            return float(0.5 * (upper + lower))
        # reducible matrices can leave the lower bound stuck; accept a settled upper bound
        stall = stall + 1 if prev_upper - upper <= tol * upper * 1e-2 else 0
        if stall >= 50:
            return float(upper)
        prev_upper = upper
        # iterate with M + I so imprimitive (cyclic) matrices still converge
        x = mx + x
        x /= x.max()
        if x.min() <= 0.0:
            return None
    return None


def _gelfand(M, max_iter):
    A = M / np.abs(M).max()
    log_scale = np.log(np.abs(M).max())
    acc = 0.0  # log of the norm scaling carried along, per unit power
    power = 1.0
    est = None
    for it in range(1, min(max_iter, 64) + 1):
        nrm = np.linalg.norm(A, ord=np.inf)
        if nrm == 0.0:
            return 0.0
        acc += np.log(nrm) / power
        A = A / nrm
        new = np.exp(log_scale + acc + np.log(np.linalg.norm(A, ord=np.inf)) / power)
        if est is not None and abs(new - est) <= 1e-13 * max(new, 1e-300) and power > 2**40:
            return float(new)
        est = new
        A = A @ A
        power *= 2.0
        if not np.isfinite(A).all():
            break
    if est is None or not np.isfinite(est):
        raise NonConvergence("spectral radius did not converge", iterations=it)
    return float(est)


@dataclass
class ContractionReport:
    companion: Optional[np.ndarray]
    rho: Optional[float]
    spectral_condition_holds: Optional[bool]
    K: Optional[float]
    lipschitz_condition_holds: Optional[bool]
    supported: bool = True
    note: str = ""

    def to_dict(self):
        return {
            "rho": self.rho,
            "spectral_condition_holds": self.spectral_condition_holds,
            "K": self.K,
            "lipschitz_condition_holds": self.lipschitz_condition_holds,
            "supported": self.supported,
            "note": self.note,
        }


def contraction_from_layout(alpha, beta, s, q, K=None) -> ContractionReport:
    """Spectral (rho < 1) and aggregate-Lipschitz (K < 1/(s+q)) contraction
    conditions from an explicit Lipschitz layout; K defaults to the
    largest column sum of the coefficient blocks (a valid aggregate bound)."""
    phi = companion_matrix(alpha, beta)
    rho = spectral_radius(phi)
    if K is None:
        cols = [np.asarray(x, float).reshape(-1, *np.shape(x)[-2:]).sum(axis=1).max()
                for x in (alpha, beta) if x is not None]
        K = float(max(cols))
    return ContractionReport(phi, rho, bool(rho < 1.0), float(K), bool(K < 1.0 / (s + q)))


def lipschitz_layout(spec: ModelSpec):
    """(alpha, beta) Lipschitz coefficient arrays of shapes (q,N,N), (s,N,N)."""
    P, fam, n = spec.params, spec.family, spec.n_series
    eye = np.eye(n)
    if fam is Family.LinearUnivariate:
        return (P["alpha"][:, None] * eye)[None], (P["beta"][:, None] * eye)[None]
    if fam is Family.LinearMultiLag:
        a = np.stack([P["alpha"][:, t][:, None] * eye for t in range(spec.q)])
        b = np.stack([P["beta"][:, t][:, None] * eye for t in range(spec.s)])
        return a, b
    if fam is Family.Exchangeable:
        return np.full((1, n, n), float(P["gamma"]) / n), (float(P["beta"]) * eye)[None]
    if fam is Family.Interactive:
        a = P["alpha"][:, None] * eye + P["gamma"][:, None] / n * np.ones((n, n))
        return a[None], (P["beta"][:, None] * eye)[None]
    if fam is Family.Network:
        a = P["alpha"][:, None] * eye + P["gamma"][:, None] * spec.network
        return a[None], (P["beta"][:, None] * eye)[None]
    if fam is Family.NonlinearScalar:
        L = SCALAR_CATALOG[spec.nonlinearity].lipschitz
        return (np.abs(P["alpha"])[:, None] * eye)[None], (L * eye)[None]
    raise UnsupportedFamily(fam.value)


def check_contraction(spec: ModelSpec, K=None) -> ContractionReport:
    require_valid(spec)
    if spec.family in (Family.Logit11, Family.NonlinearInteractive):
        return ContractionReport(None, None, None, K, None if K is None else bool(K < 1 / (spec.s + spec.q)),
                                 supported=False,
                                 note=f"no analytic Lipschitz layout for {spec.family.value}")
    a, b = lipschitz_layout(spec)
    return contraction_from_layout(a, b, spec.s, spec.q, K)
