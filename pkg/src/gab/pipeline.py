"""From return panels to binary tail-event panels.

Excess returns are regressed on factors over the estimation window, and a
residual is flagged when it falls strictly below the series' estimation-window
lower quantile.  Nothing computed from the holdout window feeds back into
coefficients or thresholds.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from .errors import DataError, EmptyWindow, RankDeficient, ShapeMismatch

log = logging.getLogger(__name__)

MIN_ESTIMATION = 2


@dataclass
class ReturnsPanel:
    dates: pd.DatetimeIndex
    ids: List[str]
    returns: np.ndarray  # (N, T)
    risk_free: np.ndarray  # (T,)

    def __post_init__(self):
        if self.returns.shape != (len(self.ids), len(self.dates)):
            raise ShapeMismatch("returns must be (N, T) matching ids and dates")


@dataclass
class FactorSeries:
    dates: pd.DatetimeIndex
    names: List[str]
    values: np.ndarray  # (T, K)


@dataclass
class LoadReport:
    rejected_series: List[str] = field(default_factory=list)
    n_return_dates: int = 0
    n_factor_dates: int = 0
    n_joined: int = 0

    @property
    def dropped_dates(self):
        return (self.n_return_dates - self.n_joined, self.n_factor_dates - self.n_joined)


def _read_numeric_csv(path, what):
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {what} file {path}: {exc}") from exc
    if "date" not in df.columns:
        raise DataError(f"{what} file {path} has no 'date' column")
    try:
        dates = pd.to_datetime(df["date"], format="%Y-%m-%d")
    except (ValueError, TypeError):
        bad = [i for i, v in enumerate(df["date"]) if pd.to_datetime(v, format="%Y-%m-%d", errors="coerce") is pd.NaT]
        raise DataError(f"{what} file {path}: unparseable date at data row {bad[0] + 1}, column 'date'")
    if dates.duplicated().any():
        raise DataError(f"{what} file {path}: duplicate date {dates[dates.duplicated()].iloc[0].date()}")
    values = {}
    for col in df.columns.drop("date"):
        raw = df[col].str.strip()
        num = pd.to_numeric(raw, errors="coerce")
        bad = num.isna() & (raw != "")
        if bad.any():
            r = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"{what} file {path}: cannot parse {raw.iloc[r]!r} at data row {r + 1}, column {col!r}")
        values[col] = num.to_numpy(dtype=float)
    out = pd.DataFrame(values, index=pd.DatetimeIndex(dates, name="date"))
    return out.sort_index()


def load_panels(returns_path, factors_path):
    """Read returns.csv and factors.csv, drop series with gaps, inner-join dates.

    Returns (ReturnsPanel, FactorSeries, LoadReport).
    """
    R = _read_numeric_csv(returns_path, "returns")
    F = _read_numeric_csv(factors_path, "factors")
    if "rf" not in F.columns:
        raise DataError(f"factors file {factors_path} has no 'rf' column")
    report = LoadReport(n_return_dates=len(R), n_factor_dates=len(F))
    idx = R.index.intersection(F.index)
    R, F = R.loc[idx], F.loc[idx]
    report.n_joined = len(idx)
    if F.isna().any().any():
        col = F.columns[F.isna().any()][0]
        r = int(np.flatnonzero(F[col].isna().to_numpy())[0])
        raise DataError(f"factors file {factors_path}: missing value at {idx[r].date()}, column {col!r}")
    gaps = R.columns[R.isna().any()]
    report.rejected_series = list(gaps)
    if len(gaps):
        log.info("rejected %d series with missing cells: %s", len(gaps), ", ".join(gaps))
    R = R.drop(columns=gaps)
    if R.shape[1] == 0:
        raise DataError("no series without gaps remain")
    if report.n_joined < report.n_return_dates or report.n_joined < report.n_factor_dates:
        log.info("date alignment kept %d of %d / %d dates", report.n_joined, report.n_return_dates,
                 report.n_factor_dates)
    rp = ReturnsPanel(idx, list(R.columns), R.to_numpy().T.copy(), F["rf"].to_numpy())
    names = [c for c in F.columns if c != "rf"]
    fs = FactorSeries(idx, names, F[names].to_numpy())
    return rp, fs, report


def estimation_mask(dates, split_date=None):
    """True for dates on or before ``split_date`` (all dates when None)."""
    dates = pd.DatetimeIndex(dates)
    if split_date is None:
        return np.ones(len(dates), dtype=bool)
    sd = pd.Timestamp(split_date)
    if sd < dates[0] or sd > dates[-1]:
        raise ValueError(f"split date {sd.date()} is outside {dates[0].date()}..{dates[-1].date()}")
    return np.asarray(dates <= sd)


@dataclass
class ResidualPanel:
    dates: pd.DatetimeIndex
    ids: List[str]
    resid: np.ndarray  # (N, T)
    coef: np.ndarray  # (N, K+1), intercept first
    est_mask: np.ndarray


def ols_residuals(returns: ReturnsPanel, factors: FactorSeries, split_date=None) -> ResidualPanel:
    """Per-series OLS of excess returns on [1, factors] over the estimation
    window; residuals over the full span use those coefficients."""
    if not returns.dates.equals(factors.dates):
        raise ShapeMismatch("returns and factors must share dates (use load_panels)")
    mask = estimation_mask(returns.dates, split_date)
    T_est = int(mask.sum())
    X = np.column_stack([np.ones(len(returns.dates)), factors.values])
    if T_est <= X.shape[1]:
        raise EmptyWindow(f"estimation window has {T_est} dates; need more than {X.shape[1]}")
    excess = returns.returns - returns.risk_free[None, :]
    Xe = X[mask]
    coef, _, rank, sv = np.linalg.lstsq(Xe, excess[:, mask].T, rcond=None)
    if rank < Xe.shape[1]:
        raise RankDeficient(f"factor design has rank {rank} < {Xe.shape[1]} on the estimation window")
    resid = excess - (X @ coef).T
    return ResidualPanel(returns.dates, list(returns.ids), resid, coef.T, mask)


@dataclass
class BinaryPanel:
    dates: pd.DatetimeIndex
    ids: List[str]
    y: np.ndarray  # (N, T) int8
    thresholds: np.ndarray  # (N,)
    split_index: int  # number of estimation dates

    @property
    def estimation(self):
        return self.y[:, : self.split_index]

    @property
    def holdout(self):
        return self.y[:, self.split_index:]

    def to_csv(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "binary_panel.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date"] + list(self.ids))
            for t, d in enumerate(self.dates):
                w.writerow([d.strftime("%Y-%m-%d")] + [int(v) for v in self.y[:, t]])
        with open(os.path.join(out_dir, "thresholds.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "threshold"])
            for i, th in zip(self.ids, self.thresholds):
                w.writerow([i, repr(float(th))])


def quantile_threshold(x, level):
    """Order statistic x_(k+1) with k = floor(level * n): exactly k points lie
    strictly below it when there are no ties, so the flag rate is <= level."""
    x = np.sort(np.asarray(x, float))
    k = int(np.floor(level * x.size))
    return x[k]


def threshold_binary(residuals: ResidualPanel, level=0.05, split_date=None) -> BinaryPanel:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    mask = estimation_mask(residuals.dates, split_date) if split_date is not None else residuals.est_mask
    T_est = int(mask.sum())
    if T_est < MIN_ESTIMATION:
        raise EmptyWindow(f"estimation window has {T_est} dates")
    if not (mask[:T_est].all() and not mask[T_est:].any()):
        raise ValueError("estimation window must be a leading block of dates")
    th = np.array([quantile_threshold(r[mask], level) for r in residuals.resid])
    y = (residuals.resid < th[:, None]).astype(np.int8)
    return BinaryPanel(residuals.dates, list(residuals.ids), y, th, T_est)


def split(panel: BinaryPanel, date):
    """(estimation, holdout): dates <= date and dates > date."""
    mask = estimation_mask(panel.dates, date)
    k = int(mask.sum())
    if k < MIN_ESTIMATION:
        raise EmptyWindow(f"estimation part would have {k} dates")
    est = BinaryPanel(panel.dates[:k], panel.ids, panel.y[:, :k], panel.thresholds, k)
    hold = BinaryPanel(panel.dates[k:], panel.ids, panel.y[:, k:], panel.thresholds, 0)
    return est, hold


def build_binary_panel(returns_path, factors_path, split_date=None, level=0.05):
    rp, fs, report = load_panels(returns_path, factors_path)
    res = ols_residuals(rp, fs, split_date)
    return threshold_binary(res, level), report


def read_binary_panel(path):
    """binary_panel.csv -> (dates, ids, y (N, T))."""
    df = _read_numeric_csv(path, "binary panel")
    y = df.to_numpy().T
    if not np.isin(y, (0, 1)).all():
        raise DataError(f"{path} contains values other than 0/1")
    return df.index, list(df.columns), y.astype(np.int8)
