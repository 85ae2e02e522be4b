import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gab.errors import DataError, EmptyWindow, RankDeficient
from gab.pipeline import (
    FactorSeries,
    ReturnsPanel,
    build_binary_panel,
    load_panels,
    ols_residuals,
    quantile_threshold,
    read_binary_panel,
    split,
    threshold_binary,
    ResidualPanel,
)


def write_csvs(tmp_path, T=60, N=3, K=2, seed=0, drop=None):
    rng = np.random.default_rng(seed)
    dates = pd.bdate_range("2020-01-01", periods=T)
    F = rng.normal(0, 0.01, (T, K))
    rf = np.full(T, 1e-4)
    R = rf[:, None] + F @ rng.normal(1, 0.3, (K, N)) + rng.normal(0, 0.01, (T, N))
    ret = pd.DataFrame(R, columns=[f"A{i}" for i in range(N)])
    ret.insert(0, "date", dates.strftime("%Y-%m-%d"))
    fac = pd.DataFrame(F, columns=[f"f{k + 1}" for k in range(K)])
    fac.insert(0, "rf", rf)
    fac.insert(0, "date", dates.strftime("%Y-%m-%d"))
    if drop is not None:
        ret.loc[drop[0], drop[1]] = np.nan
    rp, fp = tmp_path / "returns.csv", tmp_path / "factors.csv"
    ret.to_csv(rp, index=False)
    fac.to_csv(fp, index=False)
    return rp, fp, dates


def test_load_complete(tmp_path):
    rp, fp, dates = write_csvs(tmp_path, T=3, N=2, K=1)
    r, f, rep = load_panels(rp, fp)
    assert r.returns.shape == (2, 3) and f.values.shape == (3, 1)
    assert rep.rejected_series == [] and rep.n_joined == 3


def test_gap_rejects_series(tmp_path):
    rp, fp, _ = write_csvs(tmp_path, drop=(4, "A1"))
    r, _, rep = load_panels(rp, fp)
    assert rep.rejected_series == ["A1"] and r.ids == ["A0", "A2"]


def test_date_mismatch_aligned(tmp_path):
    rp, fp, _ = write_csvs(tmp_path, T=10)
    fac = pd.read_csv(fp).iloc[2:]
    fac.to_csv(fp, index=False)
    r, _, rep = load_panels(rp, fp)
    assert len(r.dates) == 8 and rep.dropped_dates == (2, 0)


def test_parse_error_location(tmp_path):
    rp, fp, _ = write_csvs(tmp_path, T=5)
    lines = rp.read_text().splitlines()
    parts = lines[3].split(",")
    parts[2] = "abc"
    lines[3] = ",".join(parts)
    rp.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"row 3, column 'A1'"):
        load_panels(rp, fp)


def panel(R, F, rf=None):
    T = R.shape[1]
    dates = pd.bdate_range("2021-01-01", periods=T)
    rf = np.zeros(T) if rf is None else rf
    return ReturnsPanel(dates, [f"s{i}" for i in range(R.shape[0])], R, rf), FactorSeries(dates, ["f"] * F.shape[1], F)


def test_perfect_fit_residuals_zero():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(30, 1))
    rf = rng.normal(0, 1e-3, 30)
    r, fs = panel((2 * f[:, 0] + rf)[None, :], f, rf)
    np.testing.assert_allclose(ols_residuals(r, fs).resid, 0, atol=1e-12)


def test_zero_factors_demean():
    rng = np.random.default_rng(1)
    R = rng.normal(size=(2, 25))
    r, fs = panel(R, np.zeros((25, 0)))
    np.testing.assert_allclose(ols_residuals(r, fs).resid, R - R.mean(axis=1, keepdims=True), atol=1e-14)


def test_residuals_orthogonal_on_window():
    rng = np.random.default_rng(2)
    R = rng.normal(size=(3, 80))
    F = rng.normal(size=(80, 2))
    r, fs = panel(R, F)
    res = ols_residuals(r, fs, split_date=r.dates[59])
    X = np.column_stack([np.ones(80), F])[:60]
    assert np.abs(res.resid[:, :60] @ X).max() < 1e-10
    assert res.est_mask.sum() == 60


def test_rank_deficient():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(30, 1))
    r, fs = panel(rng.normal(size=(1, 30)), np.column_stack([f, 2 * f]))
    with pytest.raises(RankDeficient):
        ols_residuals(r, fs)


def resid_panel(resid, T_est):
    T = resid.shape[1]
    dates = pd.bdate_range("2022-01-03", periods=T)
    mask = np.arange(T) < T_est
    return ResidualPanel(dates, [f"s{i}" for i in range(resid.shape[0])], resid, np.zeros((resid.shape[0], 1)), mask)


def test_threshold_twenty_points():
    x = np.arange(20.0)[None, :]
    bp = threshold_binary(resid_panel(x, 20), 0.05)
    assert bp.thresholds[0] == 1.0
    np.testing.assert_array_equal(np.flatnonzero(bp.y[0]), [0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(2, 400), level=st.floats(0.01, 0.5))
def test_in_sample_rate_bounded(seed, T, level):
    x = np.random.default_rng(seed).normal(size=(1, T))
    bp = threshold_binary(resid_panel(x, T), level)
    rate = bp.y.mean()
    assert rate <= level
    assert rate > level - 1.0 / T


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-5, 5), scale=st.floats(0.1, 10))
def test_monotone_invariance(seed, shift, scale):
    x = np.random.default_rng(seed).normal(size=(2, 120))
    a = threshold_binary(resid_panel(x, 90), 0.05)
    b = threshold_binary(resid_panel(np.exp(scale * x) + shift, 90), 0.05)
    np.testing.assert_array_equal(a.y, b.y)


def test_holdout_extension_does_not_move_thresholds(tmp_path):
    x = np.random.default_rng(4).normal(size=(3, 150))
    a = threshold_binary(resid_panel(x[:, :120], 100), 0.05)
    b = threshold_binary(resid_panel(x, 100), 0.05)
    a.to_csv(tmp_path / "a")
    b.to_csv(tmp_path / "b")
    assert (tmp_path / "a/thresholds.csv").read_bytes() == (tmp_path / "b/thresholds.csv").read_bytes()


def test_split_rules():
    x = np.random.default_rng(5).normal(size=(2, 30))
    bp = threshold_binary(resid_panel(x, 30), 0.1)
    est, hold = split(bp, bp.dates[-1])
    assert est.y.shape[1] == 30 and hold.y.shape[1] == 0
    with pytest.raises(EmptyWindow):
        split(bp, bp.dates[0])
    with pytest.raises(ValueError):
        split(bp, bp.dates[0] - pd.Timedelta(days=3))
    est, hold = split(bp, bp.dates[19])
    assert est.y.shape[1] == 20 and hold.y.shape[1] == 10
    np.testing.assert_array_equal(np.hstack([est.y, hold.y]), bp.y)


def test_quantile_threshold_level_validation():
    with pytest.raises(ValueError):
        threshold_binary(resid_panel(np.zeros((1, 10)), 10), 1.5)
    assert quantile_threshold([3, 1, 2], 0.5) == 2


def test_end_to_end_deterministic(tmp_path):
    rp, fp, dates = write_csvs(tmp_path, T=200, N=4)
    outs = []
    for k in range(2):
        bp, _ = build_binary_panel(rp, fp, split_date=dates[149])
        bp.to_csv(tmp_path / f"o{k}")
        outs.append((tmp_path / f"o{k}/binary_panel.csv").read_bytes())
    assert outs[0] == outs[1]
    d, ids, y = read_binary_panel(tmp_path / "o0/binary_panel.csv")
    assert y.shape == (4, 200) and ids == ["A0", "A1", "A2", "A3"]
    assert bp.split_index == 150
    assert (bp.estimation.mean(axis=1) <= 0.05).all()
