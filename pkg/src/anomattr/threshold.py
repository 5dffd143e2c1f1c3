"""Peaks-over-threshold anomaly thresholds.

A generalized Pareto distribution is fitted by the method of moments to the
excesses over an empirical high quantile; the risk-level quantile of that
tail becomes the threshold. `dynamic_threshold` refits on segments that slide
forward by half their span.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clv import ScoreSeries
from .errors import IOFailure, LengthMismatch, TooFewExceedances, ValidationError, WindowTooLarge
from .table import format_float, format_timestamps

log = logging.getLogger(__name__)

MIN_EXCEEDANCES = 5


@dataclass
class GpdFit:
    shape: float
    scale: float
    init_threshold: float
    n_exceedances: int
    n: int
    degraded: bool = False  # quantile fallback; shape/scale are NaN


@dataclass
class ThresholdSeries:
    timestamps: np.ndarray
    scores: np.ndarray
    threshold: np.ndarray
    flag: np.ndarray

    def __len__(self) -> int:
        return len(self.threshold)


def gpd_mom(excesses) -> tuple[float, float]:
    """Method-of-moments GPD estimate (shape, scale) from positive excesses."""
    y = np.asarray(excesses, dtype=np.float64)
    if len(y) < 2:
        raise TooFewExceedances("need at least two excesses")
    m = y.mean()
    s2 = y.var(ddof=1)
    if not s2 > 0:
        raise TooFewExceedances("excesses have zero variance")
    ratio = m * m / s2
    return 0.5 * (1.0 - ratio), 0.5 * m * (ratio + 1.0)


def gpd_quantile(u: float, shape: float, scale: float, risk_q: float, n: int, n_exc: int) -> float:
    r = risk_q * n / n_exc
    if abs(shape) < 1e-12:
        return u - scale * np.log(r)
    return u + (scale / shape) * (r ** (-shape) - 1.0)


def fit_pot(scores, init_quantile: float = 0.98, risk_q: float = 0.01) -> tuple[GpdFit, float]:
    x = np.asarray(scores, dtype=np.float64)
    n = len(x)
    if n < 30:
        raise ValidationError(f"POT needs at least 30 scores, got {n}")
    if not 0.8 < init_quantile < 1:
        raise ValidationError("init_quantile must lie in (0.8, 1)")
    if not 0 < risk_q < 0.1:
        raise ValidationError("risk_q must lie in (0, 0.1)")
    u = float(np.quantile(x, init_quantile))
    exc = x[x > u] - u
    try:
        if len(exc) < MIN_EXCEEDANCES:
            raise TooFewExceedances(f"{len(exc)} exceedances above the initial threshold")
        shape, scale = gpd_mom(exc)
    except TooFewExceedances:
        fallback = float(np.quantile(x, 1.0 - risk_q))
        return GpdFit(np.nan, np.nan, u, len(exc), n, degraded=True), fallback
    z = gpd_quantile(u, shape, scale, risk_q, n, len(exc))
    return GpdFit(shape, scale, u, len(exc), n), float(z)


def plan_segments(n: int, window: int) -> list[tuple[int, int, int, int]]:
    """(data_start, data_end, cover_start, cover_end) for each segment.

    Segments start every window//2 steps. Each one's threshold covers the
    half it newly reveals (segment 0 covers its whole span); the last full
    segment absorbs any trailing remainder in both data and coverage.
    """
    if window > n:
        raise WindowTooLarge(f"window {window} exceeds series length {n}")
    half = window // 2
    starts = list(range(0, n - window + 1, half))
    plan = []
    for i, s in enumerate(starts):
        last = i == len(starts) - 1
        data_end = n if last else s + window
        cover_start = 0 if i == 0 else s + half
        cover_end = n if last else s + 2 * half
        plan.append((s, data_end, cover_start, cover_end))
    return plan


def dynamic_threshold(
    scores: ScoreSeries,
    window: int = 62,
    init_quantile: float = 0.98,
    risk_q: float = 0.01,
) -> ThresholdSeries:
    s = np.asarray(scores.scores, dtype=np.float64)
    if window < 60:
        raise ValidationError("window must be at least 60")
    thr = np.full(len(s), np.nan)
    degraded = 0
    plan = plan_segments(len(s), window)
    for ds, de, cs, ce in plan:
        fit, z = fit_pot(s[ds:de], init_quantile, risk_q)
        degraded += fit.degraded
        thr[cs:ce] = z
    if degraded:
        log.info("%d of %d segments fell back to the empirical quantile", degraded, len(plan))
    return ThresholdSeries(np.asarray(scores.timestamps).copy(), s.copy(), thr, s > thr)


def flag_anomalies(scores: ScoreSeries, thresholds: ThresholdSeries) -> ThresholdSeries:
    s = np.asarray(scores.scores, dtype=np.float64)
    if len(s) != len(thresholds.threshold):
        raise LengthMismatch(f"{len(s)} scores vs {len(thresholds.threshold)} thresholds")
    return ThresholdSeries(np.asarray(scores.timestamps).copy(), s.copy(), thresholds.threshold.copy(),
                           s > thresholds.threshold)


def write_thresholds(path: str | Path, ts: ThresholdSeries) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "score", "threshold", "flag"])
            for stamp, s, t, f in zip(format_timestamps(ts.timestamps), ts.scores, ts.threshold, ts.flag):
                w.writerow([stamp, format_float(s), format_float(t), int(bool(f))])
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def read_thresholds(path: str | Path) -> ThresholdSeries:
    import pandas as pd

    try:
        df = pd.read_csv(path, float_precision="round_trip", dtype={"timestamp": str})
    except FileNotFoundError:
        raise IOFailure(f"threshold file not found: {path}") from None
    for col in ("timestamp", "score", "threshold", "flag"):
        if col not in df.columns:
            raise ValidationError(f"{path} lacks column {col!r}")
    ts = pd.to_datetime(df["timestamp"], utc=True, format="ISO8601").dt.tz_localize(None)
    return ThresholdSeries(
        ts.to_numpy().astype("datetime64[s]"),
        df["score"].to_numpy(dtype=np.float64),
        df["threshold"].to_numpy(dtype=np.float64),
        df["flag"].astype(int).to_numpy().astype(bool),
    )
