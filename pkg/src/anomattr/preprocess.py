"""Table transforms: leap-day removal, temporal aggregation, derived climate
features, z-scoring, yearly IQR outlier replacement, and rolling windows."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import (
    AllOutliers,
    AlbedoOutOfRange,
    EmptyAfterAggregation,
    MissingColumn,
    SeriesTooShort,
    ValidationError,
)
from .table import NormStats, TimeTable, WindowSet

MELT_SEASON = (5, 6, 7, 8, 9)

_DAY = np.timedelta64(1, "D")


def _is_leap_day(ts: np.ndarray) -> np.ndarray:
    days = ts.astype("datetime64[D]")
    month_start = days.astype("datetime64[M]")
    month = month_start.astype(np.int64) % 12 + 1
    dom = (days - month_start.astype("datetime64[D]")).astype(np.int64) + 1
    return (month == 2) & (dom == 29)


def drop_leap_days(table: TimeTable) -> TimeTable:
    keep = ~_is_leap_day(table.timestamps)
    return table.replace(timestamps=table.timestamps[keep], values=table.values[keep])


def filter_months(table: TimeTable, months: Iterable[int] = MELT_SEASON) -> TimeTable:
    keep = np.isin(table.months(), list(months))
    return table.replace(timestamps=table.timestamps[keep], values=table.values[keep])


def _run_ids(ts: np.ndarray, skip_leap: bool) -> np.ndarray:
    """Label maximal runs of consecutive calendar days."""
    days = ts.astype("datetime64[D]")
    if len(days) == 0:
        return np.zeros(0, dtype=np.int64)
    gap = np.diff(days)
    contiguous = gap == _DAY
    if skip_leap:
        # Feb 28 -> Mar 1 of a leap year is contiguous once Feb 29 is gone
        bridged = (gap == 2 * _DAY) & _is_leap_day(days[:-1] + _DAY)
        contiguous |= bridged
    return np.concatenate([[0], np.cumsum(~contiguous)])


def aggregate_time(
    table: TimeTable,
    period_days: int = 5,
    drop_leap: bool = True,
    restart_on_gap: bool = True,
) -> TimeTable:
    """Average consecutive blocks of `period_days` daily rows.

    Blocks never cross a calendar year. With `restart_on_gap` they also
    restart after any break in the daily sequence (e.g. between retained
    month runs after `filter_months`). Trailing partial blocks are dropped.
    Each output row is stamped with the first day of its block.
    """
    if period_days < 1:
        raise ValidationError("period_days must be >= 1")
    if drop_leap:
        table = drop_leap_days(table)
    years = table.years()
    runs = _run_ids(table.timestamps, skip_leap=drop_leap) if restart_on_gap else np.zeros(len(years), np.int64)

    out_ts, out_vals = [], []
    boundaries = np.nonzero((np.diff(years) != 0) | (np.diff(runs) != 0))[0] + 1
    for seg in np.split(np.arange(table.n_rows), boundaries):
        n_full = len(seg) // period_days
        if n_full == 0:
            continue
        idx = seg[: n_full * period_days].reshape(n_full, period_days)
        out_ts.append(table.timestamps[idx[:, 0]])
        out_vals.append(table.values[idx].mean(axis=1))
    if not out_ts:
        raise EmptyAfterAggregation(f"no complete {period_days}-row block in the input")
    return table.replace(timestamps=np.concatenate(out_ts), values=np.concatenate(out_vals))


def derive_features(table: TimeTable) -> TimeTable:
    """Append total 10 m wind speed `tw10` and snow-absorbed shortwave `ssrdas`."""
    for col in ("u10", "v10", "ssrd", "asn"):
        if col not in table.feature_names:
            raise MissingColumn(f"derive_features needs column {col!r}")
    asn = table.column("asn")
    if np.any((asn < 0) | (asn > 1)):
        raise AlbedoOutOfRange("snow albedo 'asn' must lie in [0, 1]")
    tw10 = np.hypot(table.column("u10"), table.column("v10"))
    ssrdas = table.column("ssrd") * (1.0 - asn)
    units = dict(table.units)
    if "u10" in units:
        units["tw10"] = units["u10"]
    if "ssrd" in units:
        units["ssrdas"] = units["ssrd"]
    return table.replace(
        feature_names=table.feature_names + ["tw10", "ssrdas"],
        values=np.column_stack([table.values, tw10, ssrdas]),
        units=units,
    )


def fit_norm(table: TimeTable) -> NormStats:
    if table.n_rows < 2:
        raise ValidationError("need at least 2 rows to fit normalization stats")
    mean = table.values.mean(axis=0)
    std = table.values.std(axis=0)  # population std
    return NormStats(list(table.feature_names), mean, std, std == 0)


def zscore(table: TimeTable, stats: NormStats | None = None) -> tuple[TimeTable, NormStats]:
    if stats is None:
        stats = fit_norm(table)
    elif list(stats.feature_names) != table.feature_names:
        raise ValidationError("NormStats features do not match the table")
    safe = np.where(stats.degenerate, 1.0, stats.std)
    out = (table.values - stats.mean) / safe
    out[:, stats.degenerate] = 0.0
    return table.replace(values=out), stats


def _clean_column(x: np.ndarray) -> np.ndarray:
    """Replace outliers one at a time until the column has none left.

    Each pass marks the single value furthest outside the current fences and
    resets every marked cell to the mean of the unmarked ones. One unmarked
    value left gives a constant column, so the loop always ends with at least
    one inlier and with an output that a further pass leaves unchanged.
    """
    outlier = ~np.isfinite(x)
    for _ in range(len(x)):
        out = np.where(outlier, x[~outlier].mean(), x)
        q1, q3 = np.quantile(out, [0.25, 0.75])
        iqr = q3 - q1
        excess = np.maximum(q1 - 1.5 * iqr - out, out - (q3 + 1.5 * iqr))
        excess[outlier] = 0.0
        worst = int(np.argmax(excess))
        if excess[worst] <= 0:
            return out
        outlier[worst] = True
    return out


def iqr_clean(table: TimeTable) -> TimeTable:
    """Replace per-year IQR outliers with the mean of that year's inliers.

    Fences are Q1 - 1.5 IQR and Q3 + 1.5 IQR, inclusive. NaNs count as
    outliers. Replacing outliers can shrink the IQR and expose new ones, so
    outliers are peeled off one by one until the cleaned year has none left;
    applying the cleaner again then changes nothing.
    """
    years = table.years()
    out = table.values.copy()
    for year in np.unique(years):
        rows = years == year
        if rows.sum() < 4:
            raise ValidationError(f"year {year} has fewer than 4 rows")
        for j in range(table.n_features):
            col = out[rows, j]
            if not np.isfinite(col).any():
                raise AllOutliers(f"year {year}, feature {table.feature_names[j]!r} has no finite values")
            out[rows, j] = _clean_column(col)
    return table.replace(values=out)


def window(table: TimeTable, T: int = 14, stride: int = 1) -> WindowSet:
    if T < 1 or stride < 1:
        raise ValidationError("T and stride must be positive")
    if table.n_rows < T:
        raise SeriesTooShort(f"series of {table.n_rows} rows is shorter than window {T}")
    view = np.lib.stride_tricks.sliding_window_view(table.values, T, axis=0)  # (M-T+1, F, T)
    windows = np.ascontiguousarray(view[::stride].transpose(0, 2, 1))
    origin = np.arange(T - 1, table.n_rows, stride)
    return WindowSet(
        windows=windows,
        T=T,
        stride=stride,
        origin_index=origin,
        timestamps=table.timestamps[origin],
        feature_names=list(table.feature_names),
    )
