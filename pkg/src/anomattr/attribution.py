"""Counterfactual feature attribution for detected anomalies.

Every feature in turn is replaced by its per-calendar-year median and the
table is rescored; the score change per timestamp is that feature's delta.
At flagged timestamps the qualifying features form an exceedance set and the
one with the largest qualifying change is the winner.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .clv import ModelCheckpoint, ScoreSeries, score_series
from .errors import IndexOutOfRange, IOFailure, LengthMismatch, ModelDataMismatch, ValidationError
from .preprocess import window
from .table import TimeTable, format_float, format_timestamps
from .threshold import ThresholdSeries

DIRECTIONS = ("positive", "negative", "absolute")
MEMBERSHIP = ("exceeds-baseline", "delta-vs-score")


@dataclass
class AttributionSeries:
    timestamps: np.ndarray
    feature_names: list[str]
    delta: np.ndarray  # (n, F): counterfactual score minus baseline
    winners: list[str | None]
    exceedance_sets: list[list[str]]
    flagged: np.ndarray
    n_passes: int = 0

    def winner_counts(self) -> Counter:
        return Counter(w for w in self.winners if w is not None)


@dataclass
class RankedFeatures:
    entries: list[tuple[str, float]]  # (feature, frequency) most important first
    counts: dict[str, int] = field(default_factory=dict)

    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> list[dict]:
        return [{"feature": n, "count": self.counts.get(n), "frequency": f} for n, f in self.entries]


def counterfactual_table(table: TimeTable, feature_index: int) -> TimeTable:
    """Replace one column by its median within each calendar year."""
    if not 0 <= feature_index < table.n_features:
        raise IndexOutOfRange(f"feature index {feature_index} outside [0, {table.n_features})")
    years = table.years()
    values = table.values.copy()
    col = values[:, feature_index]
    for year in np.unique(years):
        rows = years == year
        col[rows] = np.median(table.values[rows, feature_index])
    return table.replace(values=values)


def _signed(delta: np.ndarray, direction: str) -> np.ndarray:
    if direction == "positive":
        return delta
    if direction == "negative":
        return -delta
    return np.abs(delta)


def attribute(
    model: ModelCheckpoint,
    table: TimeTable,
    baseline: ScoreSeries,
    flags: ThresholdSeries,
    direction: str = "positive",
    membership: str = "exceeds-baseline",
    everywhere: bool = False,
    replace: Callable[[TimeTable, int], TimeTable] = counterfactual_table,
    jobs: int = 1,
) -> AttributionSeries:
    """Run the F counterfactual passes and pick a winner per flagged timestamp.

    direction: which change qualifies. "positive" keeps features whose
    counterfactual score rises above the baseline (the literal rule),
    "negative" those whose replacement lowers it, "absolute" either.
    membership: "exceeds-baseline" requires a qualifying change > 0;
    "delta-vs-score" compares the change itself against the baseline score.
    """
    if direction not in DIRECTIONS:
        raise ValidationError(f"direction must be one of {DIRECTIONS}")
    if membership not in MEMBERSHIP:
        raise ValidationError(f"membership must be one of {MEMBERSHIP}")
    if list(table.feature_names) != list(model.feature_names):
        raise ModelDataMismatch("table features differ from the model's features")
    if len(flags.flag) != len(baseline.scores):
        raise LengthMismatch("flags are not aligned with the baseline scores")

    ref_ts = np.asarray(window(table, model.T).timestamps)
    pos = np.searchsorted(ref_ts, baseline.timestamps)
    if np.any(pos >= len(ref_ts)) or not np.array_equal(ref_ts[np.minimum(pos, len(ref_ts) - 1)],
                                                        baseline.timestamps):
        raise ModelDataMismatch("baseline timestamps do not match the table's windows")

    def one_pass(i: int) -> np.ndarray:
        cf = score_series(model, window(replace(table, i), model.T))
        return cf.scores[pos] - baseline.scores

    F = table.n_features
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            columns = list(pool.map(one_pass, range(F)))
    else:
        columns = [one_pass(i) for i in range(F)]
    delta = np.column_stack(columns)

    signed = _signed(delta, direction)
    base = np.asarray(baseline.scores)
    cut = np.zeros_like(base) if membership == "exceeds-baseline" else base
    member = signed > cut[:, None]
    active = np.ones(len(base), dtype=bool) if everywhere else np.asarray(flags.flag, dtype=bool)

    winners: list[str | None] = []
    sets: list[list[str]] = []
    names = table.feature_names
    for t in range(len(base)):
        if not active[t] or not member[t].any():
            winners.append(None)
            sets.append([names[j] for j in np.nonzero(member[t])[0]] if active[t] else [])
            continue
        masked = np.where(member[t], signed[t], -np.inf)
        winners.append(names[int(np.argmax(masked))])  # first max = lowest index
        sets.append([names[j] for j in np.nonzero(member[t])[0]])
    return AttributionSeries(np.asarray(baseline.timestamps).copy(), list(names), delta, winners, sets,
                             active.copy(), n_passes=F)


def rank_features(attr: AttributionSeries | Iterable[AttributionSeries], n_grids: int = 1) -> RankedFeatures:
    """Winner counts per feature divided by the number of grids, descending."""
    if n_grids < 1:
        raise ValidationError("n_grids must be >= 1")
    series = [attr] if isinstance(attr, AttributionSeries) else list(attr)
    counts: Counter = Counter()
    names: set[str] = set()
    for a in series:
        counts.update(a.winner_counts())
        names.update(a.feature_names)
    full = {n: counts.get(n, 0) for n in names}
    order = sorted(full, key=lambda n: (-full[n], n))
    return RankedFeatures([(n, full[n] / n_grids) for n in order], full)


def topk(ranked: RankedFeatures, k: int) -> RankedFeatures:
    if not 1 <= k <= len(ranked):
        raise ValidationError(f"k={k} outside [1, {len(ranked)}]")
    keep = ranked.entries[:k]
    return RankedFeatures(list(keep), {n: ranked.counts[n] for n, _ in keep if n in ranked.counts})


def write_attribution(path: str | Path, attr: AttributionSeries) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "winner"] + [f"delta_{n}" for n in attr.feature_names])
            for stamp, win, row in zip(format_timestamps(attr.timestamps), attr.winners, attr.delta):
                w.writerow([stamp, win or ""] + [format_float(v) for v in row])
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def read_attribution(path: str | Path) -> AttributionSeries:
    import pandas as pd

    try:
        df = pd.read_csv(path, float_precision="round_trip", dtype={"timestamp": str, "winner": str}, keep_default_na=False)
    except FileNotFoundError:
        raise IOFailure(f"attribution file not found: {path}") from None
    dcols = [c for c in df.columns if c.startswith("delta_")]
    names = [c[len("delta_"):] for c in dcols]
    ts = pd.to_datetime(df["timestamp"], utc=True, format="ISO8601").dt.tz_localize(None)
    winners = [w if w else None for w in df["winner"]]
    return AttributionSeries(ts.to_numpy().astype("datetime64[s]"), names,
                             df[dcols].to_numpy(dtype=np.float64), winners,
                             [[w] if w else [] for w in winners], np.array([w is not None for w in winners]),
                             n_passes=0)


def write_ranking(path: str | Path, ranked: RankedFeatures) -> None:
    try:
        Path(path).write_text(json.dumps(ranked.to_json(), indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def read_ranking(path: str | Path) -> RankedFeatures:
    """Read a ranking: either our JSON objects or a bare array of feature names."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IOFailure(f"ranking file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise IOFailure(str(exc)) from None
    if not isinstance(doc, list):
        raise ValidationError(f"{path}: ranking must be a JSON array")
    if all(isinstance(e, str) for e in doc):
        n = len(doc)
        return RankedFeatures([(name, float(n - i)) for i, name in enumerate(doc)])
    try:
        entries = [(str(e["feature"]), float(e["frequency"])) for e in doc]
        counts = {str(e["feature"]): int(e["count"]) for e in doc if e.get("count") is not None}
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed ranking entry ({exc})") from None
    return RankedFeatures(entries, counts)
