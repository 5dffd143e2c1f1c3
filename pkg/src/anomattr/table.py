"""Core data containers and CSV I/O for timestamped feature tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateTimestamp,
    ExtraColumn,
    IOFailure,
    MissingColumn,
    MultipleGrids,
    UnparseableTimestamp,
    ValidationError,
)


@dataclass
class TimeTable:
    """M x F feature matrix indexed by strictly increasing timestamps."""

    timestamps: np.ndarray  # datetime64[s], shape (M,)
    feature_names: list[str]
    values: np.ndarray  # float64, shape (M, F)
    grid_id: str | None = None
    units: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.values = np.asarray(self.values, dtype=np.float64)
        self.feature_names = list(self.feature_names)
        if self.values.ndim != 2:
            raise ValidationError("values must be a 2-D matrix")
        if self.values.shape != (len(self.timestamps), len(self.feature_names)):
            raise ValidationError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.timestamps)} timestamps x {len(self.feature_names)} features"
            )
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValidationError("feature names must be unique")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > np.timedelta64(0, "s")):
            raise ValidationError("timestamps must be strictly increasing")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def years(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[Y]").astype(np.int64) + 1970

    def months(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[M]").astype(np.int64) % 12 + 1

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.feature_names.index(name)]
        except ValueError:
            raise MissingColumn(f"feature {name!r} not in table") from None

    def replace(self, **changes) -> "TimeTable":
        kw = dict(
            timestamps=self.timestamps,
            feature_names=self.feature_names,
            values=self.values,
            grid_id=self.grid_id,
            units=dict(self.units),
        )
        kw.update(changes)
        return TimeTable(**kw)

    def select(self, names: Sequence[str]) -> "TimeTable":
        idx = [self.feature_names.index(n) for n in names]
        return self.replace(feature_names=list(names), values=self.values[:, idx])


@dataclass
class WindowSet:
    windows: np.ndarray  # (M', T, F)
    T: int
    stride: int
    origin_index: np.ndarray  # row index of each window's last timestep
    timestamps: np.ndarray  # timestamps at origin_index
    feature_names: list[str]

    def __len__(self) -> int:
        return self.windows.shape[0]


@dataclass
class NormStats:
    feature_names: list[str]
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray  # bool: std == 0

    def to_json(self) -> dict:
        return {
            name: {"mean": float(m), "std": float(s), "degenerate": bool(d)}
            for name, m, s, d in zip(self.feature_names, self.mean, self.std, self.degenerate)
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NormStats":
        names = list(doc)
        return cls(
            feature_names=names,
            mean=np.array([doc[n]["mean"] for n in names], dtype=np.float64),
            std=np.array([doc[n]["std"] for n in names], dtype=np.float64),
            degenerate=np.array([doc[n].get("degenerate", doc[n]["std"] == 0) for n in names]),
        )


def format_float(x: float) -> str:
    return repr(float(x))


def format_timestamps(ts: np.ndarray) -> list[str]:
    ts = np.asarray(ts, dtype="datetime64[s]")
    if len(ts) and np.all(ts == ts.astype("datetime64[D]")):
        return list(np.datetime_as_string(ts, unit="D"))
    return list(np.datetime_as_string(ts, unit="s"))


def _parse_timestamps(raw: pd.Series) -> np.ndarray:
    try:
        parsed = pd.to_datetime(raw, utc=True, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise UnparseableTimestamp(str(exc)) from None
    if parsed.isna().any():
        bad = raw[parsed.isna()].iloc[0]
        raise UnparseableTimestamp(f"cannot parse timestamp {bad!r}")
    return parsed.dt.tz_localize(None).to_numpy().astype("datetime64[s]")


def load_grids(path: str | Path, schema: Sequence[str] | None = None) -> list[TimeTable]:
    """Read a CSV `timestamp[,grid_id],f1,...,fF` into one table per grid.

    With a schema, every declared feature must be present and no other
    columns are allowed. Rows are sorted by timestamp within each grid.
    """
    path = Path(path)
    if not path.is_file():
        raise IOFailure(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip", dtype={"timestamp": str, "grid_id": str}, encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IOFailure(str(exc)) from None
    if "timestamp" not in df.columns:
        raise MissingColumn("CSV has no 'timestamp' column")
    data_cols = [c for c in df.columns if c not in ("timestamp", "grid_id")]
    if schema is not None:
        schema = list(schema)
        missing = [c for c in schema if c not in data_cols]
        if missing:
            raise MissingColumn(f"missing feature column(s): {', '.join(missing)}")
        extra = [c for c in data_cols if c not in schema]
        if extra:
            raise ExtraColumn(f"unexpected column(s): {', '.join(extra)}")
        data_cols = schema
    ts = _parse_timestamps(df["timestamp"])
    try:
        values = df[data_cols].to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"non-numeric feature value: {exc}") from None
    grids = df["grid_id"].to_numpy() if "grid_id" in df.columns else np.array([None] * len(df), dtype=object)

    tables = []
    for gid in dict.fromkeys(grids):  # first-appearance order
        mask = grids == gid
        g_ts, g_vals = ts[mask], values[mask]
        order = np.argsort(g_ts, kind="stable")
        g_ts, g_vals = g_ts[order], g_vals[order]
        dup = np.nonzero(np.diff(g_ts) == np.timedelta64(0, "s"))[0]
        if len(dup):
            raise DuplicateTimestamp(
                f"duplicate timestamp {format_timestamps(g_ts[dup[:1]])[0]}"
                + (f" in grid {gid}" if gid is not None else "")
            )
        tables.append(TimeTable(g_ts, data_cols, g_vals, grid_id=None if gid is None else str(gid)))
    return tables


def load_table(path: str | Path, schema: Sequence[str] | None = None) -> TimeTable:
    tables = load_grids(path, schema)
    if len(tables) != 1:
        raise MultipleGrids(f"{path} holds {len(tables)} grids; use load_grids")
    return tables[0]


def write_tables(path: str | Path, tables: Sequence[TimeTable]) -> None:
    """Write one or more tables in the ingest CSV schema (byte-stable)."""
    tables = list(tables)
    names = tables[0].feature_names
    with_grid = any(t.grid_id is not None for t in tables)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp"] + (["grid_id"] if with_grid else []) + names)
            for t in tables:
                if t.feature_names != names:
                    raise ValidationError("all tables must share feature names")
                for stamp, row in zip(format_timestamps(t.timestamps), t.values):
                    lead = [stamp] + ([t.grid_id or ""] if with_grid else [])
                    w.writerow(lead + [format_float(v) for v in row])
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def write_table(path: str | Path, table: TimeTable) -> None:
    write_tables(path, [table])
