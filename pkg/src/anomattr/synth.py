"""Seeded climate-like multivariate series with planted anomalies.

Features in a block share an AR(1) factor and a seasonal cycle (blocks are
offset in phase) and add idiosyncratic noise; every feature has unit variance
and features within a block correlate at rho. Anomalies
are additive level shifts of `magnitude` feature-standard-deviations on one
(or two) culprit features for 1-3 consecutive steps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, IOFailure, MissingColumn, IndexOutOfRange
from .table import TimeTable


@dataclass
class SynthConfig:
    n_features: int = 8
    length: int = 5000
    blocks: list[int] | None = None  # block sizes; default two equal halves
    rho: float = 0.8
    ar: float = 0.6
    period: float = 73.0
    amplitude: float = 1.0
    rate: float = 0.02
    culprit_policy: str = "single"  # or "multi"
    culprit_features: list[str] | None = None
    magnitude: float = 6.0
    event_length: tuple[int, int] = (1, 3)
    step_days: int = 5
    start_year: int = 1951
    seed: int = 0

    def feature_names(self) -> list[str]:
        return [f"f{i}" for i in range(self.n_features)]

    def block_sizes(self) -> list[int]:
        if self.blocks is not None:
            return list(self.blocks)
        half = self.n_features // 2
        return [half, self.n_features - half] if half else [self.n_features]

    def validate(self) -> None:
        if self.n_features < 2 or self.length < 2:
            raise InvalidConfig("need at least 2 features and 2 rows")
        if not 0 <= self.rate <= 0.2:
            raise InvalidConfig("rate must lie in [0, 0.2]")
        if not 0 <= self.rho < 1:
            raise InvalidConfig("rho must lie in [0, 1)")
        if not 0 <= self.ar < 1:
            raise InvalidConfig("ar must lie in [0, 1)")
        if self.rate > 0 and self.magnitude < 3:
            raise InvalidConfig("planted anomalies need magnitude >= 3")
        if sum(self.block_sizes()) != self.n_features or min(self.block_sizes()) < 1:
            raise InvalidConfig("block sizes must be positive and sum to n_features")
        if self.culprit_policy not in ("single", "multi"):
            raise InvalidConfig("culprit_policy must be 'single' or 'multi'")
        lo, hi = self.event_length
        if not 1 <= lo <= hi:
            raise InvalidConfig("event_length must satisfy 1 <= min <= max")
        if self.culprit_features is not None:
            unknown = set(self.culprit_features) - set(self.feature_names())
            if unknown or not self.culprit_features:
                raise InvalidConfig(f"bad culprit_features {sorted(unknown) or '[]'}")
        if self.step_days < 1:
            raise InvalidConfig("step_days must be positive")


@dataclass
class GroundTruth:
    flags: np.ndarray
    culprits: dict[int, list[str]] = field(default_factory=dict)
    log: list[tuple[int, str, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {str(t): list(c) for t, c in sorted(self.culprits.items())}


def noleap_timestamps(n: int, step_days: int = 5, start_year: int = 1951) -> np.ndarray:
    """Every `step_days`-th day of a 365-day calendar, restarting each Jan 1."""
    per_year = -(-365 // step_days)
    out = np.empty(n, dtype="datetime64[D]")
    for i in range(n):
        year, k = divmod(i, per_year)
        jan1 = np.datetime64(f"{start_year + year:04d}-01-01")
        doy = k * step_days
        date = jan1 + np.timedelta64(doy, "D")
        # skip Feb 29 so the day-of-year maps onto a 365-day calendar
        if (start_year + year) % 4 == 0 and ((start_year + year) % 100 != 0 or (start_year + year) % 400 == 0):
            if doy >= 59:
                date = date + np.timedelta64(1, "D")
        out[i] = date
    return out.astype("datetime64[s]")


def _place_events(rng, M, n_events, lo, hi):
    starts: list[tuple[int, int]] = []
    taken = np.zeros(M + 2, dtype=bool)
    attempts = 0
    while len(starts) < n_events and attempts < 100 * n_events:
        attempts += 1
        length = int(rng.integers(lo, hi + 1))
        s = int(rng.integers(0, M - length + 1))
        if taken[max(0, s - 1): s + length + 1].any():
            continue
        taken[s: s + length] = True
        starts.append((s, length))
    return sorted(starts)


def generate(config: SynthConfig) -> tuple[TimeTable, GroundTruth]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    M, F = config.length, config.n_features
    names = config.feature_names()

    factors = np.empty((M, len(config.block_sizes())))
    innov = rng.standard_normal(factors.shape) * np.sqrt(1.0 - config.ar ** 2)
    factors[0] = rng.standard_normal(factors.shape[1])
    for t in range(1, M):
        factors[t] = config.ar * factors[t - 1] + innov[t]
    block_of = np.repeat(np.arange(len(config.block_sizes())), config.block_sizes())
    # the shared block signal (AR factor + seasonal cycle) is rescaled to unit
    # variance, so features have unit variance and within-block correlation rho
    phase = np.pi * np.arange(factors.shape[1]) / factors.shape[1]
    t = np.arange(M)[:, None]
    seasonal = config.amplitude * np.sin(2 * np.pi * t / config.period + phase[None, :])
    shared = (factors + seasonal) / np.sqrt(1.0 + config.amplitude ** 2 / 2.0)
    idio = rng.standard_normal((M, F))
    values = np.sqrt(config.rho) * shared[:, block_of] + np.sqrt(1.0 - config.rho) * idio

    truth = GroundTruth(flags=np.zeros(M, dtype=bool))
    if config.rate > 0:
        lo, hi = config.event_length
        n_events = max(1, int(round(config.rate * M / ((lo + hi) / 2))))
        pool = config.culprit_features or names
        n_culprits = 1 if config.culprit_policy == "single" or len(pool) == 1 else 2
        for s, length in _place_events(rng, M, n_events, lo, hi):
            chosen = sorted(rng.choice(len(pool), size=n_culprits, replace=False))
            culprits = [pool[i] for i in chosen]
            amount = config.magnitude  # features have unit std
            for step in range(s, s + length):
                for c in culprits:
                    values[step, names.index(c)] += amount
                    truth.log.append((step, c, amount))
                truth.flags[step] = True
                truth.culprits[step] = list(culprits)

    ts = noleap_timestamps(M, config.step_days, config.start_year)
    return TimeTable(ts, names, values), truth


def inject(table: TimeTable, t: int, feature: str, magnitude: float) -> TimeTable:
    if not 0 <= t < table.n_rows:
        raise IndexOutOfRange(f"row {t} outside [0, {table.n_rows})")
    if feature not in table.feature_names:
        raise MissingColumn(f"feature {feature!r} not in table")
    values = table.values.copy()
    values[t, table.feature_names.index(feature)] += magnitude
    return table.replace(values=values)


def write_truth(path: str | Path, truth: GroundTruth | dict[str, GroundTruth]) -> None:
    if isinstance(truth, GroundTruth):
        doc = truth.to_json()
    else:
        doc = {gid: gt.to_json() for gid, gt in truth.items()}
    try:
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def config_from_dict(doc: dict) -> SynthConfig:
    known = set(SynthConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise InvalidConfig(f"unknown synth option(s): {sorted(unknown)}")
    doc = dict(doc)
    if "event_length" in doc:
        doc["event_length"] = tuple(doc["event_length"])
    return SynthConfig(**doc)


def config_to_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["event_length"] = list(cfg.event_length)
    return d
