"""Pipeline configuration: nested dataclasses loaded from JSON, unknown keys
rejected, every field defaulted."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import InvalidConfig, IOFailure


@dataclass
class PathsConfig:
    input: str | None = None
    checkpoint: str | None = None
    out_dir: str = "anomattr-out"
    truth: str | None = None  # optional ground truth (labels) for evaluation


@dataclass
class PreprocessConfig:
    schema: list[str] | None = None
    period_days: int | None = None  # None: input is already at model resolution
    drop_leap: bool = True
    months: list[int] | None = None  # e.g. [5, 6, 7, 8, 9]
    restart_on_gap: bool = True
    derive: bool = False
    T: int = 14
    stride: int = 1  # training windows only; scoring always uses stride 1
    clean_train: bool = True  # train on IQR-cleaned data, score the uncleaned table


@dataclass
class ClusteringConfig:
    k: int | None = None
    k_min: int = 1
    k_max: int = 4


@dataclass
class ModelConfig:
    encoder_width: int = 32
    decoder_width: int = 32
    latent_dim: int = 4
    epochs: int = 50
    patience: int = 10
    batch: int = 64
    lr: float = 1e-3
    val_fraction: float = 0.2
    pooled: bool = False


@dataclass
class ThresholdConfig:
    init_quantile: float = 0.98
    risk_q: float = 0.01
    window: int = 62


@dataclass
class AttributionConfig:
    membership: str = "exceeds-baseline"
    direction: str = "positive"
    tie: str = "lowest-index"
    everywhere: bool = False


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        a = self.attribution
        if a.direction not in ("positive", "negative", "absolute"):
            raise InvalidConfig(f"attribution.direction {a.direction!r} not recognised")
        if a.membership not in ("exceeds-baseline", "delta-vs-score"):
            raise InvalidConfig(f"attribution.membership {a.membership!r} not recognised")
        if a.tie != "lowest-index":
            raise InvalidConfig("attribution.tie supports only 'lowest-index'")
        if self.jobs < 1:
            raise InvalidConfig("jobs must be >= 1")
        if self.preprocess.T < 1 or self.preprocess.stride < 1:
            raise InvalidConfig("T and stride must be positive")
        if self.preprocess.months is not None and not set(self.preprocess.months) <= set(range(1, 13)):
            raise InvalidConfig("months must be in 1..12")

    def to_json(self) -> dict:
        return asdict(self)


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise InvalidConfig(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, doc, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IOFailure(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    return config_from_dict(doc)
