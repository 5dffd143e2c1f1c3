"""Stage functions shared by the CLI subcommands and the end-to-end run, so
both paths produce identical outputs for identical config and seed."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attribution as attr_mod
from . import clustering, clv, evaluation, preprocess, threshold
from .config import PipelineConfig
from .errors import IOFailure, ValidationError
from .table import NormStats, TimeTable, load_grids, write_table

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    scoring: TimeTable  # z-scored
    training: TimeTable  # z-scored, IQR-cleaned when configured
    stats: NormStats


def _concat(tables: list[TimeTable]) -> np.ndarray:
    return np.concatenate([t.values for t in tables], axis=0)


def resample(cfg: PipelineConfig, table: TimeTable) -> TimeTable:
    p = cfg.preprocess
    if p.drop_leap:
        table = preprocess.drop_leap_days(table)
    if p.months:
        table = preprocess.filter_months(table, p.months)
    if p.period_days:
        table = preprocess.aggregate_time(table, p.period_days, drop_leap=p.drop_leap,
                                          restart_on_gap=p.restart_on_gap)
    if p.derive:
        table = preprocess.derive_features(table)
    return table


def prepare(cfg: PipelineConfig, tables: list[TimeTable], stats: NormStats | None = None) -> list[Prepared]:
    tables = [resample(cfg, t) for t in tables]
    if stats is None and cfg.model.pooled and len(tables) > 1:
        pooled = TimeTable(np.arange(sum(t.n_rows for t in tables)).astype("datetime64[s]"),
                           tables[0].feature_names, _concat(tables))
        stats = preprocess.fit_norm(pooled)
    out = []
    for t in tables:
        z, st = preprocess.zscore(t, stats)
        train = preprocess.iqr_clean(z) if cfg.preprocess.clean_train else z
        out.append(Prepared(z, train, st))
    return out


def cluster(cfg: PipelineConfig, training: list[TimeTable]) -> clustering.ClusterAssignment:
    if len(training) == 1:
        table = training[0]
    else:
        table = TimeTable(np.arange(sum(t.n_rows for t in training)).astype("datetime64[s]"),
                          training[0].feature_names, _concat(training))
    corr = clustering.correlation_matrix(table)
    c = cfg.clustering
    if c.k is not None:
        return clustering.kmeans_features(corr, c.k, cfg.seed)
    k_max = min(c.k_max, len(corr.names))
    return clustering.select_k(corr, c.k_min, k_max, cfg.seed)


def fit(cfg: PipelineConfig, assignment, training: list[TimeTable], stats: NormStats | None):
    p, m = cfg.preprocess, cfg.model
    sets = [preprocess.window(t, p.T, p.stride) for t in training]
    windows = sets[0]
    if len(sets) > 1:
        windows = preprocess.WindowSet(np.concatenate([s.windows for s in sets]), p.T, p.stride,
                                       np.concatenate([s.origin_index for s in sets]),
                                       np.concatenate([s.timestamps for s in sets]), sets[0].feature_names)
    model = clv.build_model(assignment, p.T, m.encoder_width, m.latent_dim, cfg.seed,
                            decoder_width=m.decoder_width, feature_names=training[0].feature_names)
    model.norm_stats = stats
    return clv.train(model, windows, m.epochs, m.patience, m.batch, m.lr, m.val_fraction, cfg.seed)


def score(model: clv.ModelCheckpoint, table: TimeTable) -> clv.ScoreSeries:
    return clv.score_series(model, preprocess.window(table, model.T, 1))


def flag(cfg: PipelineConfig, scores: clv.ScoreSeries) -> threshold.ThresholdSeries:
    t = cfg.threshold
    window = min(t.window, len(scores))
    if window != t.window:
        log.warning("threshold window %d shrunk to series length %d", t.window, window)
    return threshold.dynamic_threshold(scores, window, t.init_quantile, t.risk_q)


def explain(cfg: PipelineConfig, model, table, scores, flags) -> attr_mod.AttributionSeries:
    a = cfg.attribution
    return attr_mod.attribute(model, table, scores, flags, direction=a.direction, membership=a.membership,
                              everywhere=a.everywhere, jobs=cfg.jobs)


def _grid_dir(out_dir: Path, grid_id: str | None) -> Path:
    d = out_dir if grid_id is None else out_dir / f"grid_{grid_id}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_json(path: Path, doc) -> None:
    try:
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Preprocess -> cluster -> train -> score -> threshold -> attribute -> rank.

    Per-grid by default (one model per grid); `model.pooled` trains one model
    on all grids. Returns a summary of written files.
    """
    if not cfg.paths.input:
        raise ValidationError("paths.input is required")
    out_dir = Path(cfg.paths.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(str(exc)) from None
    tables = load_grids(cfg.paths.input, cfg.preprocess.schema)
    prepared = prepare(cfg, tables)
    grids = [t.grid_id for t in tables]

    if cfg.model.pooled:
        assignment = cluster(cfg, [p.training for p in prepared])
        model, history = fit(cfg, assignment, [p.training for p in prepared], prepared[0].stats)
        models = [(model, history, assignment)] * len(prepared)
    else:
        models = []
        for p in prepared:
            assignment = cluster(cfg, [p.training])
            model, history = fit(cfg, assignment, [p.training], p.stats)
            models.append((model, history, assignment))

    written: dict[str, list[str]] = {}
    all_attr, all_flags = [], []
    for gid, p, (model, history, assignment) in zip(grids, prepared, models):
        d = _grid_dir(out_dir, gid)
        write_table(d / "preprocessed.csv", p.scoring)
        write_table(d / "train.csv", p.training)
        write_json(d / "norm_stats.json", p.stats.to_json())
        write_json(d / "assignment.json", assignment.to_json())
        clv.save_model(d / "model.json", model)
        write_json(d / "history.json", history)
        scores = score(model, p.scoring)
        clv.write_scores(d / "scores.csv", scores)
        flags = flag(cfg, scores)
        threshold.write_thresholds(d / "flags.csv", flags)
        attr = explain(cfg, model, p.scoring, scores, flags)
        attr_mod.write_attribution(d / "attributions.csv", attr)
        all_attr.append(attr)
        all_flags.append((gid or "", flags))
        written.setdefault("grids", []).append(str(d))

    ranked = attr_mod.rank_features(all_attr, n_grids=len(all_attr))
    attr_mod.write_ranking(out_dir / "ranking.json", ranked)
    months = cfg.preprocess.months or list(range(1, 13))
    evaluation.write_decadal(out_dir / "decadal.csv", evaluation.decadal_counts(all_flags, months))
    written["ranking"] = [str(out_dir / "ranking.json")]
    written["decadal"] = [str(out_dir / "decadal.csv")]
    return written
