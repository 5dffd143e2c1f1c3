"""Command-line entry point: `anomattr <subcommand> ...`.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O failure.
Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attribution as attr_mod
from . import clustering, clv, evaluation, pipeline, synth, threshold
from .config import PipelineConfig, load_config
from .errors import AnomAttrError, IOFailure, ValidationError
from .table import NormStats, TimeTable, load_grids, write_table, write_tables

log = logging.getLogger("anomattr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _int_list(text: str) -> list[int]:
    return [int(s) for s in _csv_list(text)]


def _opt(p, flag, dest, **kw):
    """Flag that overrides the config field `dest` (dotted path) when given."""
    p.add_argument(flag, dest=dest, default=None, **kw)


def _common(p, out_required=False):
    p.add_argument("--config", help="JSON PipelineConfig; flags override it")
    _opt(p, "--seed", "seed", type=int)
    _opt(p, "--jobs", "jobs", type=int)
    p.add_argument("--out", required=out_required)


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    for key, value in vars(args).items():
        if value is None or key.startswith("_"):
            continue
        parts = key.split(".")
        if len(parts) == 1 and key not in ("seed", "jobs"):
            continue
        target = cfg
        for part in parts[:-1]:
            target = getattr(target, part)
        setattr(target, parts[-1], value)
    cfg.validate()
    return cfg


def _pick_grid(path, schema, grid) -> TimeTable:
    tables = load_grids(path, schema)
    if grid is not None:
        for t in tables:
            if t.grid_id == grid:
                return t
        raise ValidationError(f"grid {grid!r} not found in {path}")
    if len(tables) != 1:
        raise ValidationError(f"{path} holds {len(tables)} grids; pick one with --grid")
    return tables[0]


def _write_json(path, doc):
    if path is None:
        sys.stdout.write(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    else:
        pipeline.write_json(Path(path), doc)


def _read_stats(path) -> NormStats:
    try:
        return NormStats.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise IOFailure(f"stats file not found: {path}") from None


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IOFailure(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    doc = _read_json(args.config) if args.config else {}
    overrides = {
        "seed": args.seed, "length": args.length, "n_features": args.features, "rate": args.rate,
        "magnitude": args.magnitude, "rho": args.rho, "amplitude": args.amplitude,
        "step_days": args.step_days, "start_year": args.start_year,
        "culprit_features": _csv_list(args.culprits) if args.culprits else None,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    base = synth.config_from_dict(doc)
    tables, truths = [], {}
    for g in range(args.grids):
        cfg = base
        if args.grids > 1:
            child = int(np.random.SeedSequence([base.seed, g]).generate_state(1)[0])
            cfg = synth.config_from_dict({**synth.config_to_dict(base), "seed": child})
        table, truth = synth.generate(cfg)
        if args.grids > 1:
            table.grid_id = f"g{g:03d}"
            truths[table.grid_id] = truth
        else:
            truths = truth
        tables.append(table)
    write_tables(args.out, tables)
    if args.truth_out:
        synth.write_truth(args.truth_out, truths)


def cmd_preprocess(args):
    cfg = _load_cfg(args)
    tables = load_grids(args.input, cfg.preprocess.schema)
    stats = _read_stats(args.stats) if args.stats else None
    prepared = pipeline.prepare(cfg, tables, stats)
    write_tables(args.out, [p.scoring for p in prepared])
    if args.clean_out:
        write_tables(args.clean_out, [p.training for p in prepared])
    if args.stats_out:
        if len(prepared) == 1:
            doc = prepared[0].stats.to_json()
        else:
            doc = {t.grid_id: p.stats.to_json() for t, p in zip(tables, prepared)}
        pipeline.write_json(Path(args.stats_out), doc)


def cmd_cluster(args):
    cfg = _load_cfg(args)
    table = _pick_grid(args.input, cfg.preprocess.schema, args.grid)
    assignment = pipeline.cluster(cfg, [table])
    _write_json(args.out, assignment.to_json())


def cmd_train(args):
    cfg = _load_cfg(args)
    table = _pick_grid(args.input, cfg.preprocess.schema, args.grid)
    assignment = clustering.ClusterAssignment.from_json(_read_json(args.assignment))
    stats = _read_stats(args.stats) if args.stats else None
    model, history = pipeline.fit(cfg, assignment, [table], stats)
    clv.save_model(args.out, model)
    if args.history_out:
        pipeline.write_json(Path(args.history_out), history)


def cmd_score(args):
    cfg = _load_cfg(args)
    model = clv.load_model(args.model)
    table = _pick_grid(args.input, cfg.preprocess.schema, args.grid)
    clv.write_scores(args.out, pipeline.score(model, table))


def cmd_threshold(args):
    cfg = _load_cfg(args)
    scores = clv.read_scores(args.scores)
    threshold.write_thresholds(args.out, pipeline.flag(cfg, scores))


def cmd_attribute(args):
    cfg = _load_cfg(args)
    model = clv.load_model(args.model)
    table = _pick_grid(args.input, cfg.preprocess.schema, args.grid)
    scores = clv.read_scores(args.scores)
    flags = threshold.read_thresholds(args.flags)
    attr_mod.write_attribution(args.out, pipeline.explain(cfg, model, table, scores, flags))


def cmd_rank(args):
    series = [attr_mod.read_attribution(p) for p in args.attributions]
    ranked = attr_mod.rank_features(series, n_grids=args.n_grids or len(series))
    if args.top_k:
        ranked = attr_mod.topk(ranked, args.top_k)
    if args.out:
        attr_mod.write_ranking(args.out, ranked)
    else:
        sys.stdout.write(json.dumps(ranked.to_json(), indent=1) + "\n")


def _read_labels(path, table: TimeTable) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IOFailure(f"labels file not found: {path}")
    if path.suffix == ".json":
        doc = _read_json(path)
        labels = np.zeros(table.n_rows, dtype=bool)
        for key in doc:
            i = int(key)
            if not 0 <= i < table.n_rows:
                raise ValidationError(f"label index {i} outside the table")
            labels[i] = True
        return labels
    import pandas as pd

    df = pd.read_csv(path)
    if "label" not in df.columns or len(df) != table.n_rows:
        raise ValidationError("labels CSV needs a 'label' column with one row per table row")
    return df["label"].astype(int).to_numpy().astype(bool)


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    table = _pick_grid(args.input, cfg.preprocess.schema, args.grid)
    labels = _read_labels(args.labels, table)
    rankings = {"ours": attr_mod.read_ranking(args.ranking)}
    for spec in args.external or []:
        name, _, path = spec.partition("=")
        if not path:
            raise ValidationError(f"--external expects NAME=PATH, got {spec!r}")
        rankings[name] = attr_mod.read_ranking(path)
    if args.random:
        rng = np.random.default_rng(cfg.seed)
        names = list(rng.permutation(table.feature_names))
        rankings["random"] = attr_mod.RankedFeatures([(n, float(len(names) - i)) for i, n in enumerate(names)])
    clf = evaluation.ClassifierConfig()
    if args.clf_epochs is not None:
        clf.epochs = args.clf_epochs
    reports = evaluation.compare_rankings(rankings, args.k, table, labels, clf, cfg.seed)
    if args.out:
        evaluation.write_report(args.out, reports)
    else:
        _write_json(None, {k: vars(v) for k, v in reports.items()})


def _sample(text: str) -> list[float]:
    p = Path(text)
    if p.is_file():
        vals = []
        for line in p.read_text(encoding="utf-8").splitlines():
            vals.extend(float(v) for v in _csv_list(line))
        return vals
    try:
        return [float(v) for v in _csv_list(text)]
    except ValueError:
        raise IOFailure(f"{text!r} is neither a readable file nor a comma-separated list") from None


def _years(text: str) -> tuple[int, int]:
    first, _, last = text.partition("-")
    try:
        return int(first), int(last or first)
    except ValueError:
        raise ValidationError(f"period must look like 1951-1980, got {text!r}") from None


def cmd_ttest(args):
    if args.flags:
        if not (args.period_a and args.period_b):
            raise ValidationError("--flags needs --period-a and --period-b")
        items = [(Path(p).parent.name, threshold.read_thresholds(p)) for p in args.flags]
        months = _int_list(args.months) if args.months else list(range(1, 13))
        a = evaluation.period_samples(items, *_years(args.period_a), months)
        b = evaluation.period_samples(items, *_years(args.period_b), months)
    elif args.a and args.b:
        a, b = _sample(args.a), _sample(args.b)
    else:
        raise ValidationError("give --a and --b, or --flags with two periods")
    res = evaluation.welch_ttest(a, b)
    _write_json(args.out, {"t_stat": res.t_stat, "p_value": res.p_value, "dof": res.dof})


def cmd_decadal(args):
    items = [(Path(p).parent.name, threshold.read_thresholds(p)) for p in args.flags]
    months = _int_list(args.months) if args.months else list(range(1, 13))
    evaluation.write_decadal(args.out, evaluation.decadal_counts(items, months))


def cmd_pipeline(args):
    cfg = _load_cfg(args)
    if args.out:
        cfg.paths.out_dir = args.out
    summary = pipeline.run_pipeline(cfg)
    log.info("pipeline wrote %s", summary)


# ---------------------------------------------------------------- parser

def _model_flags(p):
    _opt(p, "--T", "preprocess.T", type=int)
    _opt(p, "--stride", "preprocess.stride", type=int)
    _opt(p, "--encoder-width", "model.encoder_width", type=int)
    _opt(p, "--decoder-width", "model.decoder_width", type=int)
    _opt(p, "--latent-dim", "model.latent_dim", type=int)
    _opt(p, "--epochs", "model.epochs", type=int)
    _opt(p, "--patience", "model.patience", type=int)
    _opt(p, "--batch", "model.batch", type=int)
    _opt(p, "--lr", "model.lr", type=float)
    _opt(p, "--val-fraction", "model.val_fraction", type=float)


def _prep_flags(p):
    _opt(p, "--schema", "preprocess.schema", type=_csv_list)
    _opt(p, "--period-days", "preprocess.period_days", type=int)
    _opt(p, "--months", "preprocess.months", type=_int_list)
    p.add_argument("--keep-leap", dest="preprocess.drop_leap", action="store_const", const=False, default=None)
    p.add_argument("--derive", dest="preprocess.derive", action="store_const", const=True, default=None)
    p.add_argument("--no-clean", dest="preprocess.clean_train", action="store_const", const=False, default=None)


def _threshold_flags(p):
    _opt(p, "--window", "threshold.window", type=int)
    _opt(p, "--init-quantile", "threshold.init_quantile", type=float)
    _opt(p, "--risk-q", "threshold.risk_q", type=float)


def _attr_flags(p):
    _opt(p, "--direction", "attribution.direction", choices=["positive", "negative", "absolute"])
    _opt(p, "--membership", "attribution.membership", choices=["exceeds-baseline", "delta-vs-score"])
    p.add_argument("--everywhere", dest="attribution.everywhere", action="store_const", const=True, default=None)


def _cluster_flags(p):
    _opt(p, "--k", "clustering.k", type=int)
    _opt(p, "--k-min", "clustering.k_min", type=int)
    _opt(p, "--k-max", "clustering.k_max", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anomattr", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("synth", help="generate a seeded synthetic table")
    _common(p, out_required=True)
    p.add_argument("--truth-out")
    p.add_argument("--length", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--magnitude", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--step-days", type=int)
    p.add_argument("--start-year", type=int)
    p.add_argument("--culprits", help="comma-separated culprit feature pool")
    p.add_argument("--grids", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("preprocess", help="resample, derive, z-score and IQR-clean a table")
    _common(p, out_required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--clean-out")
    p.add_argument("--stats-out")
    p.add_argument("--stats", help="apply these NormStats instead of fitting")
    _prep_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = subs.add_parser("cluster", help="correlation k-means over features")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--grid")
    _opt(p, "--schema", "preprocess.schema", type=_csv_list)
    _cluster_flags(p)
    p.set_defaults(func=cmd_cluster)

    p = subs.add_parser("train", help="train a Cluster-LSTM-VAE")
    _common(p, out_required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--stats")
    p.add_argument("--history-out")
    p.add_argument("--grid")
    _opt(p, "--schema", "preprocess.schema", type=_csv_list)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("score", help="anomaly scores per timestamp")
    _common(p, out_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--grid")
    _opt(p, "--schema", "preprocess.schema", type=_csv_list)
    p.set_defaults(func=cmd_score)

    p = subs.add_parser("threshold", help="dynamic POT thresholds and flags")
    _common(p, out_required=True)
    p.add_argument("--scores", required=True)
    _threshold_flags(p)
    p.set_defaults(func=cmd_threshold)

    p = subs.add_parser("attribute", help="counterfactual attribution of flagged anomalies")
    _common(p, out_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--flags", required=True)
    p.add_argument("--grid")
    _opt(p, "--schema", "preprocess.schema", type=_csv_list)
    _attr_flags(p)
    p.set_defaults(func=cmd_attribute)

    p = subs.add_parser("rank", help="rank features by attribution frequency")
    _common(p)
    p.add_argument("--attributions", nargs="+", required=True)
    p.add_argument("--n-grids", type=int)
    p.add_argument("--top-k", type=int)
    p.set_defaults(func=cmd_rank)

    p = subs.add_parser("evaluate", help="top-k classifier comparison of rankings")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--labels", required=True, help="ground-truth JSON sidecar or CSV with a 'label' column")
    p.add_argument("--ranking", required=True)
    p.add_argument("--external", action="append", metavar="NAME=PATH")
    p.add_argument("--random", action="store_true", help="add a seeded random ranking")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--clf-epochs", type=int)
    p.add_argument("--grid")
    _opt(p, "--schema", "preprocess.schema", type=_csv_list)
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("ttest", help="Welch two-sample t-test")
    _common(p)
    p.add_argument("--a", help="file or comma-separated values")
    p.add_argument("--b", help="file or comma-separated values")
    p.add_argument("--flags", nargs="+", help="flag files; samples are counts per (grid, year, month)")
    p.add_argument("--period-a", help="years of the first sample, e.g. 1951-1980")
    p.add_argument("--period-b", help="years of the second sample, e.g. 1991-2020")
    p.add_argument("--months", help="comma-separated months to count (default all)")
    p.set_defaults(func=cmd_ttest)

    p = subs.add_parser("decadal", help="mean monthly anomaly counts per grid by decade")
    _common(p, out_required=True)
    p.add_argument("--flags", nargs="+", required=True)
    p.add_argument("--months")
    p.set_defaults(func=cmd_decadal)

    p = subs.add_parser("pipeline", help="end-to-end run from a config")
    _common(p)
    _opt(p, "--input", "paths.input")
    _prep_flags(p)
    _cluster_flags(p)
    _model_flags(p)
    _threshold_flags(p)
    _attr_flags(p)
    p.add_argument("--pooled", dest="model.pooled", action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ANOMATTR_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except AnomAttrError as exc:
        sys.stderr.write(json.dumps(exc.to_json()) + "\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "IOFailure", "message": str(exc)}) + "\n")
        return 4
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
