"""Evaluation harness: classification metrics, Welch t-test, decadal anomaly
counts, and a stacked-LSTM classifier trained on a ranked feature subset."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .attribution import RankedFeatures
from .errors import (
    DegenerateLabels,
    EmptyInput,
    IOFailure,
    LengthMismatch,
    NonFiniteLoss,
    SingleClassTraining,
    TooFewSamples,
    UnknownFeatureInRanking,
    ValidationError,
)
from .preprocess import MELT_SEASON
from .table import TimeTable
from .threshold import ThresholdSeries

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    pr_auc: float
    roc_auc: float

    def row(self) -> list[float]:
        return [self.precision, self.recall, self.f1, self.pr_auc, self.roc_auc]


def _grouped_counts(scores: np.ndarray, labels: np.ndarray):
    """Cumulative (tp, fp) after each distinct score, highest score first."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group].astype(np.int64)
    fp = np.cumsum(~y)[last_of_group].astype(np.int64)
    return tp, fp


def roc_auc(scores, labels) -> float:
    """Trapezoidal ROC area with tied scores grouped.

    The sum is kept in integers and divided once, so it equals the pairwise
    concordance probability (ties counted 1/2) to the last bit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    tp, fp = _grouped_counts(s, y)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    twice_area = int(((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])).sum())
    return twice_area / (2 * P * N)


def pr_auc(scores, labels) -> float:
    """Trapezoidal area under precision-recall, starting from (recall 0, precision 1)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    P = int(y.sum())
    if P == 0 or P == len(y):
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    tp, fp = _grouped_counts(s, y)
    recall = np.r_[0.0, tp / P]
    precision = np.r_[1.0, tp / (tp + fp)]
    return float(np.sum((recall[1:] - recall[:-1]) * (precision[1:] + precision[:-1]) / 2.0))


def metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Point metrics for `score >= threshold` plus threshold-free AUCs.

    Precision is 0 when nothing is predicted positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if len(s) != len(y):
        raise LengthMismatch(f"{len(s)} scores vs {len(y)} labels")
    pred = s >= threshold
    tp = int((pred & y).sum())
    n_pred, n_pos = int(pred.sum()), int(y.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_pos if n_pos else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(precision, recall, f1, pr_auc(s, y), roc_auc(s, y))


# ---------------------------------------------------------------- t-test

_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, dof: float) -> float:
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass
class TTestResult:
    t_stat: float
    p_value: float
    dof: float


def welch_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided Welch unequal-variance t-test; t > 0 iff mean(a) > mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0:
        raise ValidationError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    dof = se2 * se2 / (va * va / (len(a) - 1) + vb * vb / (len(b) - 1))
    return TTestResult(float(t), t_two_sided_p(float(t), float(dof)), float(dof))


# ---------------------------------------------------------------- anomaly counts

def decade_label(year: int) -> str:
    start = ((year - 1) // 10) * 10 + 1
    return f"{start}-{start + 9}"


def _as_items(flags) -> list[tuple[str, ThresholdSeries]]:
    if isinstance(flags, ThresholdSeries):
        return [("", flags)]
    if isinstance(flags, Mapping):
        return list(flags.items())
    return list(flags)


def decadal_counts(flags, months: Iterable[int] = MELT_SEASON) -> list[tuple[str, int, float]]:
    """Mean flag count per grid for every (decade, month) seen in the data."""
    items = _as_items(flags)
    if not items:
        raise EmptyInput("no flag series supplied")
    months = set(months)
    totals: dict[tuple[str, int], int] = {}
    for _, series in items:
        ts = np.asarray(series.timestamps, dtype="datetime64[s]")
        years = ts.astype("datetime64[Y]").astype(np.int64) + 1970
        mons = ts.astype("datetime64[M]").astype(np.int64) % 12 + 1
        for y, m, f in zip(years, mons, series.flag):
            if m not in months:
                continue
            key = (decade_label(int(y)), int(m))
            totals[key] = totals.get(key, 0) + int(bool(f))
    if not totals:
        raise EmptyInput("no timestamps fall in the selected months")
    n = len(items)
    return [(d, m, totals[(d, m)] / n) for d, m in sorted(totals)]


def period_samples(flags, first_year: int, last_year: int, months: Iterable[int] = MELT_SEASON) -> np.ndarray:
    """Flag counts per (grid, year, month) within [first_year, last_year]."""
    months = set(months)
    out = []
    for _, series in _as_items(flags):
        ts = np.asarray(series.timestamps, dtype="datetime64[s]")
        years = ts.astype("datetime64[Y]").astype(np.int64) + 1970
        mons = ts.astype("datetime64[M]").astype(np.int64) % 12 + 1
        for y in range(first_year, last_year + 1):
            for m in sorted(months):
                sel = (years == y) & (mons == m)
                if sel.any():
                    out.append(int(np.asarray(series.flag)[sel].sum()))
    return np.asarray(out, dtype=np.float64)


def write_decadal(path: str | Path, rows: list[tuple[str, int, float]]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["decade", "month", "mean_count_per_grid"])
            for d, m, v in rows:
                w.writerow([d, m, repr(float(v))])
    except OSError as exc:
        raise IOFailure(str(exc)) from None


# ---------------------------------------------------------------- classifier

@dataclass
class ClassifierConfig:
    lstm_widths: tuple[int, ...] = (64, 32, 10)
    dropout: float = 0.2
    lr: float = 1e-3
    epochs: int = 50
    patience: int = 10
    batch: int = 64
    window: int = 7
    train_fraction: float = 0.7
    val_fraction: float = 0.1  # chronological tail of the training split, for early stopping
    threshold: float = 0.5

    def to_json(self) -> dict:
        d = asdict(self)
        d["lstm_widths"] = list(self.lstm_widths)
        return d


def _init_classifier(rng, n_in: int, cfg: ClassifierConfig) -> nn.Params:
    params: nn.Params = {}
    width = n_in
    for i, h in enumerate(cfg.lstm_widths):
        params |= nn.init_lstm(rng, width, h, f"lstm{i}")
        width = h
    params |= nn.init_dense(rng, width, 1, "out")
    return params


def _classifier_forward(params, x, cfg: ClassifierConfig, rng=None):
    """Logits (B,) and backward cache. Dropout is active only when rng is given."""
    caches = []
    h = x
    n_layers = len(cfg.lstm_widths)
    for i in range(n_layers):
        hs, c = nn.lstm_fwd(params[f"lstm{i}.Wx"], params[f"lstm{i}.Wh"], params[f"lstm{i}.b"], h)
        last = i == n_layers - 1
        out = nn.relu(hs[:, -1]) if last else hs
        mask = nn.dropout_mask(rng, out.shape, cfg.dropout) if rng is not None else None
        caches.append((c, hs, mask))
        h = out * mask if mask is not None else out
    logit, dc = nn.dense_fwd(params["out.W"], params["out.b"], h)
    return logit[:, 0], (caches, dc)


def _classifier_grad(params, x, y, w, cfg, rng):
    logit, (caches, dc) = _classifier_forward(params, x, cfg, rng)
    loss = float(np.mean(w * (np.logaddexp(0.0, logit) - y * logit)))
    dlogit = (w * (nn.sigmoid(logit) - y) / len(y))[:, None]
    g: nn.Params = {}
    dh, g["out.W"], g["out.b"] = nn.dense_bwd(dlogit, dc)
    for i in range(len(cfg.lstm_widths) - 1, -1, -1):
        c, hs, mask = caches[i]
        if mask is not None:
            dh = dh * mask
        if i == len(cfg.lstm_widths) - 1:
            dhs = np.zeros_like(hs)
            dhs[:, -1] = dh * (hs[:, -1] > 0)
        else:
            dhs = dh
        dh, g[f"lstm{i}.Wx"], g[f"lstm{i}.Wh"], g[f"lstm{i}.b"], _, _ = nn.lstm_bwd(dhs, c)
    return loss, g


def _predict(params, x, cfg, batch=2048) -> np.ndarray:
    out = np.empty(len(x))
    for s in range(0, len(x), batch):
        out[s:s + batch] = nn.sigmoid(_classifier_forward(params, x[s:s + batch], cfg)[0])
    return out


def _select_features(table: TimeTable, ranked: RankedFeatures, k: int) -> list[str]:
    names = ranked.names()
    unknown = [n for n in names if n not in table.feature_names]
    if unknown:
        raise UnknownFeatureInRanking(f"ranking names unknown feature(s): {', '.join(unknown)}")
    if not 1 <= k <= len(names):
        raise ValidationError(f"k={k} outside [1, {len(names)}]")
    chosen = set(names[:k])
    return [n for n in table.feature_names if n in chosen]  # table order


def classify_topk(
    table: TimeTable,
    labels,
    ranked: RankedFeatures,
    k: int,
    config: ClassifierConfig | None = None,
    seed: int = 0,
) -> MetricsReport:
    """Train the benchmark classifier on the top-k ranked features and report
    test metrics. Splits are chronological; inputs are standardized with
    training-split statistics; positives and negatives are weighted
    N / (2 N_class)."""
    cfg = config or ClassifierConfig()
    y_all = np.asarray(labels, dtype=bool)
    if len(y_all) != table.n_rows:
        raise LengthMismatch("labels are not aligned with the table")
    feats = _select_features(table, ranked, k)
    X = table.select(feats).values
    T = cfg.window
    if table.n_rows < T + 10:
        raise ValidationError("series too short for the classifier window")
    xw = np.ascontiguousarray(np.lib.stride_tricks.sliding_window_view(X, T, axis=0).transpose(0, 2, 1))
    yw = y_all[T - 1:]
    n_train = int(round(cfg.train_fraction * len(xw)))
    n_val = max(1, int(round(cfg.val_fraction * n_train)))
    train_rows = n_train + T - 1
    mean = X[:train_rows].mean(axis=0)
    std = X[:train_rows].std(axis=0)
    std[std == 0] = 1.0
    xw = (xw - mean) / std

    x_fit, y_fit = xw[:n_train - n_val], yw[:n_train - n_val]
    x_val, y_val = xw[n_train - n_val:n_train], yw[n_train - n_val:n_train]
    x_test, y_test = xw[n_train:], yw[n_train:]
    y_train = yw[:n_train]
    if y_train.all() or not y_train.any() or y_fit.all() or not y_fit.any():
        raise SingleClassTraining("training split holds a single class")
    n_pos = int(y_train.sum())
    w_pos = len(y_train) / (2.0 * n_pos)
    w_neg = len(y_train) / (2.0 * (len(y_train) - n_pos))

    def weights(y):
        return np.where(y, w_pos, w_neg)

    rng = np.random.default_rng(seed)
    params = _init_classifier(rng, len(feats), cfg)
    state = nn.AdamState.fresh(params)
    best, best_val, since = params, np.inf, 0
    yf = y_fit.astype(np.float64)
    wf = weights(y_fit)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_fit))
        for s in range(0, len(order), cfg.batch):
            b = order[s:s + cfg.batch]
            loss, g = _classifier_grad(params, x_fit[b], yf[b], wf[b], cfg, rng)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"classifier loss became {loss}", batch_index=s // cfg.batch)
            params, state = nn.adam_step(params, g, state, cfg.lr)
        logit = np.concatenate([_classifier_forward(params, x_val[s:s + 2048], cfg)[0]
                                for s in range(0, len(x_val), 2048)])
        val = float(np.mean(weights(y_val) * (np.logaddexp(0.0, logit) - y_val * logit)))
        log.debug("classifier epoch %d val %.5f", epoch + 1, val)
        if val < best_val:
            best, best_val, since = params, val, 0
        else:
            since += 1
        if since >= cfg.patience:
            break
    prob = _predict(best, x_test, cfg)
    return metrics(prob, y_test, cfg.threshold)


def compare_rankings(
    rankings: Mapping[str, RankedFeatures],
    k: int,
    table: TimeTable,
    labels,
    config: ClassifierConfig | None = None,
    seed: int = 0,
) -> dict[str, MetricsReport]:
    """classify_topk for each named ranking under identical config and seed."""
    for name, r in rankings.items():
        unknown = [n for n in r.names() if n not in table.feature_names]
        if unknown:
            raise UnknownFeatureInRanking(f"ranking {name!r} names unknown feature(s): {', '.join(unknown)}")
    return {name: classify_topk(table, labels, r, k, config, seed) for name, r in rankings.items()}


def write_report(path: str | Path, reports: Mapping[str, MetricsReport]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "precision", "recall", "f1", "pr_auc", "roc_auc"])
            for name, rep in reports.items():
                w.writerow([name] + [repr(float(v)) for v in rep.row()])
    except OSError as exc:
        raise IOFailure(str(exc)) from None
