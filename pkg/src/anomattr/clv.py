"""Cluster-LSTM-VAE: one LSTM encoder per feature cluster, concatenated
Gaussian latents, a shared LSTM decoder that reconstructs the whole window.
The per-window anomaly score is KL + reconstruction NLL at the posterior mean.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .clustering import ClusterAssignment
from .errors import EmptyCluster, IOFailure, ModelDataMismatch, NonFiniteLoss, ShapeMismatch, ValidationError
from .table import NormStats, WindowSet, format_float, format_timestamps

log = logging.getLogger(__name__)


@dataclass
class ModelCheckpoint:
    feature_names: list[str]
    assignment: ClusterAssignment
    params: nn.Params
    T: int
    encoder_width: int = 32
    decoder_width: int = 32
    latent_dim: int = 4
    norm_stats: NormStats | None = None
    seed: int = 0

    @property
    def k(self) -> int:
        return self.assignment.k

    def clusters(self) -> list[list[int]]:
        return self.assignment.members(self.feature_names)

    def with_params(self, params: nn.Params) -> "ModelCheckpoint":
        return ModelCheckpoint(self.feature_names, self.assignment, params, self.T, self.encoder_width,
                               self.decoder_width, self.latent_dim, self.norm_stats, self.seed)


@dataclass
class ScoreSeries:
    timestamps: np.ndarray
    scores: np.ndarray
    origin_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.scores)


def build_model(
    assignment: ClusterAssignment,
    T: int,
    encoder_width: int = 32,
    latent_dim: int = 4,
    seed: int = 0,
    decoder_width: int | None = None,
    feature_names: list[str] | None = None,
) -> ModelCheckpoint:
    names = list(feature_names) if feature_names is not None else list(assignment.assignment)
    if not names:
        raise EmptyCluster("assignment holds no features")
    if min(T, encoder_width, latent_dim) < 1:
        raise ValidationError("T, encoder_width and latent_dim must be positive")
    decoder_width = decoder_width or encoder_width
    groups = assignment.members(names)
    if any(not g for g in groups):
        raise EmptyCluster("every cluster id in [0, k) needs at least one feature")
    rng = np.random.default_rng(seed)
    params: nn.Params = {}
    for c, idx in enumerate(groups):
        params |= nn.init_lstm(rng, len(idx), encoder_width, f"enc{c}.lstm")
        params |= nn.init_dense(rng, encoder_width, latent_dim, f"enc{c}.mu")
        params |= nn.init_dense(rng, encoder_width, latent_dim, f"enc{c}.logvar")
    params |= nn.init_lstm(rng, latent_dim * len(groups), decoder_width, "dec.lstm")
    params |= nn.init_dense(rng, decoder_width, len(names), "dec.out")
    return ModelCheckpoint(names, assignment, params, T, encoder_width, decoder_width, latent_dim, None, seed)


def _check_windows(model: ModelCheckpoint, x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[1] != model.T or x.shape[2] != len(model.feature_names):
        raise ShapeMismatch(
            f"windows of shape {x.shape} do not match model (T={model.T}, F={len(model.feature_names)})"
        )


def forward(model: ModelCheckpoint, params: nn.Params, x: np.ndarray, noise: np.ndarray | None):
    """Returns (recon, mu, logvar, cache). noise=None means z = mu."""
    caches = []
    mus, lvs = [], []
    for c, idx in enumerate(model.clusters()):
        p = f"enc{c}"
        hs, lc = nn.lstm_fwd(params[f"{p}.lstm.Wx"], params[f"{p}.lstm.Wh"], params[f"{p}.lstm.b"], x[:, :, idx])
        h_last = hs[:, -1]
        mu, mc = nn.dense_fwd(params[f"{p}.mu.W"], params[f"{p}.mu.b"], h_last)
        lv, vc = nn.dense_fwd(params[f"{p}.logvar.W"], params[f"{p}.logvar.b"], h_last)
        caches.append((lc, mc, vc, hs.shape))
        mus.append(mu)
        lvs.append(lv)
    mu = np.concatenate(mus, axis=1)
    logvar = np.concatenate(lvs, axis=1)
    z = mu if noise is None else mu + np.exp(0.5 * logvar) * noise
    dec_in = np.repeat(z[:, None, :], model.T, axis=1)
    hd, dc = nn.lstm_fwd(params["dec.lstm.Wx"], params["dec.lstm.Wh"], params["dec.lstm.b"], dec_in)
    recon, oc = nn.dense_fwd(params["dec.out.W"], params["dec.out.b"], hd)
    return recon, mu, logvar, (caches, dc, oc)


def loss_and_grad(model: ModelCheckpoint, params: nn.Params, x: np.ndarray, noise: np.ndarray):
    """Mean negative ELBO over the batch and its gradient w.r.t. every parameter."""
    B = x.shape[0]
    recon, mu, logvar, (caches, dc, oc) = forward(model, params, x, noise)
    kl = nn.kl_terms(mu, logvar)
    nll = nn.nll_terms(x, recon)
    loss = float((kl + nll).mean())

    g: nn.Params = {}
    dhd, g["dec.out.W"], g["dec.out.b"] = nn.dense_bwd((recon - x) / B, oc)
    d_in, g["dec.lstm.Wx"], g["dec.lstm.Wh"], g["dec.lstm.b"], _, _ = nn.lstm_bwd(dhd, dc)
    dz = d_in.sum(axis=1)
    std = np.exp(0.5 * logvar)
    dmu = dz + mu / B
    dlv = dz * noise * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / B
    L = model.latent_dim
    for c, (lc, mc, vc, hs_shape) in enumerate(caches):
        p = f"enc{c}"
        sl = slice(c * L, (c + 1) * L)
        dh1, g[f"{p}.mu.W"], g[f"{p}.mu.b"] = nn.dense_bwd(dmu[:, sl], mc)
        dh2, g[f"{p}.logvar.W"], g[f"{p}.logvar.b"] = nn.dense_bwd(dlv[:, sl], vc)
        dhs = np.zeros(hs_shape)
        dhs[:, -1] = dh1 + dh2
        _, g[f"{p}.lstm.Wx"], g[f"{p}.lstm.Wh"], g[f"{p}.lstm.b"], _, _ = nn.lstm_bwd(dhs, lc)
    return loss, g


def window_scores(model: ModelCheckpoint, x: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Noise-free KL + NLL per window."""
    _check_windows(model, x)
    out = np.empty(len(x))
    for s in range(0, len(x), batch):
        xb = x[s:s + batch]
        recon, mu, logvar, _ = forward(model, model.params, xb, None)
        out[s:s + batch] = nn.kl_terms(mu, logvar) + nn.nll_terms(xb, recon)
    return out


def score_series(model: ModelCheckpoint, windows: WindowSet) -> ScoreSeries:
    if list(windows.feature_names) != list(model.feature_names):
        raise ModelDataMismatch("window features differ from the model's features")
    scores = window_scores(model, windows.windows)
    if not np.all(np.isfinite(scores)):
        raise NonFiniteLoss("non-finite anomaly score")
    return ScoreSeries(windows.timestamps.copy(), scores, windows.origin_index.copy())


def train(
    model: ModelCheckpoint,
    train_windows: WindowSet,
    epochs: int = 50,
    patience: int = 10,
    batch: int = 64,
    lr: float = 1e-3,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[ModelCheckpoint, list[dict]]:
    """Adam on the mean negative ELBO with early stopping on a chronological
    hold-out (the last `val_fraction` of windows). Returns the best-validation
    checkpoint and per-epoch history.
    """
    if not 0 < val_fraction <= 0.5:
        raise ValidationError("val_fraction must lie in (0, 0.5]")
    if epochs < 1 or batch < 1 or patience < 0:
        raise ValidationError("epochs and batch must be positive, patience non-negative")
    x = train_windows.windows
    _check_windows(model, x)
    n_val = max(1, int(round(val_fraction * len(x))))
    if len(x) - n_val < 1:
        raise ValidationError("too few windows for the requested validation split")
    x_tr, x_val = x[:-n_val], x[-n_val:]

    rng = np.random.default_rng(seed)
    n_latent = model.latent_dim * model.k
    params = {k: v.copy() for k, v in model.params.items()}
    state = nn.AdamState.fresh(params)
    best_params, best_val = params, np.inf
    since_best = 0
    history = []
    batch_no = 0
    for epoch in range(epochs):
        order = rng.permutation(len(x_tr))
        total = 0.0
        for s in range(0, len(order), batch):
            xb = x_tr[order[s:s + batch]]
            noise = rng.standard_normal((len(xb), n_latent))
            loss, g = loss_and_grad(model, params, xb, noise)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at batch {batch_no}", batch_index=batch_no)
            params, state = nn.adam_step(params, g, state, lr)
            total += loss * len(xb)
            batch_no += 1
        val = float(window_scores(model.with_params(params), x_val).mean())
        if not np.isfinite(val):
            raise NonFiniteLoss(f"validation loss became {val} in epoch {epoch}", batch_index=batch_no - 1)
        history.append({"epoch": epoch + 1, "train_loss": total / len(x_tr), "val_loss": val})
        log.debug("epoch %d train %.4f val %.4f", epoch + 1, total / len(x_tr), val)
        if val < best_val:
            best_val, best_params, since_best = val, params, 0
        else:
            since_best += 1
        if since_best >= patience:
            break
    return model.with_params(best_params), history


# ---------------------------------------------------------------- I/O

def save_model(path: str | Path, model: ModelCheckpoint) -> None:
    meta = {
        "feature_names": model.feature_names,
        "assignment": model.assignment.to_json(),
        "T": model.T,
        "encoder_width": model.encoder_width,
        "decoder_width": model.decoder_width,
        "latent_dim": model.latent_dim,
        "norm_stats": model.norm_stats.to_json() if model.norm_stats is not None else None,
        "seed": model.seed,
    }
    nn.save_params(path, model.params, meta)


def load_model(path: str | Path) -> ModelCheckpoint:
    params, meta = nn.load_params(path)
    try:
        ns = meta.get("norm_stats")
        return ModelCheckpoint(
            feature_names=list(meta["feature_names"]),
            assignment=ClusterAssignment.from_json(meta["assignment"]),
            params=params,
            T=int(meta["T"]),
            encoder_width=int(meta["encoder_width"]),
            decoder_width=int(meta["decoder_width"]),
            latent_dim=int(meta["latent_dim"]),
            norm_stats=NormStats.from_json(ns) if ns else None,
            seed=int(meta.get("seed", 0)),
        )
    except KeyError as exc:
        raise ValidationError(f"checkpoint metadata lacks {exc}") from None


def write_scores(path: str | Path, scores: ScoreSeries) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "score"])
            for ts, s in zip(format_timestamps(scores.timestamps), scores.scores):
                w.writerow([ts, format_float(s)])
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def read_scores(path: str | Path) -> ScoreSeries:
    import pandas as pd

    try:
        df = pd.read_csv(path, float_precision="round_trip", dtype={"timestamp": str})
    except FileNotFoundError:
        raise IOFailure(f"score file not found: {path}") from None
    ts = pd.to_datetime(df["timestamp"], utc=True, format="ISO8601").dt.tz_localize(None)
    return ScoreSeries(ts.to_numpy().astype("datetime64[s]"), df["score"].to_numpy(dtype=np.float64),
                       np.arange(len(df)))
