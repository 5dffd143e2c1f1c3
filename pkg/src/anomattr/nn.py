"""Small differentiable toolkit on numpy: dense and LSTM layers with
hand-written backward passes, Gaussian latent heads, the negative ELBO,
Adam, and a central-difference gradient checker.

Parameters live in plain dicts of float64 arrays. Weight matrices are
stored (out, in) so a layer computes ``x @ W.T + b`` on batched input.
LSTM gate blocks are ordered input, forget, candidate, output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import IOFailure, NonFiniteLoss, ShapeMismatch, ValidationError

Params = dict[str, np.ndarray]
LossFn = Callable[[Params], tuple[float, Params]]

LOG_2PI = float(np.log(2.0 * np.pi))
CHECKPOINT_VERSION = "anomattr-params/1"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0.0)


_ACTIVATIONS = {"relu", "sigmoid", "identity"}


# ---------------------------------------------------------------- init

def glorot(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, prefix: str) -> Params:
    return {f"{prefix}.W": glorot(rng, n_out, n_in), f"{prefix}.b": np.zeros(n_out)}


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int, prefix: str) -> Params:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate bias
    return {
        f"{prefix}.Wx": glorot(rng, 4 * hidden, n_in),
        f"{prefix}.Wh": glorot(rng, 4 * hidden, hidden),
        f"{prefix}.b": b,
    }


def sub(params: Params, prefix: str) -> Params:
    """View of the entries under `prefix.` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# ---------------------------------------------------------------- dense

def dense_fwd(W, b, x, activation="identity"):
    if activation not in _ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"dense input width {x.shape[-1]} != {W.shape[1]}")
    z = x @ W.T + b
    if activation == "relu":
        y = relu(z)
    elif activation == "sigmoid":
        y = sigmoid(z)
    else:
        y = z
    return y, (x, z, y, activation, W)


def dense_bwd(dy, cache):
    x, z, y, activation, W = cache
    if activation == "relu":
        dz = dy * (z > 0)
    elif activation == "sigmoid":
        dz = dy * y * (1.0 - y)
    else:
        dz = dy
    x2 = x.reshape(-1, x.shape[-1])
    dz2 = dz.reshape(-1, dz.shape[-1])
    return dz @ W, dz2.T @ x2, dz2.sum(axis=0)


def dense_forward(params: Params, x, activation: str = "identity") -> np.ndarray:
    """activation(W x + b) for a vector or a batch of row vectors."""
    return dense_fwd(params["W"], params["b"], np.asarray(x, dtype=np.float64), activation)[0]


# ---------------------------------------------------------------- LSTM

def lstm_fwd(Wx, Wh, b, x, h0=None, c0=None):
    """Batched LSTM over x of shape (B, T, d). Returns (hs (B, T, H), cache)."""
    B, T, d = x.shape
    H = Wh.shape[1]
    if d != Wx.shape[1]:
        raise ShapeMismatch(f"LSTM input width {d} != {Wx.shape[1]}")
    h = np.zeros((B, H)) if h0 is None else np.broadcast_to(h0, (B, H)).astype(np.float64)
    c = np.zeros((B, H)) if c0 is None else np.broadcast_to(c0, (B, H)).astype(np.float64)
    xa = x @ Wx.T + b  # (B, T, 4H)
    hs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    h_init, c_init = h, c
    WhT = Wh.T
    for t in range(T):
        a = xa[:, t] + h @ WhT
        g = np.empty_like(a)
        g[:, :2 * H] = sigmoid(a[:, :2 * H])
        g[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        g[:, 3 * H:] = sigmoid(a[:, 3 * H:])
        c = g[:, H:2 * H] * c + g[:, :H] * g[:, 2 * H:3 * H]
        h = g[:, 3 * H:] * np.tanh(c)
        gates[:, t] = g
        cs[:, t] = c
        hs[:, t] = h
    return hs, (x, Wx, Wh, h_init, c_init, hs, cs, gates)


def lstm_bwd(dhs, cache, dh_last=None, dc_last=None):
    """Backprop through time. `dhs` is dL/dh_t for every step (B, T, H)."""
    x, Wx, Wh, h_init, c_init, hs, cs, gates = cache
    B, T, H = hs.shape
    dh_next = np.zeros((B, H)) if dh_last is None else dh_last.copy()
    dc_next = np.zeros((B, H)) if dc_last is None else dc_last.copy()
    da_all = np.empty((B, T, 4 * H))
    dWh = np.zeros_like(Wh)
    for t in range(T - 1, -1, -1):
        g = gates[:, t]
        i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        c_prev = cs[:, t - 1] if t > 0 else c_init
        h_prev = hs[:, t - 1] if t > 0 else h_init
        tc = np.tanh(cs[:, t])
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da = da_all[:, t]
        da[:, :H] = dc * gg * i * (1.0 - i)
        da[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        da[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dWh += da.T @ h_prev
        dh_next = da @ Wh
        dc_next = dc * f
    flat = da_all.reshape(-1, 4 * H)
    dWx = flat.T @ x.reshape(-1, x.shape[-1])
    db = flat.sum(axis=0)
    dx = da_all @ Wx
    return dx, dWx, dWh, db, dh_next, dc_next


def lstm_forward(params: Params, seq, h0=None, c0=None):
    """Run an LSTM over a (T, d) sequence or a (B, T, d) batch.

    Returns (hidden states, final h, final c).
    """
    seq = np.asarray(seq, dtype=np.float64)
    single = seq.ndim == 2
    x = seq[None] if single else seq
    hs, cache = lstm_fwd(params["Wx"], params["Wh"], params["b"], x, h0, c0)
    cs = cache[6]
    if single:
        return hs[0], hs[0, -1], cs[0, -1]
    return hs, hs[:, -1], cs[:, -1]


# ---------------------------------------------------------------- latent / loss

@dataclass
class LatentDist:
    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.logvar = np.asarray(self.logvar, dtype=np.float64)
        if self.mu.shape != self.logvar.shape:
            raise ShapeMismatch("mu and logvar must have equal shapes")


def reparameterize(dist: LatentDist, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != dist.mu.shape:
        raise ShapeMismatch(f"noise shape {noise.shape} != latent shape {dist.mu.shape}")
    return dist.mu + np.exp(0.5 * dist.logvar) * noise


def kl_terms(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over the last axis."""
    return 0.5 * (mu * mu + (np.expm1(logvar) - logvar)).sum(axis=-1)  # expm1: no cancellation near 0


def nll_terms(x, recon):
    """Unit-variance Gaussian negative log-likelihood summed over all but axis 0."""
    r = (x - recon).reshape(len(x), -1)
    return 0.5 * ((r * r).sum(axis=1) + r.shape[1] * LOG_2PI)


def elbo_loss(x, recon, dist: LatentDist) -> tuple[float, float, float]:
    """Negative ELBO for a single example: (kl + nll, kl, nll)."""
    x = np.asarray(x, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if x.shape != recon.shape:
        raise ShapeMismatch(f"x shape {x.shape} != recon shape {recon.shape}")
    kl = float(kl_terms(dist.mu.ravel(), dist.logvar.ravel()))
    nll = float(nll_terms(x.reshape(1, -1), recon.reshape(1, -1))[0])
    return kl + nll, kl, nll


# ---------------------------------------------------------------- gradients

def grad(loss_fn: LossFn, params: Params) -> Params:
    """Analytic gradient of a loss built from this module's backward passes.

    `loss_fn(params)` must return ``(loss, grads)``.
    """
    loss, g = loss_fn(params)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss evaluated to {loss}")
    missing = set(params) - set(g)
    if missing:
        raise ShapeMismatch(f"loss_fn returned no gradient for {sorted(missing)}")
    return g


def grad_check(loss_fn: LossFn, params: Params, eps: float = 1e-5, floor: float | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error is |a - n| / max(|a|, |n|, floor). Central-difference
    round-off grows with |loss|, so the default floor is 1e-6 * max(1, |loss|);
    without it, coordinates whose true gradient is ~0 report pure noise.
    """
    if not 0 < eps <= 1e-2:
        raise ValidationError("eps must lie in (0, 1e-2]")
    analytic = grad(loss_fn, params)
    if floor is None:
        floor = 1e-6 * max(1.0, abs(loss_fn(params)[0]))
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(work)[0]
            flat[i] = orig - eps
            down = loss_fn(work)[0]
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Params, **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **hyper,
        )


def adam_step(params: Params, grads: Params, state: AdamState, lr: float = 1e-3) -> tuple[Params, AdamState]:
    if lr < 0:
        raise ValidationError("learning rate must be non-negative")
    if not state.m:
        state = AdamState.fresh(params, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v, b1, b2, state.eps)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted dropout mask: kept units scaled by 1/(1-rate)."""
    if rate <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------- serialization

def params_to_json(params: Params) -> dict:
    return {
        name: {"shape": list(arr.shape), "values": [float(v) for v in np.asarray(arr).reshape(-1)]}
        for name, arr in sorted(params.items())
    }


def params_from_json(doc: dict) -> Params:
    out = {}
    for name, entry in doc.items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"parameter {name} holds non-finite values")
        out[name] = arr
    return out


def save_params(path: str | Path, params: Params, meta: dict | None = None) -> None:
    doc = {"version": CHECKPOINT_VERSION, "meta": meta or {}, "params": params_to_json(params)}
    try:
        Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def load_params(path: str | Path) -> tuple[Params, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IOFailure(f"checkpoint not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise IOFailure(str(exc)) from None
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {doc.get('version')!r}")
    return params_from_json(doc["params"]), doc.get("meta", {})
