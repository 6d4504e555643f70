"""Toy frame-synchronous speech encoder with a CTC head and exact manual gradients.

Architecture (per frame ``t``, context half-width ``w``)::

    h1[t] = W_in x[t] + b_in
    h2[t] = tanh(W_ctx [h1[t-w]; ...; h1[t+w]] + b_ctx)     # zero outside the utterance
    e[t]  = W_emb h2[t] + b_emb                              # speech embedding
    z[t]  = W_out e[t] + b_out                               # CTC logits, blank = row 0

Batches are processed by concatenating utterances along time; the context
window never crosses an utterance boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PARAM_NAMES = ("W_in", "b_in", "W_ctx", "b_ctx", "W_emb", "b_emb", "W_out", "b_out")


@dataclass(frozen=True)
class ModelShape:
    feature_dim: int = 16
    hidden: int = 32
    embed: int = 16
    context: int = 1
    n_labels: int = 37  # phonemes, excluding blank

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H, E, F, w, K = self.hidden, self.embed, self.feature_dim, self.context, self.n_labels + 1
        return {
            "W_in": (H, F),
            "b_in": (H,),
            "W_ctx": (H, H * (2 * w + 1)),
            "b_ctx": (H,),
            "W_emb": (E, H),
            "b_emb": (E,),
            "W_out": (K, E),
            "b_out": (K,),
        }


class ModelParams(dict):
    """Ordered mapping of parameter name -> float64 array, plus its shape spec."""

    def __init__(self, shape: ModelShape, arrays=None):
        super().__init__()
        self.shape = shape
        want = shape.shapes()
        arrays = arrays or {k: np.zeros(s) for k, s in want.items()}
        for name in PARAM_NAMES:
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != want[name]:
                raise ValueError(f"{name}: expected shape {want[name]}, got {a.shape}")
            self[name] = a

    def copy(self) -> "ModelParams":
        return ModelParams(self.shape, {k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.shape)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(self[name]).tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.values())


def init_params(shape: ModelShape, rng: np.random.Generator) -> ModelParams:
    params = {}
    for name, s in shape.shapes().items():
        if name.startswith("W"):
            fan_in, fan_out = s[1], s[0]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-lim, lim, size=s)
        else:
            params[name] = np.zeros(s)
    p = ModelParams(shape, params)
    round_to_float32(p)
    return p


def round_to_float32(arrays: dict) -> None:
    """Snap values to float32-representable doubles so checkpoints round-trip exactly."""
    for k, v in arrays.items():
        arrays[k] = v.astype(np.float32).astype(np.float64)


@dataclass
class BatchCache:
    x: np.ndarray
    h1: np.ndarray
    xc: np.ndarray
    h2: np.ndarray
    e: np.ndarray
    idx: list
    valid: list
    offsets: np.ndarray


def _context_index(lengths: Sequence[int], w: int):
    N = int(sum(lengths))
    uid = np.repeat(np.arange(len(lengths)), lengths)
    pos = np.arange(N)
    idx, valid = [], []
    for k in range(-w, w + 1):
        j = pos + k
        ok = (j >= 0) & (j < N)
        jc = np.clip(j, 0, N - 1)
        ok &= uid[jc] == uid
        idx.append(jc)
        valid.append(ok)
    return idx, valid


def forward_batch(params: ModelParams, frames_list: Sequence[np.ndarray]):
    """Return ``(embeddings, logits, cache)``; the first two are per-utterance lists."""
    F = params.shape.feature_dim
    for f in frames_list:
        if f.ndim != 2 or f.shape[0] != F or f.shape[1] < 1:
            raise ValueError(f"frames must be [{F}, T>=1], got {f.shape}")
    lengths = [f.shape[1] for f in frames_list]
    x = np.concatenate([np.asarray(f, dtype=np.float64) for f in frames_list], axis=1)
    h1 = params["W_in"] @ x + params["b_in"][:, None]
    idx, valid = _context_index(lengths, params.shape.context)
    xc = np.concatenate([h1[:, j] * ok for j, ok in zip(idx, valid)], axis=0)
    h2 = np.tanh(params["W_ctx"] @ xc + params["b_ctx"][:, None])
    e = params["W_emb"] @ h2 + params["b_emb"][:, None]
    z = params["W_out"] @ e + params["b_out"][:, None]
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    embs = [e[:, a:b] for a, b in zip(offsets[:-1], offsets[1:])]
    logits = [z[:, a:b] for a, b in zip(offsets[:-1], offsets[1:])]
    return embs, logits, BatchCache(x, h1, xc, h2, e, idx, valid, offsets)


def backward_batch(params: ModelParams, cache: BatchCache, d_embs, d_logits) -> ModelParams:
    """Parameter gradients given upstream gradients on embeddings and logits.

    ``d_embs`` / ``d_logits`` are per-utterance lists aligned with the forward
    call; ``None`` entries mean zero.
    """
    E = params.shape.embed
    K = params.shape.n_labels + 1
    N = cache.x.shape[1]
    dz = np.zeros((K, N))
    de = np.zeros((E, N))
    for i, (a, b) in enumerate(zip(cache.offsets[:-1], cache.offsets[1:])):
        if d_logits[i] is not None:
            dz[:, a:b] = d_logits[i]
        if d_embs[i] is not None:
            de[:, a:b] = d_embs[i]
    g = params.zeros_like()
    g["W_out"] = dz @ cache.e.T
    g["b_out"] = dz.sum(axis=1)
    de += params["W_out"].T @ dz
    g["W_emb"] = de @ cache.h2.T
    g["b_emb"] = de.sum(axis=1)
    da = (params["W_emb"].T @ de) * (1.0 - cache.h2**2)
    g["W_ctx"] = da @ cache.xc.T
    g["b_ctx"] = da.sum(axis=1)
    dxc = params["W_ctx"].T @ da
    H = params.shape.hidden
    dh1 = np.zeros((H, N))
    for k, (j, ok) in enumerate(zip(cache.idx, cache.valid)):
        # each shift maps distinct frames to distinct sources, so plain fancy-add is safe
        dh1[:, j[ok]] += dxc[k * H : (k + 1) * H, ok]
    g["W_in"] = dh1 @ cache.x.T
    g["b_in"] = dh1.sum(axis=1)
    return g


def forward(params: ModelParams, frames: np.ndarray):
    """Single-utterance forward: ``(embeddings [E, T], logits [V+1, T])``."""
    embs, logits, _ = forward_batch(params, [frames])
    return embs[0], logits[0]


def backward(params: ModelParams, frames: np.ndarray, d_emb, d_logits) -> ModelParams:
    _, _, cache = forward_batch(params, [frames])
    if d_emb is not None and d_emb.shape != (params.shape.embed, frames.shape[1]):
        raise ValueError("embedding gradient shape mismatch")
    if d_logits is not None and d_logits.shape != (params.shape.n_labels + 1, frames.shape[1]):
        raise ValueError("logit gradient shape mismatch")
    return backward_batch(params, cache, [d_emb], [d_logits])


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    ``p <- p - eta * (lr * m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``,
    where ``eta`` is the schedule multiplier (linear decay to 0). Decay is not
    scaled by ``lr``, so ``lr = 0`` still shrinks weights by ``eta * weight_decay``.
    """

    def __init__(self, params: ModelParams, lr=3e-4, betas=(0.9, 0.99), eps=1e-8, weight_decay=1e-5, total_steps=1):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = max(1, int(total_steps))
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def multiplier(self, step: int) -> float:
        return max(0.0, 1.0 - step / self.total_steps)

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        eta = self.multiplier(self.t)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in PARAM_NAMES:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = params[k] - eta * (update + self.weight_decay * params[k])
        round_to_float32(params)
        round_to_float32(self.m)
        round_to_float32(self.v)
