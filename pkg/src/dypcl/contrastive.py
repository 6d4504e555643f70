"""Triplet hinge loss, the combined CTC/contrastive objective, and word-level pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynalign import PhonemeEmbedding


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    lam: float = 0.5
    normalize: bool = False

    def __post_init__(self):
        if self.margin < 0 or self.lam < 0:
            raise ValueError("margin and lambda must be non-negative")


@dataclass(frozen=True)
class LossReport:
    l_ctc_anchor: float
    l_ctc_positive: float
    l_ctc_negative: float
    l_ctc: float  # mean over all 3n utterances
    l_triplet: float
    l_total: float


def _vec(x) -> np.ndarray:
    return np.asarray(x.vector if isinstance(x, PhonemeEmbedding) else x, dtype=np.float64)


def _l2_normalize(v):
    n = np.linalg.norm(v)
    n = max(n, 1e-12)
    return v / n, n


def _l2_normalize_backward(u, n, d_u):
    # u = v / |v|  =>  dv = (d_u - u (u . d_u)) / |v|
    return (d_u - u * (u @ d_u)) / n


def triplet_loss(fa, fp, fn, m: float, normalize: bool = False):
    """``max(0, |fa - fp|^2 - |fa - fn|^2 + m)`` and its (sub)gradients.

    Returns ``(loss, (d_fa, d_fp, d_fn))``. At the hinge boundary the zero
    subgradient is used.
    """
    a, p, n = _vec(fa), _vec(fp), _vec(fn)
    if not (a.shape == p.shape == n.shape) or a.ndim != 1:
        raise ValueError(f"embedding shapes differ: {a.shape}, {p.shape}, {n.shape}")
    if m < 0:
        raise ValueError("margin must be non-negative")
    if normalize:
        (a, na), (p, np_), (n, nn) = _l2_normalize(a), _l2_normalize(p), _l2_normalize(n)
    dap = a - p
    dan = a - n
    arg = dap @ dap - dan @ dan + m
    if arg <= 0:
        z = np.zeros_like(a)
        return 0.0, (z, z.copy(), z.copy())
    ga = 2.0 * (dap - dan)
    gp = -2.0 * dap
    gn = 2.0 * dan
    if normalize:
        ga = _l2_normalize_backward(a, na, ga)
        gp = _l2_normalize_backward(p, np_, gp)
        gn = _l2_normalize_backward(n, nn, gn)
    return float(arg), (ga, gp, gn)


def total_loss(
    anchor_ctc: Sequence[float],
    positive_ctc: Sequence[float],
    negative_ctc: Sequence[float],
    triplet_terms: Sequence[float],
    cfg: LossConfig,
) -> LossReport:
    """Batch mean of ``(ctc_A + ctc_P + ctc_N) / 3 + lam * triplet``."""
    n = len(triplet_terms)
    if not (len(anchor_ctc) == len(positive_ctc) == len(negative_ctc) == n) or n == 0:
        raise ValueError("anchor/positive/negative/triplet batches must be the same non-zero size")
    la = float(np.mean(anchor_ctc))
    lp = float(np.mean(positive_ctc))
    ln = float(np.mean(negative_ctc))
    lt = float(np.mean(triplet_terms))
    # the mean over all 3n utterances equals (la + lp + ln) / 3 and, with lam = 0,
    # reproduces the stage-1 objective bit for bit
    lc = ctc_objective(list(anchor_ctc) + list(positive_ctc) + list(negative_ctc))
    return LossReport(la, lp, ln, lc, lt, lc + cfg.lam * lt)


def ctc_objective(losses: Sequence[float]) -> float:
    """Stage-1 objective: mean CTC loss over a batch of utterances."""
    return float(np.mean(np.asarray(losses, dtype=np.float64)))


def word_level_embedding(emb: np.ndarray) -> PhonemeEmbedding:
    """Unweighted mean over all frames, tagged as a whole-word vector."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] < 1:
        raise ValueError("need an [E, T>=1] embedding matrix")
    return PhonemeEmbedding(emb.mean(axis=1), None, (0, emb.shape[1] - 1), granularity="word")
