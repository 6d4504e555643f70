"""CTC loss with analytic gradient, forced alignment and greedy decoding.

Logit matrices are ``[V + 1, T]`` with the blank at row 0. The per-utterance
dynamic programs run in a compiled extension when it is importable and fall
back to vectorised numpy otherwise; set ``DYPCL_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _pykernels

BLANK = 0
LOG_ZERO = _pykernels.LOG_ZERO  # stands in for log(0) in every DP table


def _select_backend():
    if os.environ.get("DYPCL_PURE_PYTHON", "").strip() not in ("", "0"):
        return _pykernels, "python"
    try:
        from . import _ckernels
    except ImportError:
        return _pykernels, "python"
    return _ckernels, "cython"


_kernels, BACKEND = _select_backend()


class InfeasibleAlignmentError(ValueError):
    """Too few frames to emit the label sequence under CTC rules."""


def use_backend(name: str) -> None:
    """Switch kernels at runtime (``"python"`` or ``"cython"``); used by benchmarks and tests."""
    global _kernels, BACKEND
    if name == "python":
        _kernels, BACKEND = _pykernels, "python"
    elif name == "cython":
        from . import _ckernels

        _kernels, BACKEND = _ckernels, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")


def extend_labels(labels: Sequence[int]) -> np.ndarray:
    """Interleave blanks: ``[a, b] -> [0, a, 0, b, 0]``."""
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _check_inputs(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 2 or logits.shape[1] < 1:
        raise ValueError(f"logits must be [V+1, T] with V >= 1, T >= 1; got {logits.shape}")
    if not np.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    labels = [int(x) for x in labels]
    if not labels:
        raise ValueError("label sequence is empty")
    V = logits.shape[0] - 1
    for x in labels:
        if x == BLANK or not 1 <= x <= V:
            raise ValueError(f"label {x} outside [1, {V}]")
    T = logits.shape[1]
    need = min_frames(labels)
    if T < need:
        raise InfeasibleAlignmentError(f"{T} frames cannot emit {len(labels)} labels (need {need})")
    return logits, labels


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Column-wise log-softmax of a ``[K, T]`` matrix."""
    m = logits.max(axis=0, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def ctc_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. the raw logits."""
    logits, labels = _check_inputs(logits, labels)
    logp = np.ascontiguousarray(log_softmax(logits))
    ll, occ = _kernels.ctc_fb(logp, extend_labels(labels))
    grad = np.exp(logp) - occ
    return -ll, grad


def ctc_log_likelihood(logits, labels) -> float:
    logits, labels = _check_inputs(logits, labels)
    logp = np.ascontiguousarray(log_softmax(logits))
    return _kernels.forward_backward(logp, extend_labels(labels))[2]


@dataclass(frozen=True)
class PhonemeSpan:
    position: int  # index into the label sequence
    label: int
    first: int
    last: int  # inclusive
    scores: np.ndarray

    @property
    def frames(self) -> range:
        return range(self.first, self.last + 1)


@dataclass(frozen=True)
class AlignmentResult:
    states: np.ndarray  # per-frame index into the blank-extended sequence
    symbols: np.ndarray  # per-frame vocabulary index (0 = blank)
    scores: np.ndarray  # per-frame softmax probability of the chosen symbol
    spans: tuple[PhonemeSpan, ...]

    @property
    def frame_labels(self) -> np.ndarray:
        return self.states

    def boundaries(self) -> list[tuple[int, int]]:
        return [(sp.first, sp.last) for sp in self.spans]


def spans_from_states(states: np.ndarray, labels: Sequence[int], scores: np.ndarray) -> tuple[PhonemeSpan, ...]:
    spans = []
    for j, lab in enumerate(labels):
        frames = np.flatnonzero(states == 2 * j + 1)
        spans.append(PhonemeSpan(j, int(lab), int(frames[0]), int(frames[-1]), scores[frames[0] : frames[-1] + 1]))
    return tuple(spans)


def alignment_from_states(logits, labels, states) -> AlignmentResult:
    """Rebuild an alignment (scores and spans) for a fixed state path under ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = [int(x) for x in labels]
    states = np.asarray(states, dtype=np.int64)
    ext = extend_labels(labels)
    symbols = ext[states]
    probs = np.exp(log_softmax(logits))
    scores = probs[symbols, np.arange(logits.shape[1])]
    return AlignmentResult(states, symbols, scores, spans_from_states(states, labels, scores))


def ctc_forced_align(logits, labels) -> AlignmentResult:
    """Most probable valid CTC path for ``labels`` (Viterbi over the extended sequence)."""
    logits, labels = _check_inputs(logits, labels)
    logp = np.ascontiguousarray(log_softmax(logits))
    states = _kernels.viterbi(logp, extend_labels(labels))
    return alignment_from_states(logits, labels, states)


def greedy_decode(logits) -> list[int]:
    best = np.asarray(logits).argmax(axis=0)
    out = []
    prev = -1
    for k in best:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def path_log_prob(logits, symbols) -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(logp[np.asarray(symbols), np.arange(logp.shape[1])].sum())


__all__ = [
    "BACKEND",
    "BLANK",
    "LOG_ZERO",
    "AlignmentResult",
    "InfeasibleAlignmentError",
    "PhonemeSpan",
    "alignment_from_states",
    "ctc_forced_align",
    "ctc_log_likelihood",
    "ctc_loss",
    "extend_labels",
    "greedy_decode",
    "log_softmax",
    "min_frames",
    "path_log_prob",
    "use_backend",
]
