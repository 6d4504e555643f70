"""Phoneme embeddings from frame embeddings via CTC alignment-weighted pooling.

Three alignment modes feed the contrastive loss:

``dynamic``
    alignment path and scores come from the model being trained;
``frozen_logit``
    path and scores come from a fixed snapshot (the stage-1 model);
``timestamp``
    the snapshot's spans are turned into time intervals and mapped back to
    frames with the window/hop convention, then pooled without weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import ctc

SCORE_FLOOR = 1e-12
DEFAULT_HOP = 0.005
DEFAULT_WINDOW = 0.025


class AlignmentMode(str, Enum):
    TIMESTAMP = "timestamp"
    FROZEN_LOGIT = "frozen_logit"
    DYNAMIC = "dynamic"

    @classmethod
    def parse(cls, value) -> "AlignmentMode":
        if isinstance(value, cls):
            return value
        aliases = {"frozen": cls.FROZEN_LOGIT, "logit": cls.FROZEN_LOGIT}
        v = str(value).lower()
        if v in aliases:
            return aliases[v]
        return cls(v)


class DegenerateSpanError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeEmbedding:
    vector: np.ndarray
    phoneme: int | None  # label index; None for whole-word vectors
    source_span: tuple[int, int]  # inclusive frame range
    granularity: str = "phoneme"


def pooling_weights(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise DegenerateSpanError("span owns no frames")
    if not np.all(s >= 0) or not np.any(s > 0):
        raise DegenerateSpanError("alignment scores must be non-negative and not all zero")
    s = np.maximum(s, SCORE_FLOOR)
    return s / s.sum()


def weighted_pool(cols: np.ndarray, scores: np.ndarray) -> np.ndarray:
    return cols @ pooling_weights(scores)


def weighted_pool_backward(cols: np.ndarray, scores: np.ndarray, d_vec: np.ndarray):
    """Gradients of ``weighted_pool`` w.r.t. the embedding columns and the raw scores."""
    s = np.maximum(np.asarray(scores, dtype=np.float64), SCORE_FLOOR)
    total = s.sum()
    w = s / total
    d_cols = np.outer(d_vec, w)
    proj = d_vec @ cols  # d_vec . column_t
    d_w = proj
    # w_t = s_t / sum(s): dw_t/ds_u = (delta_tu - w_t) / sum(s)
    d_s = (d_w - d_w @ w) / total
    d_s = np.where(np.asarray(scores) > SCORE_FLOOR, d_s, 0.0)
    return d_cols, d_s


def score_backward(logits_cols: np.ndarray, symbols: np.ndarray, d_scores: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits of per-frame ``softmax(z_t)[symbol_t]`` given its upstream gradient."""
    p = np.exp(ctc.log_softmax(logits_cols))
    cols = np.arange(logits_cols.shape[1])
    s = p[symbols, cols]
    d = -p * (s * d_scores)[None, :]
    d[symbols, cols] += s * d_scores
    return d


def extract_phoneme_embedding(emb: np.ndarray, align: ctc.AlignmentResult, label_position: int) -> PhonemeEmbedding:
    if not 0 <= label_position < len(align.spans):
        raise IndexError(f"label position {label_position} outside [0, {len(align.spans)})")
    sp = align.spans[label_position]
    cols = emb[:, sp.first : sp.last + 1]
    return PhonemeEmbedding(weighted_pool(cols, sp.scores), sp.label, (sp.first, sp.last))


def extract_all(emb, logits, labels, aligner_logits=None) -> list[PhonemeEmbedding]:
    """One pooled embedding per label.

    The alignment is computed on ``aligner_logits`` when given (frozen
    snapshot), otherwise on ``logits`` (dynamic).
    """
    align = ctc.ctc_forced_align(logits if aligner_logits is None else aligner_logits, labels)
    return [extract_phoneme_embedding(emb, align, j) for j in range(len(labels))]


def spans_to_times(spans: Iterable[tuple[int, int]], hop: float = DEFAULT_HOP, window: float = DEFAULT_WINDOW):
    """Acoustic extent of each inclusive frame span: ``[first * hop, last * hop + window)``."""
    return [(first * hop, last * hop + window) for first, last in spans]


def time_to_frames(start: float, end: float, n_frames: int, hop: float = DEFAULT_HOP, window: float = DEFAULT_WINDOW):
    """Frames whose start time lies in ``[start, end)``.

    Frame ``t`` covers ``[t * hop, t * hop + window)``. An interval shorter than
    a hop that contains no frame start falls back to the frame covering
    ``start``.
    """
    if not end > start:
        raise DegenerateSpanError(f"empty interval [{start}, {end})")
    eps = 1e-9 * hop
    first = int(np.ceil(start / hop - eps))
    last = int(np.ceil(end / hop - eps)) - 1
    last = min(last, n_frames - 1)
    if first <= last:
        return first, last
    t = int(np.floor(start / hop + eps))
    if 0 <= t < n_frames and t * hop + window > start:
        return t, t
    raise DegenerateSpanError(f"interval [{start}, {end}) maps to no frame")


def timestamp_extract(emb, boundaries, frame_hop: float = DEFAULT_HOP, frame_window: float = DEFAULT_WINDOW, labels=None):
    out = []
    T = emb.shape[1]
    for j, (start, end) in enumerate(boundaries):
        first, last = time_to_frames(start, end, T, frame_hop, frame_window)
        vec = emb[:, first : last + 1].mean(axis=1)
        out.append(PhonemeEmbedding(vec, None if labels is None else int(labels[j]), (first, last)))
    return out


def timestamp_spans(align_spans: Sequence[tuple[int, int]], n_frames: int, hop=DEFAULT_HOP, window=DEFAULT_WINDOW):
    """Frame spans recovered from an aligner's spans after a round trip through time."""
    return [time_to_frames(s, e, n_frames, hop, window) for s, e in spans_to_times(align_spans, hop, window)]


def export_embeddings_csv(path, rows: Iterable[tuple[str, str, str, np.ndarray]]) -> int:
    """Write ``utterance_id, phoneme, group, e_1..e_E`` rows; returns the row count."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = None
        for uid, phoneme, group, vec in rows:
            if w is None:
                w = csv.writer(fh)
                w.writerow(["utterance_id", "phoneme", "group"] + [f"e_{i + 1}" for i in range(len(vec))])
            w.writerow([uid, phoneme, group] + [f"{x:.6g}" for x in vec])
            n += 1
    return n
