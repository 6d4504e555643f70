"""Error rates, per-group reports, alignment accuracy and embedding separation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ctc
from .model import ModelParams, forward_batch

REPORT_GROUPS = ("H", "M", "L", "VL")
FISHER_CAP = 1e9


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def per(ref: Sequence, hyp: Sequence) -> float:
    """Phoneme error rate: edit distance over reference length (may exceed 1)."""
    if len(ref) == 0:
        raise ValueError("reference sequence is empty")
    return edit_distance(ref, hyp) / len(ref)


def lexicon_labels(corpus) -> list[tuple[str, tuple[int, ...]]]:
    """``(word, label sequence)`` pairs in lexicon order for ``word_decode``."""
    vocab = {p: i + 1 for i, p in enumerate(corpus.inventory)}
    return [(w, tuple(vocab[p] for p in ph)) for w, ph in corpus.lexicon.entries.items()]


def nearest_word(decoded: Sequence[int], lexicon: Sequence[tuple[str, Sequence[int]]]) -> str:
    if not lexicon:
        raise ValueError("empty lexicon")
    best, best_d = None, math.inf
    for word, labels in lexicon:
        d = edit_distance(labels, decoded)
        if d < best_d:  # strict: earlier entry wins ties
            best, best_d = word, d
    return best


def word_decode(logits: np.ndarray, lexicon: Sequence[tuple[str, Sequence[int]]]) -> str:
    """Greedy CTC decode mapped to the nearest lexicon entry by edit distance."""
    return nearest_word(ctc.greedy_decode(logits), lexicon)


@dataclass
class GroupReport:
    wer: dict[str, float]
    per: dict[str, float] = field(default_factory=dict)
    n_utts: dict[str, int] = field(default_factory=dict)
    speaker_counts: dict[str, int] = field(default_factory=dict)
    absent: tuple[str, ...] = ()

    def _weighted(self, rates):
        groups = [g for g in rates if g in self.speaker_counts]
        w = sum(self.speaker_counts[g] for g in groups)
        if not groups or w == 0:
            return math.nan
        return sum(rates[g] * self.speaker_counts[g] for g in groups) / w

    @property
    def all(self) -> float:
        """Speaker-count-weighted average WER over present groups."""
        return self._weighted(self.wer)

    @property
    def all_star(self) -> float:
        """Unweighted mean WER over present groups."""
        return float(np.mean(list(self.wer.values()))) if self.wer else math.nan

    @property
    def per_all(self) -> float:
        return self._weighted(self.per)

    def rows(self):
        for g in REPORT_GROUPS:
            if g in self.wer:
                yield g, self.n_utts.get(g, 0), self.wer[g], self.per.get(g, math.nan)
        yield "ALL", sum(self.n_utts.values()), self.all, self.per_all
        yield "ALL*", sum(self.n_utts.values()), self.all_star, float(np.mean(list(self.per.values()))) if self.per else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "n_utts", "wer", "per"])
        for g, n, wer, p in self.rows():
            w.writerow([g, n, f"{100 * wer:.2f}", f"{100 * p:.2f}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'group':<6}{'n_utts':>8}{'WER%':>9}{'PER%':>9}"]
        for g, n, wer, p in self.rows():
            lines.append(f"{g:<6}{n:>8}{100 * wer:>9.2f}{100 * p:>9.2f}")
        if self.absent:
            lines.append("absent: " + ", ".join(self.absent))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "wer": dict(self.wer),
            "per": dict(self.per),
            "n_utts": dict(self.n_utts),
            "speaker_counts": dict(self.speaker_counts),
            "absent": list(self.absent),
            "ALL": self.all,
            "ALL*": self.all_star,
            "PER_ALL": self.per_all,
        }


def decode_utterances(params: ModelParams, utterances, lexicon, batch_size: int = 256):
    """Per utterance: ``(decoded labels, decoded word)``."""
    out = []
    for i in range(0, len(utterances), batch_size):
        chunk = utterances[i : i + batch_size]
        _, logits, _ = forward_batch(params, [u.frames for u in chunk])
        for z in logits:
            hyp = ctc.greedy_decode(z)
            out.append((hyp, nearest_word(hyp, lexicon)))
    return out


def wer_report(params: ModelParams, utterances, lexicon, speaker_counts: Mapping[str, int], groups=REPORT_GROUPS) -> GroupReport:
    """Word and phoneme error rates per group; groups with no utterances are reported absent."""
    decoded = decode_utterances(params, list(utterances), lexicon)
    errs: dict[str, list[int]] = {}
    pers: dict[str, list[float]] = {}
    for u, (hyp, word) in zip(utterances, decoded):
        errs.setdefault(u.group, []).append(int(word != u.word))
        pers.setdefault(u.group, []).append((edit_distance(u.labels, hyp), len(u.labels)))
    wer, prs, n = {}, {}, {}
    for g in groups:
        if g not in errs:
            continue
        wer[g] = float(np.mean(errs[g]))
        prs[g] = sum(e for e, _ in pers[g]) / sum(l for _, l in pers[g])
        n[g] = len(errs[g])
    counts = {g: int(speaker_counts[g]) for g in wer if g in speaker_counts}
    absent = tuple(g for g in groups if g not in wer)
    return GroupReport(wer, prs, n, counts, absent)


def overall_per(params: ModelParams, utterances) -> float:
    """Corpus-level PER: total edits over total reference length."""
    utterances = list(utterances)
    errs = tot = 0
    for i in range(0, len(utterances), 256):
        chunk = utterances[i : i + 256]
        _, logits, _ = forward_batch(params, [u.frames for u in chunk])
        for u, z in zip(chunk, logits):
            errs += edit_distance(u.labels, ctc.greedy_decode(z))
            tot += len(u.labels)
    return errs / tot


def span_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of inclusive integer frame intervals."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def alignment_accuracy(predicted: Sequence[tuple[int, int]], truth: Sequence[tuple[int, int]]) -> dict:
    """Mean per-phoneme IoU and the fraction of frames assigned to the right phoneme.

    Frames outside every predicted span (blank frames) count as errors.
    """
    if len(predicted) != len(truth):
        raise ValueError(f"{len(predicted)} predicted spans for {len(truth)} reference segments")
    if not truth:
        raise ValueError("no segments to compare")
    ious = [span_iou(p, t) for p, t in zip(predicted, truth)]
    T = max(t[1] for t in truth) + 1
    ref = np.full(T, -1)
    hyp = np.full(T, -2)
    for j, (f, l) in enumerate(truth):
        ref[f : l + 1] = j
    for j, (f, l) in enumerate(predicted):
        hyp[max(f, 0) : min(l, T - 1) + 1] = j
    return {"mean_iou": float(np.mean(ious)), "frame_accuracy": float(np.mean(ref == hyp))}


def embedding_separation(embeddings: np.ndarray, labels: Sequence) -> dict:
    """Fisher ratio and silhouette coefficient, both on squared Euclidean distances.

    ``fisher_ratio`` is the mean squared distance between class centroids over
    the mean within-class variance (mean squared distance to the centroid),
    capped at ``FISHER_CAP``.
    """
    from sklearn.metrics import silhouette_score

    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise ValueError("need one label per embedding row")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ValueError("need >= 2 classes with >= 2 samples each")
    cents = np.stack([X[labels == c].mean(axis=0) for c in classes])
    intra = float(np.mean([((X[labels == c] - cents[i]) ** 2).sum(axis=1).mean() for i, c in enumerate(classes)]))
    iu = np.triu_indices(len(classes), k=1)
    diff = cents[:, None, :] - cents[None, :, :]
    inter = float((diff**2).sum(axis=2)[iu].mean())
    if inter == 0.0:
        fisher = 0.0
    elif intra <= inter / FISHER_CAP:
        fisher = FISHER_CAP
    else:
        fisher = inter / intra
    sil = float(silhouette_score(X, labels, metric="sqeuclidean"))
    return {"fisher_ratio": fisher, "silhouette": sil, "n_classes": int(len(classes)), "n_samples": int(X.shape[0])}
