"""Anchor/positive/negative triplet construction and per-epoch sampling."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .phonetics import DifficultyScheme, PhonemeFeatureTable, build_distance_matrix, difficulty_bin
from .synthcorpus import Utterance

log = logging.getLogger(__name__)

CONTROL = "C"


@dataclass(frozen=True)
class PhonemeOccurrence:
    utterance_id: str
    speaker_id: str
    group: str
    word: str
    phoneme: str
    position: int

    @property
    def ref(self) -> str:
        return f"{self.utterance_id}:{self.position}"


@dataclass(frozen=True)
class TripletSpec:
    anchor: PhonemeOccurrence
    positive: PhonemeOccurrence
    negative: PhonemeOccurrence
    distance: float
    bin: int

    def to_line(self) -> str:
        return f"{self.anchor.ref},{self.positive.ref},{self.negative.ref},{self.distance!r},{self.bin}"


@dataclass(frozen=True)
class SamplingCaps:
    max_positives_per_anchor: int = 5
    max_negatives_per_pair: int = 5
    epoch_size: int = 2000

    def __post_init__(self):
        if min(self.max_positives_per_anchor, self.max_negatives_per_pair, self.epoch_size) < 1:
            raise ValueError("sampling caps must be positive integers")


class TripletList(list):
    """List of triplets plus a counter of skipped candidates (``skipped``)."""

    def __init__(self, items=(), skipped=None):
        super().__init__(items)
        self.skipped = Counter(skipped or {})

    def bin_histogram(self) -> Counter:
        return Counter(t.bin for t in self)


def occurrences(utterances: Sequence[Utterance]) -> list[PhonemeOccurrence]:
    return [
        PhonemeOccurrence(u.utterance_id, u.speaker_id, u.group, u.word, p, i)
        for u in utterances
        for i, p in enumerate(u.phonemes)
    ]


def _split_budget(cap: int, pools: list[np.ndarray], start: int = 0) -> list[int]:
    """Spread ``cap`` draws round-robin over non-empty pools, beginning at pool ``start``."""
    take = [0] * len(pools)
    remaining = cap
    order = [(start + k) % len(pools) for k in range(len(pools))]
    while remaining > 0:
        progressed = False
        for b in order:
            pool = pools[b]
            if remaining and take[b] < len(pool):
                take[b] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return take


def build_triplets(
    utterances: Sequence[Utterance],
    table: PhonemeFeatureTable,
    caps: SamplingCaps,
    scheme: DifficultyScheme,
    seed: int = 0,
    healthy_only: bool = False,
) -> TripletList:
    """Enumerate triplets with stratified caps.

    Anchors are control-group phoneme occurrences. Positives share the anchor's
    word and position and come from a dysarthric speaker, or with
    ``healthy_only`` from a different control speaker. Negatives differ
    from the anchor in both word and phoneme. For every (anchor, positive) pair
    the negative budget is spread over the populated difficulty bins; empty bins
    are counted in ``skipped``.
    """
    occ = occurrences(utterances)
    anchors = [o for o in occ if o.group == CONTROL]
    pool = anchors if healthy_only else [o for o in occ if o.group != CONTROL]
    if not anchors:
        raise ValueError("no control-group utterances to draw anchors from")
    if not pool:
        raise ValueError("no dysarthric utterances; pass healthy_only=True for a control-only corpus")

    by_slot: dict[tuple[str, int], list[int]] = {}
    for i, o in enumerate(pool):
        by_slot.setdefault((o.word, o.position), []).append(i)

    words = sorted({o.word for o in occ})
    word_id = {w: i for i, w in enumerate(words)}
    pool_word = np.array([word_id[o.word] for o in pool])
    pool_phone = np.array([table.index(o.phoneme) for o in pool])
    dist = build_distance_matrix(table).d
    n_bins = scheme.n_bins
    # difficulty bin for every phoneme pair with non-zero distance
    bins = np.full(dist.shape, -1, dtype=np.int64)
    for i, j in zip(*np.nonzero(dist > 0)):
        bins[i, j] = difficulty_bin(float(dist[i, j]), scheme)

    rng = np.random.default_rng(seed)
    out = TripletList()
    n_pairs = 0
    for a in anchors:
        cands = by_slot.get((a.word, a.position), [])
        if healthy_only:
            cands = [i for i in cands if pool[i].speaker_id != a.speaker_id]
        if not cands:
            out.skipped["no_positive"] += 1
            continue
        if len(cands) > caps.max_positives_per_anchor:
            pick = np.sort(rng.choice(len(cands), size=caps.max_positives_per_anchor, replace=False))
            cands = [cands[k] for k in pick]
        ai = table.index(a.phoneme)
        ok = (pool_word != word_id[a.word]) & (pool_phone != ai)
        neg_bins = bins[ai, pool_phone]
        per_bin = [np.flatnonzero(ok & (neg_bins == b)) for b in range(n_bins)]
        for b, idx in enumerate(per_bin):
            if idx.size == 0:
                out.skipped[f"empty_bin_{b}"] += len(cands)
        for pi in cands:
            # rotating the first bin keeps bins balanced when the cap is below the bin count
            take = _split_budget(caps.max_negatives_per_pair, per_bin, start=n_pairs % n_bins)
            n_pairs += 1
            if sum(take) == 0:
                out.skipped["no_negative"] += 1
                continue
            for b, k in enumerate(take):
                if k == 0:
                    continue
                chosen = np.sort(rng.choice(per_bin[b], size=k, replace=False))
                for ni in chosen:
                    n = pool[ni]
                    d = float(dist[ai, pool_phone[ni]])
                    out.append(TripletSpec(a, pool[pi], n, d, b))
    log.info("built %d triplets from %d anchors (skipped: %s)", len(out), len(anchors), dict(out.skipped))
    return out


def epoch_sample(triplets: Sequence[TripletSpec], n: int, seed: int) -> list[TripletSpec]:
    """Uniform sample of ``n`` triplets; with replacement only when ``n`` exceeds the pool."""
    if not triplets:
        raise ValueError("cannot sample from an empty triplet list")
    if n < 1:
        raise ValueError("sample size must be >= 1")
    rng = np.random.default_rng(seed)
    replace = n > len(triplets)
    if replace:
        log.warning("epoch sample of %d exceeds %d triplets; sampling with replacement", n, len(triplets))
    idx = rng.choice(len(triplets), size=n, replace=replace)
    return [triplets[i] for i in idx]


def save_triplets(triplets: Sequence[TripletSpec], path: str | Path, header: Mapping | None = None) -> None:
    lines = []
    if header:
        lines.append("# " + " ".join(f"{k}={v}" for k, v in header.items()))
    lines.extend(t.to_line() for t in triplets)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_triplets(path: str | Path, utterances: Mapping[str, Utterance]) -> TripletList:
    """Parse a triplet file, resolving ``uttid:pos`` references against ``utterances``."""

    def resolve(ref: str) -> PhonemeOccurrence:
        uid, pos = ref.rsplit(":", 1)
        u = utterances[uid]
        i = int(pos)
        return PhonemeOccurrence(u.utterance_id, u.speaker_id, u.group, u.word, u.phonemes[i], i)

    out = TripletList()
    for lineno, ln in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not ln.strip() or ln.startswith("#"):
            continue
        try:
            a, p, n, d, b = ln.split(",")
            out.append(TripletSpec(resolve(a), resolve(p), resolve(n), float(d), int(b)))
        except (ValueError, KeyError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed triplet record ({exc!r})") from None
    return out
