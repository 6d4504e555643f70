"""Articulatory feature vectors, phoneme distances and difficulty binning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

FEATURE_VALUES = {"+1": 1, "-1": -1, "0": 0}
MIN_FEATURES = 20


class UnknownPhonemeError(KeyError):
    def __init__(self, phoneme):
        super().__init__(phoneme)
        self.phoneme = phoneme

    def __str__(self):
        return f"unknown phoneme {self.phoneme!r}"


class FeatureTableError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeFeatureTable:
    inventory: tuple[str, ...]
    features: np.ndarray  # int8 [n_phonemes, F], values in {-1, 0, 1}
    feature_names: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.int8)
        if feats.ndim != 2 or feats.shape[0] != len(self.inventory):
            raise FeatureTableError("feature matrix must have one row per phoneme")
        if feats.shape[1] != len(self.feature_names):
            raise FeatureTableError("feature_names length must equal F")
        if feats.shape[1] < MIN_FEATURES:
            raise FeatureTableError(f"need at least {MIN_FEATURES} features, got {feats.shape[1]}")
        if not np.isin(feats, (-1, 0, 1)).all():
            raise FeatureTableError("feature values must be in {+1, -1, 0}")
        if len(set(self.inventory)) != len(self.inventory):
            raise FeatureTableError("duplicate phoneme in inventory")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "inventory", tuple(self.inventory))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.inventory)})

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.inventory)

    def __contains__(self, phoneme):
        return phoneme in self._index

    def index(self, phoneme: str) -> int:
        try:
            return self._index[phoneme]
        except KeyError:
            raise UnknownPhonemeError(phoneme) from None

    def vector(self, phoneme: str) -> np.ndarray:
        return self.features[self.index(phoneme)]

    def subset(self, phonemes: Sequence[str]) -> "PhonemeFeatureTable":
        rows = [self.index(p) for p in phonemes]
        return PhonemeFeatureTable(tuple(phonemes), self.features[rows], self.feature_names)


def load_feature_table(path: str | Path | None = None) -> PhonemeFeatureTable:
    """Read a tab-separated feature table; ``None`` loads the bundled one.

    Lines starting with ``#`` are comments. The first remaining line is the
    header (``phoneme`` followed by feature names).
    """
    if path is None:
        text = resources.files("dypcl.data").joinpath("features.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise FeatureTableError("empty feature table")
    header = lines[0].split("\t")
    names = header[1:]
    inventory, rows = [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        cells = ln.split("\t")
        if len(cells) != len(header):
            raise FeatureTableError(f"row {lineno}: expected {len(header)} cells, got {len(cells)}")
        try:
            rows.append([FEATURE_VALUES[c.strip()] for c in cells[1:]])
        except KeyError as exc:
            raise FeatureTableError(f"row {lineno}: bad feature value {exc.args[0]!r}") from None
        inventory.append(cells[0].strip())
    return PhonemeFeatureTable(tuple(inventory), np.array(rows, dtype=np.int8), tuple(names))


def feature_distance(table: PhonemeFeatureTable, p: str, q: str) -> float:
    """Normalized Hamming distance between the feature vectors of ``p`` and ``q``."""
    a = table.vector(p)
    b = table.vector(q)
    return int(np.count_nonzero(a != b)) / table.n_features


@dataclass(frozen=True)
class PhonemeDistanceMatrix:
    inventory: tuple[str, ...]
    d: np.ndarray

    def __getitem__(self, pair):
        i, j = pair
        idx = {p: k for k, p in enumerate(self.inventory)}
        if isinstance(i, str):
            i = idx[i]
        if isinstance(j, str):
            j = idx[j]
        return float(self.d[i, j])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([""] + list(self.inventory))
            for p, row in zip(self.inventory, self.d):
                w.writerow([p] + [f"{x:.6f}" for x in row])


def build_distance_matrix(table: PhonemeFeatureTable) -> PhonemeDistanceMatrix:
    f = table.features
    counts = (f[:, None, :] != f[None, :, :]).sum(axis=-1)
    d = counts / table.n_features
    d.setflags(write=False)
    return PhonemeDistanceMatrix(table.inventory, d)


@dataclass(frozen=True)
class DifficultyScheme:
    """Thresholds partitioning (0, max_distance] into difficulty bins.

    Bin ``k`` is ``(b[k-1], b[k]]`` with ``b[-1] = 0`` and ``b[n] = max_distance``.
    Ordinal 0 is the hardest (smallest distance) bin.
    """

    name: str
    boundaries: tuple[float, ...]
    max_distance: float = 1.0

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("boundaries must be strictly ascending")
        if b and (b[0] <= 0 or b[-1] >= self.max_distance):
            raise ValueError("boundaries must lie inside (0, max_distance)")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) + 1

    def bin_label(self, ordinal: int) -> str:
        if self.n_bins == 2:
            return ("hard", "easy")[ordinal]
        if self.n_bins == 3:
            return ("hard", "mid", "easy")[ordinal]
        return f"lv{ordinal}"

    def intervals(self) -> list[tuple[float, float]]:
        edges = (0.0,) + self.boundaries + (self.max_distance,)
        return list(zip(edges[:-1], edges[1:]))


SCHEMES = {
    "2LV": DifficultyScheme("2LV", (0.3,)),
    "3LV": DifficultyScheme("3LV", (0.2, 0.3)),
    "6LV": DifficultyScheme("6LV", (0.1, 0.2, 0.3, 0.4, 0.5)),
}

HARD, MID, EASY = 0, 1, 2


def get_scheme(name: str) -> DifficultyScheme:
    try:
        return SCHEMES[name.upper()]
    except KeyError:
        raise ValueError(f"unknown difficulty scheme {name!r}; choose from {sorted(SCHEMES)}") from None


def difficulty_bin(d: float, scheme: DifficultyScheme) -> int:
    """Return the bin ordinal of distance ``d``; boundary values go to the harder bin."""
    if not (0.0 < d <= scheme.max_distance):
        raise ValueError(f"distance {d!r} outside (0, {scheme.max_distance}]")
    for k, b in enumerate(scheme.boundaries):
        if d <= b:
            return k
    return len(scheme.boundaries)


def distance_stats(m: PhonemeDistanceMatrix, bucket_width: float = 0.05) -> dict:
    n = m.d.shape[0]
    if n < 2:
        raise ValueError("need at least a 2x2 distance matrix")
    vals = m.d[np.triu_indices(n, k=1)]
    n_buckets = int(round(1.0 / bucket_width))
    edges = np.linspace(0.0, 1.0, n_buckets + 1)
    counts, _ = np.histogram(vals, bins=edges)
    return {
        "mean": float(vals.mean()),
        "median": float(np.median(vals)),
        "min": float(vals.min()),
        "max": float(vals.max()),
        "n_pairs": int(vals.size),
        "histogram": [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)],
    }
