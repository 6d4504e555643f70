"""Synthetic isolated-word corpus with control and four dysarthric severity groups.

Each phoneme owns a prototype acoustic vector derived from its articulatory
features, so phonetically close phonemes are also acoustically close. A word
utterance concatenates tempo-scaled prototype segments, drops frames, applies
the speaker's linear distortion and adds Gaussian noise. Ground-truth segment
boundaries are exact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .phonetics import PhonemeFeatureTable, load_feature_table

log = logging.getLogger(__name__)

GROUPS = ("C", "H", "M", "L", "VL")
DYSARTHRIC = ("H", "M", "L", "VL")
BLOCKS = ("B1", "B2", "B3")
SCHEMA_VERSION = 1


class CorpusError(ValueError):
    code = "corpus"


class CorpusValidationError(CorpusError):
    code = "validation"

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ManifestVersionError(CorpusError):
    code = "version"


class ManifestChecksumError(CorpusError):
    code = "checksum"


class ManifestFormatError(CorpusError):
    code = "format"


@dataclass(frozen=True)
class Lexicon:
    entries: dict[str, tuple[str, ...]]
    common: frozenset[str] = frozenset()

    @property
    def words(self) -> list[str]:
        return list(self.entries)

    def validate(self, table: PhonemeFeatureTable, min_words: int = 30, min_coverage: int = 2) -> list[str]:
        """Return a list of problems (empty when valid)."""
        problems = []
        for word, phones in self.entries.items():
            if not phones:
                problems.append(f"word {word!r} has no phonemes")
            for p in phones:
                if p not in table:
                    problems.append(f"word {word!r} uses unknown phoneme {p!r}")
        if len(self.entries) < min_words:
            problems.append(f"lexicon has {len(self.entries)} words, need >= {min_words}")
        counts = {p: 0 for p in table.inventory}
        for phones in self.entries.values():
            for p in set(phones):
                if p in counts:
                    counts[p] += 1
        for p, c in counts.items():
            if c < min_coverage:
                problems.append(f"phoneme {p!r} appears in {c} word(s), need >= {min_coverage}")
        return problems


def load_lexicon(path: str | Path | None = None) -> Lexicon:
    if path is None:
        text = resources.files("dypcl.data").joinpath("lexicon.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    entries, common = {}, set()
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        word, flag, phones = ln.split("\t")
        entries[word] = tuple(phones.split())
        if flag.strip() == "1":
            common.add(word)
    return Lexicon(entries, frozenset(common))


@dataclass(frozen=True)
class GroupSeverity:
    noise_sigma: float
    distortion_scale: float
    tempo_range: tuple[float, float]
    drop_prob: float


DEFAULT_SEVERITY = {
    "C": GroupSeverity(0.25, 0.0, (0.9, 1.1), 0.0),
    "H": GroupSeverity(0.45, 0.25, (0.8, 1.3), 0.03),
    "M": GroupSeverity(0.65, 0.45, (0.7, 1.6), 0.06),
    "L": GroupSeverity(0.85, 0.65, (0.6, 1.9), 0.10),
    "VL": GroupSeverity(1.05, 0.85, (0.5, 2.2), 0.15),
}


@dataclass
class CorpusConfig:
    n_speakers_per_group: int = 2
    feature_dim: int = 16
    base_segment_len: int = 6
    n_repetitions: int = 3
    prototype_jitter: float = 0.3
    severity: dict = field(default_factory=lambda: dict(DEFAULT_SEVERITY))
    groups: tuple = GROUPS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["severity"] = {g: asdict(s) for g, s in self.severity.items()}
        d["groups"] = list(self.groups)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorpusConfig":
        d = dict(d)
        if "severity" in d:
            sev = dict(DEFAULT_SEVERITY)
            for g, s in d["severity"].items():
                s = dict(s)
                s["tempo_range"] = tuple(s["tempo_range"])
                sev[g] = GroupSeverity(**s)
            d["severity"] = sev
        if "groups" in d:
            d["groups"] = tuple(d["groups"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CorpusError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> list[str]:
        problems = []
        if self.n_speakers_per_group < 1:
            problems.append("n_speakers_per_group must be >= 1")
        if self.feature_dim < 1:
            problems.append("feature_dim must be >= 1")
        if self.base_segment_len < 1:
            problems.append("base_segment_len must be >= 1")
        if self.n_repetitions < 1:
            problems.append("n_repetitions must be >= 1")
        for g in self.groups:
            if g not in GROUPS:
                problems.append(f"unknown group {g!r}")
            elif g not in self.severity:
                problems.append(f"no severity profile for group {g!r}")
        ordered = [self.severity[g] for g in GROUPS if g in self.severity]
        for a, b in zip(ordered, ordered[1:]):
            if b.noise_sigma < a.noise_sigma or b.drop_prob < a.drop_prob:
                problems.append("noise_sigma and drop_prob must be non-decreasing from C to VL")
                break
            if (b.tempo_range[1] - b.tempo_range[0]) < (a.tempo_range[1] - a.tempo_range[0]):
                problems.append("tempo variability must be non-decreasing from C to VL")
                break
        for g, s in self.severity.items():
            if s.noise_sigma < 0 or not 0 <= s.drop_prob < 1 or not 0 < s.tempo_range[0] <= s.tempo_range[1]:
                problems.append(f"invalid severity values for group {g!r}")
        return problems


@dataclass(frozen=True, eq=False)
class SpeakerProfile:
    speaker_id: str
    group: str
    distortion: np.ndarray
    noise_sigma: float
    tempo_range: tuple[float, float]
    drop_prob: float

    def __eq__(self, other):
        return (
            isinstance(other, SpeakerProfile)
            and (self.speaker_id, self.group, self.noise_sigma, tuple(self.tempo_range), self.drop_prob)
            == (other.speaker_id, other.group, other.noise_sigma, tuple(other.tempo_range), other.drop_prob)
            and np.array_equal(self.distortion, other.distortion)
        )


@dataclass(frozen=True, eq=False)
class Utterance:
    utterance_id: str
    speaker_id: str
    group: str
    word: str
    block: str
    phonemes: tuple[str, ...]
    labels: tuple[int, ...]  # vocabulary indices, blank = 0
    frames: np.ndarray  # float32 [F_ac, T]
    boundaries: tuple[tuple[int, int], ...]  # inclusive (first, last) per phoneme

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and (self.utterance_id, self.speaker_id, self.group, self.word, self.block, self.phonemes, self.labels, self.boundaries)
            == (other.utterance_id, other.speaker_id, other.group, other.word, other.block, other.phonemes, other.labels, other.boundaries)
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.frames, other.frames)
        )

    def __hash__(self):
        return hash(self.utterance_id)


@dataclass(eq=False)
class Corpus:
    utterances: list[Utterance]
    speakers: dict[str, SpeakerProfile]
    lexicon: Lexicon
    inventory: tuple[str, ...]
    feature_dim: int
    seed: int | None = None

    def __post_init__(self):
        self._by_id = {u.utterance_id: u for u in self.utterances}

    def __eq__(self, other):
        return (
            isinstance(other, Corpus)
            and self.inventory == other.inventory
            and self.feature_dim == other.feature_dim
            and self.lexicon == other.lexicon
            and self.speakers == other.speakers
            and self.utterances == other.utterances
        )

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, utterance_id: str) -> Utterance:
        return self._by_id[utterance_id]

    @property
    def vocab_size(self) -> int:
        """Number of phoneme labels, excluding the blank."""
        return len(self.inventory)

    def speaker_counts(self) -> dict[str, int]:
        counts = {}
        for sp in self.speakers.values():
            counts[sp.group] = counts.get(sp.group, 0) + 1
        return counts


def _derived_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def make_prototypes(table: PhonemeFeatureTable, feature_dim: int, jitter: float, seed: int) -> np.ndarray:
    """Prototype acoustic vector per phoneme, ``[n_phonemes, feature_dim]``."""
    rng = np.random.default_rng(_derived_seed(seed, "prototypes"))
    proj = rng.normal(0.0, 1.0 / np.sqrt(table.n_features), size=(feature_dim, table.n_features))
    noise = rng.normal(0.0, jitter, size=(len(table), feature_dim))
    return table.features.astype(np.float64) @ proj.T + noise


def make_speakers(config: CorpusConfig, seed: int) -> dict[str, SpeakerProfile]:
    speakers = {}
    for g in config.groups:
        sev = config.severity[g]
        for k in range(config.n_speakers_per_group):
            sid = f"{g}{k + 1:02d}"
            rng = np.random.default_rng(_derived_seed(seed, "speaker", sid))
            F = config.feature_dim
            dist = np.eye(F) + sev.distortion_scale * rng.normal(0.0, 1.0 / np.sqrt(F), size=(F, F))
            speakers[sid] = SpeakerProfile(sid, g, dist, sev.noise_sigma, tuple(sev.tempo_range), sev.drop_prob)
    return speakers


def render_utterance(prototypes, phone_idx, speaker: SpeakerProfile, base_len: int, rng):
    """Return ``(signal, noise, boundaries)``; the utterance frames are ``signal + noise``."""
    lo, hi = speaker.tempo_range
    segments = []
    for p in phone_idx:
        n = max(1, int(round(base_len * rng.uniform(lo, hi))))
        keep = rng.random(n) >= speaker.drop_prob
        if not keep.any():
            keep[rng.integers(n)] = True
        segments.append(np.repeat(prototypes[p][:, None], int(keep.sum()), axis=1))
    bounds, start = [], 0
    for seg in segments:
        bounds.append((start, start + seg.shape[1] - 1))
        start += seg.shape[1]
    clean = np.concatenate(segments, axis=1)
    signal = speaker.distortion @ clean
    noise = speaker.noise_sigma * rng.normal(size=signal.shape)
    return signal, noise, tuple(bounds)


def generate_corpus(
    config: CorpusConfig | None = None,
    seed: int = 0,
    lexicon: Lexicon | None = None,
    table: PhonemeFeatureTable | None = None,
) -> Corpus:
    config = config or CorpusConfig()
    table = table or load_feature_table()
    lexicon = lexicon or load_lexicon()
    problems = config.validate() + lexicon.validate(table)
    if problems:
        raise CorpusValidationError(problems)

    protos = make_prototypes(table, config.feature_dim, config.prototype_jitter, seed)
    speakers = make_speakers(config, seed)
    utts = []
    for sid, sp in speakers.items():
        for word, phones in lexicon.entries.items():
            idx = [table.index(p) for p in phones]
            for rep in range(config.n_repetitions):
                block = BLOCKS[rep % len(BLOCKS)]
                uid = f"{sid}_{block}_{word}" if rep < len(BLOCKS) else f"{sid}_{block}_{word}_r{rep}"
                rng = np.random.default_rng(_derived_seed(seed, uid))
                signal, noise, bounds = render_utterance(protos, idx, sp, config.base_segment_len, rng)
                frames = (signal + noise).astype(np.float32)
                utts.append(
                    Utterance(uid, sid, sp.group, word, block, tuple(phones), tuple(i + 1 for i in idx), frames, bounds)
                )
    return Corpus(utts, speakers, lexicon, table.inventory, config.feature_dim, seed)


def measure_snr(corpus: Corpus, config: CorpusConfig, table: PhonemeFeatureTable | None = None) -> dict[str, float]:
    """Mean per-frame signal-to-noise ratio (dB) per group, re-rendering each utterance."""
    table = table or load_feature_table()
    protos = make_prototypes(table, config.feature_dim, config.prototype_jitter, corpus.seed)
    acc: dict[str, list[float]] = {}
    for u in corpus.utterances:
        rng = np.random.default_rng(_derived_seed(corpus.seed, u.utterance_id))
        sp = corpus.speakers[u.speaker_id]
        signal, noise, _ = render_utterance(protos, [l - 1 for l in u.labels], sp, config.base_segment_len, rng)
        s = (signal**2).sum(axis=0)
        n = np.maximum((noise**2).sum(axis=0), 1e-300)
        acc.setdefault(u.group, []).extend(10 * np.log10(s / n))
    return {g: float(np.mean(v)) for g, v in acc.items()}


@dataclass
class Splits:
    train: list[Utterance]
    valid: list[Utterance]
    test: list[Utterance]
    ctest: list[Utterance]

    def as_dict(self) -> dict[str, list[Utterance]]:
        return {"TRAIN": self.train, "VALID": self.valid, "TEST": self.test, "CTEST": self.ctest}


def split(corpus: Corpus, valid_fraction: float = 0.1, seed: int = 0) -> Splits:
    """TRAIN pool = every control block plus dysarthric B1/B3; TEST = dysarthric B2.

    VALID is a seeded random ``valid_fraction`` of the TRAIN pool and is removed
    from TRAIN. CTEST restricts TEST to common words.
    """
    pool, test = [], []
    for u in corpus.utterances:
        if u.group == "C" or u.block != "B2":
            pool.append(u)
        else:
            test.append(u)
    rng = np.random.default_rng(_derived_seed(seed, "valid-split"))
    n_valid = int(round(valid_fraction * len(pool)))
    chosen = set(rng.choice(len(pool), size=n_valid, replace=False).tolist()) if n_valid else set()
    train = [u for i, u in enumerate(pool) if i not in chosen]
    valid = [u for i, u in enumerate(pool) if i in chosen]
    ctest = [u for u in test if u.word in corpus.lexicon.common]
    return Splits(train, valid, test, ctest)


def corpus_splits(corpus: Corpus, valid_fraction: float = 0.1) -> Splits:
    """Splits with the dedicated VALID seed derived from the corpus seed."""
    return split(corpus, valid_fraction, seed=corpus.seed if corpus.seed is not None else 0)


# --- manifest -------------------------------------------------------------

MANIFEST_NAME = "manifest.jsonl"
FRAMES_NAME = "frames.bin"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_manifest(corpus: Corpus, path: str | Path) -> Path:
    """Write ``manifest.jsonl`` + ``frames.bin`` into directory ``path``.

    Frames are little-endian float32, column-major ``[F_ac, T]`` per utterance,
    concatenated in manifest order; ``frame_offset`` counts columns.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    chunks, records, offset = [], [], 0
    for u in corpus.utterances:
        chunks.append(np.asarray(u.frames, dtype="<f4").T.tobytes(order="C"))
        records.append(
            {
                "utterance_id": u.utterance_id,
                "speaker_id": u.speaker_id,
                "group": u.group,
                "word": u.word,
                "block": u.block,
                "phonemes": list(u.phonemes),
                "frame_offset": offset,
                "frame_count": u.n_frames,
                "boundaries": [list(b) for b in u.boundaries],
            }
        )
        offset += u.n_frames
    blob = b"".join(chunks)
    header = {
        "schema_version": SCHEMA_VERSION,
        "feature_dim": corpus.feature_dim,
        "checksum": _sha256(blob),
        "frames_file": FRAMES_NAME,
        "n_utterances": len(records),
        "seed": corpus.seed,
        "inventory": list(corpus.inventory),
        "lexicon": [[w, w in corpus.lexicon.common, list(p)] for w, p in corpus.lexicon.entries.items()],
        "speakers": [
            {
                "speaker_id": s.speaker_id,
                "group": s.group,
                "noise_sigma": s.noise_sigma,
                "tempo_range": list(s.tempo_range),
                "drop_prob": s.drop_prob,
                "distortion": np.asarray(s.distortion, dtype=np.float64).ravel().tolist(),
            }
            for s in corpus.speakers.values()
        ],
    }
    _atomic_write(out / FRAMES_NAME, blob)
    text = "\n".join(json.dumps(r, ensure_ascii=False, sort_keys=True) for r in [header] + records) + "\n"
    _atomic_write(out / MANIFEST_NAME, text.encode("utf-8"))
    return out


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_manifest(path: str | Path) -> Corpus:
    root = Path(path)
    mpath = root / MANIFEST_NAME if root.is_dir() else root
    root = mpath.parent
    lines = mpath.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestFormatError(f"{mpath}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"{mpath}: bad header: {exc}") from None
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestVersionError(f"{mpath}: unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    blob = (root / header.get("frames_file", FRAMES_NAME)).read_bytes()
    if _sha256(blob) != header.get("checksum"):
        raise ManifestChecksumError(f"{root / FRAMES_NAME}: checksum mismatch")

    try:
        F = int(header["feature_dim"])
        inventory = tuple(header["inventory"])
        vocab = {p: i + 1 for i, p in enumerate(inventory)}
        lexicon = Lexicon(
            {w: tuple(p) for w, _, p in header["lexicon"]},
            frozenset(w for w, c, _ in header["lexicon"] if c),
        )
        speakers = {}
        for s in header["speakers"]:
            speakers[s["speaker_id"]] = SpeakerProfile(
                s["speaker_id"],
                s["group"],
                np.array(s["distortion"], dtype=np.float64).reshape(F, F),
                s["noise_sigma"],
                tuple(s["tempo_range"]),
                s["drop_prob"],
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestFormatError(f"{mpath}: malformed header: {exc!r}") from None

    data = np.frombuffer(blob, dtype="<f4")
    utts = []
    for lineno, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        try:
            r = json.loads(ln)
            off, cnt = int(r["frame_offset"]), int(r["frame_count"])
            if (off + cnt) * F > data.size or cnt < 1:
                raise ValueError("frame range outside blob")
            frames = data[off * F : (off + cnt) * F].reshape(cnt, F).T.astype(np.float32)
            phones = tuple(r["phonemes"])
            bounds = tuple(tuple(int(x) for x in b) for b in r["boundaries"])
            if len(bounds) != len(phones):
                raise ValueError("boundary count differs from phoneme count")
            utts.append(
                Utterance(
                    r["utterance_id"],
                    r["speaker_id"],
                    r["group"],
                    r["word"],
                    r["block"],
                    phones,
                    tuple(vocab[p] for p in phones),
                    frames,
                    bounds,
                )
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ManifestFormatError(f"{mpath}:{lineno}: malformed record: {exc!r}") from None
    if len(utts) != header.get("n_utterances", len(utts)):
        raise ManifestFormatError(f"{mpath}: expected {header['n_utterances']} records, found {len(utts)}")
    return Corpus(utts, speakers, lexicon, inventory, F, header.get("seed"))


def manifest_checksum(path: str | Path) -> str:
    """Digest over manifest text and frame blob; equal digests mean identical corpora."""
    root = Path(path)
    return _sha256((root / MANIFEST_NAME).read_bytes() + (root / FRAMES_NAME).read_bytes())


def iter_group(utterances: Iterable[Utterance], group: str) -> list[Utterance]:
    return [u for u in utterances if u.group == group]
