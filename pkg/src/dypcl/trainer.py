"""Two-stage training: CTC only, then CTC plus phoneme-level contrastive loss.

Stage 2 walks the curriculum phases in order every epoch; each batch is drawn
from a single phase. Phoneme embeddings for the triplet loss are pooled with
one of three alignment modes (see ``dynalign``). The alignment path itself is
treated as constant during differentiation; gradients flow through the
pooling weights (dynamic mode) and the embedding columns.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ctc
from .checkpoint import Checkpoint
from .contrastive import LossConfig, LossReport, ctc_objective, total_loss, triplet_loss
from .curriculum import CurriculumSchedule, make_schedule, run_schedule
from .dynalign import (
    AlignmentMode,
    DegenerateSpanError,
    score_backward,
    timestamp_spans,
    weighted_pool,
    weighted_pool_backward,
)
from .evaluation import decode_utterances, edit_distance, lexicon_labels
from .model import AdamW, ModelParams, ModelShape, backward_batch, forward_batch, init_params
from .phonetics import get_scheme
from .sampler import TripletSpec
from .synthcorpus import Corpus, Splits, corpus_splits

log = logging.getLogger(__name__)


class TrainingDivergenceError(RuntimeError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    stage2_learning_rate: float = 3e-3
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    stage1_batch: int = 16
    stage2_batch: int = 8
    stage1_epochs: int = 30
    stage2_epochs: int = 5
    seed: int = 0
    alignment_mode: str = "dynamic"
    margin: float = 1.0
    lam: float = 0.5
    normalize: bool = False
    strategy: str = "GP"
    scheme: str = "3LV"
    epoch_budget: int = 2000
    hidden: int = 32
    embed: int = 16
    context: int = 1
    valid_fraction: float = 0.1

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self) -> list[str]:
        problems = []
        for name in ("stage1_batch", "stage2_batch", "epoch_budget", "hidden", "embed"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("stage1_epochs", "stage2_epochs", "context"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("learning_rate", "stage2_learning_rate", "weight_decay", "margin", "lam"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be non-negative")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            problems.append("betas must be two values in [0, 1)")
        try:
            AlignmentMode.parse(self.alignment_mode)
        except ValueError:
            problems.append(f"unknown alignment mode {self.alignment_mode!r}")
        try:
            get_scheme(self.scheme)
        except (KeyError, ValueError):
            problems.append(f"unknown difficulty scheme {self.scheme!r}")
        if self.strategy.upper() not in ("R", "G", "P", "PG", "GP"):
            problems.append(f"unknown curriculum strategy {self.strategy!r}")
        return problems

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(margin=self.margin, lam=self.lam, normalize=self.normalize)

    def model_shape(self, feature_dim: int, n_labels: int) -> ModelShape:
        return ModelShape(feature_dim, self.hidden, self.embed, self.context, n_labels)


@dataclass
class RunLogger:
    """Writes the JSONL run log and the ``step,l_ctc,l_triplet,l_total`` loss CSV."""

    log_dir: Path | None = None
    records: list = field(default_factory=list)

    def __post_init__(self):
        self._csv = None
        if self.log_dir is not None:
            self.log_dir = Path(self.log_dir)
            self.log_dir.mkdir(parents=True, exist_ok=True)

    def open(self, resume: bool):
        if self.log_dir is None:
            return
        mode = "a" if resume and (self.log_dir / "losses.csv").exists() else "w"
        self._csv_fh = open(self.log_dir / "losses.csv", mode, newline="", encoding="utf-8")
        self._csv = csv.writer(self._csv_fh)
        if mode == "w":
            self._csv.writerow(["step", "l_ctc", "l_triplet", "l_total"])
            (self.log_dir / "run_log.jsonl").write_text("", encoding="utf-8")

    def loss(self, step: int, l_ctc: float, l_triplet: float, l_total: float):
        if self._csv is not None:
            self._csv.writerow([step, repr(l_ctc), repr(l_triplet), repr(l_total)])

    def event(self, record: dict):
        self.records.append(record)
        if self.log_dir is not None:
            with open(self.log_dir / "run_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self._csv is not None:
            self._csv_fh.close()
            self._csv = None


def _check_finite(value: float, what: str, epoch: int, step: int):
    if not math.isfinite(value):
        raise TrainingDivergenceError(f"non-finite {what} ({value}) at epoch {epoch}, step {step}")


def validation_scores(params: ModelParams, utterances, lexicon) -> tuple[float, float]:
    """Utterance-level WER and corpus-level PER over ``utterances``."""
    decoded = decode_utterances(params, list(utterances), lexicon)
    wrong = sum(int(w != u.word) for u, (_, w) in zip(utterances, decoded))
    edits = sum(edit_distance(u.labels, h) for u, (h, _) in zip(utterances, decoded))
    return wrong / len(utterances), edits / sum(len(u.labels) for u in utterances)


def _better(cand: tuple[float, float], best: dict) -> bool:
    # lower WER first, then lower PER; earlier epoch keeps ties
    if not best:
        return True
    return cand < (best["valid_wer"], best["valid_per"])


def _feasible(u) -> bool:
    return u.n_frames >= ctc.min_frames(u.labels)


def _optimizer(params, cfg: TrainConfig, lr: float, total_steps: int, ck: Checkpoint | None = None) -> AdamW:
    opt = AdamW(params, lr=lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay, total_steps=total_steps)
    if ck is not None and ck.adam_m is not None:
        opt.m, opt.v, opt.t = ck.adam_m.copy(), ck.adam_v.copy(), ck.adam_t
    return opt


# --- stage 1 --------------------------------------------------------------


def stage1_step(params: ModelParams, utterances) -> tuple[float, ModelParams, int]:
    """Mean CTC loss over a batch and its parameter gradient; infeasible utterances are skipped."""
    use = [u for u in utterances if _feasible(u)]
    skipped = len(utterances) - len(use)
    if not use:
        return math.nan, params.zeros_like(), skipped
    _, logits, cache = forward_batch(params, [u.frames for u in use])
    losses, dz = [], []
    for u, z in zip(use, logits):
        loss, g = ctc.ctc_loss(z, u.labels)
        losses.append(loss)
        dz.append(g / len(use))
    grads = backward_batch(params, cache, [None] * len(use), dz)
    return ctc_objective(losses), grads, skipped


def train_stage1(
    corpus: Corpus,
    cfg: TrainConfig,
    splits: Splits | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    log_dir: str | Path | None = None,
) -> Checkpoint:
    """CTC training with per-epoch validation and best-model selection.

    ``stop_after`` ends the run after that many completed epochs (the
    returned checkpoint can be passed back as ``resume``).
    """
    problems = cfg.validate()
    if problems:
        raise PreconditionError("; ".join(problems))
    splits = splits or corpus_splits(corpus, cfg.valid_fraction)
    if not splits.train or not splits.valid:
        raise PreconditionError("TRAIN and VALID splits must be non-empty")
    lexicon = lexicon_labels(corpus)
    shape = cfg.model_shape(corpus.feature_dim, corpus.vocab_size)
    n_batches = math.ceil(len(splits.train) / cfg.stage1_batch)
    total_steps = max(1, cfg.stage1_epochs * n_batches)
    logger = RunLogger(None if log_dir is None else Path(log_dir))

    if resume is not None:
        if resume.stage != 1 or resume.config != cfg.to_dict():
            raise PreconditionError("resume checkpoint was produced by a different stage or config")
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        params = resume.last.copy()
        opt = _optimizer(params, cfg, cfg.learning_rate, total_steps, resume)
        epoch, step = resume.epoch, resume.step
        best, best_params, history = dict(resume.best), resume.params.copy(), list(resume.history)
    else:
        rng = np.random.default_rng(cfg.seed)
        params = init_params(shape, rng)
        opt = _optimizer(params, cfg, cfg.learning_rate, total_steps)
        epoch, step = 0, 0
        best, best_params, history = {}, params.copy(), []
    logger.open(resume is not None)
    try:
        while epoch < cfg.stage1_epochs and (stop_after is None or epoch < stop_after):
            order = rng.permutation(len(splits.train))
            ep_losses, skipped = [], 0
            for b in range(n_batches):
                batch = [splits.train[i] for i in order[b * cfg.stage1_batch : (b + 1) * cfg.stage1_batch]]
                loss, grads, sk = stage1_step(params, batch)
                skipped += sk
                if math.isnan(loss) and sk == len(batch):
                    continue
                _check_finite(loss, "CTC loss", epoch, step)
                opt.step(params, grads)
                if not params.is_finite():
                    raise TrainingDivergenceError(f"non-finite parameters after step {step} (epoch {epoch})")
                step += 1
                ep_losses.append(loss)
                logger.loss(step, loss, 0.0, loss)
            epoch += 1
            vw, vp = validation_scores(params, splits.valid, lexicon)
            rec = {"stage": 1, "epoch": epoch, "step": step, "train_ctc": float(np.mean(ep_losses)) if ep_losses else None,
                   "valid_wer": vw, "valid_per": vp, "skipped_infeasible": skipped}
            history.append(rec)
            logger.event(rec)
            if _better((vw, vp), best):
                best = {"epoch": epoch, "valid_wer": vw, "valid_per": vp}
                best_params = params.copy()
            log.info("stage1 epoch %d: ctc %.4f valid WER %.3f PER %.3f", epoch, rec["train_ctc"] or float("nan"), vw, vp)
    finally:
        logger.close()
    return Checkpoint(
        stage=1,
        params=best_params,
        config=cfg.to_dict(),
        seed=cfg.seed,
        epoch=epoch,
        step=step,
        rng_state=rng.bit_generator.state,
        last=params,
        adam_m=opt.m,
        adam_v=opt.v,
        adam_t=opt.t,
        best=best,
        history=history,
        meta={"complete": epoch >= cfg.stage1_epochs, "corpus_seed": corpus.seed},
    )


# --- stage 2 --------------------------------------------------------------


@dataclass
class SnapshotAligner:
    """Alignments of a fixed parameter snapshot, computed once per utterance."""

    params: ModelParams
    cache: dict = field(default_factory=dict)

    def __post_init__(self):
        self.digest = self.params.digest()

    def align(self, u) -> ctc.AlignmentResult:
        a = self.cache.get(u.utterance_id)
        if a is None:
            _, logits, _ = forward_batch(self.params, [u.frames])
            a = ctc.ctc_forced_align(logits[0], u.labels)
            self.cache[u.utterance_id] = a
        return a

    def timestamp_frames(self, u) -> list[tuple[int, int]]:
        key = ("ts", u.utterance_id)
        spans = self.cache.get(key)
        if spans is None:
            spans = timestamp_spans(self.align(u).boundaries(), u.n_frames)
            self.cache[key] = spans
        return spans


@dataclass
class BatchResult:
    report: LossReport
    grads: ModelParams
    n_triplets: int
    skipped: int


def stage2_step(
    params: ModelParams,
    batch: Sequence[TripletSpec],
    lookup: Mapping,
    mode,
    loss_cfg: LossConfig,
    snapshot: SnapshotAligner | None = None,
    fixed_states: Mapping | None = None,
) -> BatchResult | None:
    """Combined objective on a triplet batch and its exact gradient (path held fixed).

    ``fixed_states`` maps utterance id to a state path; in dynamic mode it
    replaces the live Viterbi path (used for finite-difference checks).
    Returns ``None`` when every triplet in the batch had to be skipped.
    """
    mode = AlignmentMode.parse(mode)
    if mode is not AlignmentMode.DYNAMIC and snapshot is None:
        raise PreconditionError(f"{mode.value} mode needs a snapshot aligner")
    keep = []
    for t in batch:
        if all(_feasible(lookup[o.utterance_id]) for o in (t.anchor, t.positive, t.negative)):
            keep.append(t)
    skipped = len(batch) - len(keep)

    uids = list(dict.fromkeys(o.utterance_id for t in keep for o in (t.anchor, t.positive, t.negative)))
    if not uids:
        return None
    index = {uid: i for i, uid in enumerate(uids)}
    utts = [lookup[uid] for uid in uids]
    embs, logits, cache = forward_batch(params, [u.frames for u in utts])

    ctc_cache = {}
    align_cache = {}

    def ctc_of(i):
        if i not in ctc_cache:
            ctc_cache[i] = ctc.ctc_loss(logits[i], utts[i].labels)
        return ctc_cache[i]

    def pool(occ):
        """Return (vector, backward) for one phoneme occurrence."""
        i = index[occ.utterance_id]
        u = utts[i]
        if mode is AlignmentMode.TIMESTAMP:
            f, l = snapshot.timestamp_frames(u)[occ.position]
            cols = embs[i][:, f : l + 1]
            k = l - f + 1

            def back(d_vec, d_emb, d_logit):
                d_emb[i][:, f : l + 1] += np.outer(d_vec, np.full(k, 1.0 / k))

            return cols.mean(axis=1), back
        if mode is AlignmentMode.FROZEN_LOGIT:
            al = snapshot.align(u)
        else:
            if i not in align_cache:
                if fixed_states is not None and u.utterance_id in fixed_states:
                    align_cache[i] = ctc.alignment_from_states(logits[i], u.labels, fixed_states[u.utterance_id])
                else:
                    align_cache[i] = ctc.ctc_forced_align(logits[i], u.labels)
            al = align_cache[i]
        sp = al.spans[occ.position]
        f, l = sp.first, sp.last
        cols = embs[i][:, f : l + 1]
        vec = weighted_pool(cols, sp.scores)

        def back(d_vec, d_emb, d_logit):
            d_cols, d_s = weighted_pool_backward(cols, sp.scores, d_vec)
            d_emb[i][:, f : l + 1] += d_cols
            if mode is AlignmentMode.DYNAMIC:
                d_logit[i][:, f : l + 1] += score_backward(logits[i][:, f : l + 1], al.symbols[f : l + 1], d_s)

        return vec, back

    d_emb = [np.zeros_like(e) for e in embs]
    d_logit = [np.zeros_like(z) for z in logits]
    ctc_a, ctc_p, ctc_n, trip = [], [], [], []
    pending = []
    final = []
    for t in keep:
        try:
            pooled = [pool(o) for o in (t.anchor, t.positive, t.negative)]
        except (DegenerateSpanError, ctc.InfeasibleAlignmentError):
            skipped += 1
            continue
        final.append(t)
        pending.append(pooled)
    n = len(final)
    if n == 0:
        return None
    for t, pooled in zip(final, pending):
        for occ, bucket in zip((t.anchor, t.positive, t.negative), (ctc_a, ctc_p, ctc_n)):
            i = index[occ.utterance_id]
            loss, g = ctc_of(i)
            bucket.append(loss)
            d_logit[i] += g / (3 * n)
        lt, (ga, gp, gn) = triplet_loss(pooled[0][0], pooled[1][0], pooled[2][0], loss_cfg.margin, loss_cfg.normalize)
        trip.append(lt)
        if loss_cfg.lam > 0 and lt > 0:
            s = loss_cfg.lam / n
            for (_, back), gvec in zip(pooled, (ga, gp, gn)):
                back(s * gvec, d_emb, d_logit)
    report = total_loss(ctc_a, ctc_p, ctc_n, trip, loss_cfg)
    grads = backward_batch(params, cache, d_emb, d_logit)
    return BatchResult(report, grads, n, skipped)


def stage2_steps_per_epoch(schedule: CurriculumSchedule, batch: int) -> int:
    return sum(math.ceil(p.budget / batch) for p in schedule.phases)


def _phase_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence((seed, 2, epoch)).generate_state(1)[0])


def train_stage2(
    corpus: Corpus,
    stage1: Checkpoint,
    triplets: Sequence[TripletSpec],
    cfg: TrainConfig,
    schedule: CurriculumSchedule | None = None,
    splits: Splits | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    log_dir: str | Path | None = None,
) -> Checkpoint:
    """CTC + contrastive training over the curriculum, starting from ``stage1``."""
    if stage1 is None or stage1.stage != 1:
        raise PreconditionError("stage 2 requires a stage-1 checkpoint")
    problems = cfg.validate()
    if problems:
        raise PreconditionError("; ".join(problems))
    if not triplets:
        raise PreconditionError("stage 2 requires a non-empty triplet list")
    mode = AlignmentMode.parse(cfg.alignment_mode)
    scheme = get_scheme(cfg.scheme)
    schedule = schedule or make_schedule(cfg.strategy, scheme, cfg.epoch_budget)
    splits = splits or corpus_splits(corpus, cfg.valid_fraction)
    lexicon = lexicon_labels(corpus)
    lookup = {u.utterance_id: u for u in corpus.utterances}
    total_steps = max(1, cfg.stage2_epochs * stage2_steps_per_epoch(schedule, cfg.stage2_batch))
    loss_cfg = cfg.loss
    snapshot = SnapshotAligner(stage1.params.copy()) if mode is not AlignmentMode.DYNAMIC else None
    logger = RunLogger(None if log_dir is None else Path(log_dir))

    if resume is not None:
        if resume.stage != 2 or resume.config != cfg.to_dict():
            raise PreconditionError("resume checkpoint was produced by a different stage or config")
        params = resume.last.copy()
        opt = _optimizer(params, cfg, cfg.stage2_learning_rate, total_steps, resume)
        epoch, step = resume.epoch, resume.step
        best, best_params, history = dict(resume.best), resume.params.copy(), list(resume.history)
    else:
        params = stage1.params.copy()
        opt = _optimizer(params, cfg, cfg.stage2_learning_rate, total_steps)
        epoch, step, best, best_params, history = 0, 0, {}, params.copy(), []
    logger.open(resume is not None)
    if resume is None:
        logger.event({"event": "schedule", "strategy": schedule.strategy, "n_phases": len(schedule.phases),
                      "phases": schedule.to_records(), "alignment_mode": mode.value})
    try:
        while epoch < cfg.stage2_epochs and (stop_after is None or epoch < stop_after):
            for k, phase, trips in run_schedule(triplets, schedule, _phase_seed(cfg.seed, epoch)):
                sums = np.zeros(3)
                n_batches = n_trip = n_skip = 0
                for b in range(0, len(trips), cfg.stage2_batch):
                    res = stage2_step(params, trips[b : b + cfg.stage2_batch], lookup, mode, loss_cfg, snapshot)
                    if res is None:
                        n_skip += len(trips[b : b + cfg.stage2_batch])
                        continue
                    r = res.report
                    _check_finite(r.l_total, "stage-2 loss", epoch, step)
                    opt.step(params, res.grads)
                    if not params.is_finite():
                        raise TrainingDivergenceError(f"non-finite parameters after step {step} (epoch {epoch})")
                    step += 1
                    logger.loss(step, r.l_ctc, r.l_triplet, r.l_total)
                    sums += (r.l_ctc, r.l_triplet, r.l_total)
                    n_batches += 1
                    n_trip += res.n_triplets
                    n_skip += res.skipped
                g, bn = phase.describe(scheme)
                logger.event({"stage": 2, "epoch": epoch + 1, "phase_index": k, "groups": g, "bin": bn,
                              "n_triplets": n_trip, "skipped": n_skip,
                              **dict(zip(("l_ctc", "l_triplet", "l_total"), (sums / max(n_batches, 1)).tolist()))})
            epoch += 1
            vw, vp = validation_scores(params, splits.valid, lexicon)
            rec = {"stage": 2, "epoch": epoch, "step": step, "valid_wer": vw, "valid_per": vp}
            history.append(rec)
            logger.event(rec)
            if _better((vw, vp), best):
                best = {"epoch": epoch, "valid_wer": vw, "valid_per": vp}
                best_params = params.copy()
            log.info("stage2 epoch %d: valid WER %.3f PER %.3f", epoch, vw, vp)
    finally:
        logger.close()
    if snapshot is not None and snapshot.params.digest() != snapshot.digest:
        raise RuntimeError("aligner snapshot changed during stage 2")
    return Checkpoint(
        stage=2,
        params=best_params,
        config=cfg.to_dict(),
        seed=cfg.seed,
        epoch=epoch,
        step=step,
        rng_state=None,
        last=params,
        adam_m=opt.m,
        adam_v=opt.v,
        adam_t=opt.t,
        best=best,
        history=history,
        meta={
            "complete": epoch >= cfg.stage2_epochs,
            "stage1_digest": stage1.params.digest(),
            "snapshot_digest": None if snapshot is None else snapshot.digest,
            "n_phases": len(schedule.phases),
            "corpus_seed": corpus.seed,
        },
    )
