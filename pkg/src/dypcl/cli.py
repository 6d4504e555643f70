"""``dypcl`` command-line interface.

Exit codes: 0 success, 2 validation/input error, 3 runtime or numeric error.
Every command writes a run manifest (JSON) next to its main output; the
``replay`` command re-executes a manifest's recorded arguments.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, curriculum, dynalign, evaluation, phonetics, sampler, synthcorpus, trainer
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import forward_batch

log = logging.getLogger("dypcl")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
REFERENCE_MEAN, REFERENCE_MEDIAN = 0.28, 0.29


class ValidationError(Exception):
    """Bad user input; maps to exit code 2."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path: str | None) -> dict:
    """Read a YAML or JSON mapping (JSON is valid YAML)."""
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"{p}: cannot parse config: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{p}: config must be a mapping")
    return data


def write_run_manifest(path: Path, record: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.suffix == "" else out.with_name(out.name + ".run.json")


def _load_corpus(path):
    p = Path(path)
    if not (p / synthcorpus.MANIFEST_NAME).is_file() and not p.is_file():
        raise ValidationError(f"corpus manifest not found: {p}")
    return synthcorpus.load_manifest(p)


# --- commands -------------------------------------------------------------


def cmd_gen_data(args):
    cfg_dict = load_config(args.config)
    lexicon_path = cfg_dict.pop("lexicon", None)
    features_path = cfg_dict.pop("features", None)
    try:
        config = synthcorpus.CorpusConfig.from_dict(cfg_dict)
    except (synthcorpus.CorpusError, TypeError) as exc:
        raise ValidationError(str(exc)) from None
    table = phonetics.load_feature_table(features_path)
    lexicon = synthcorpus.load_lexicon(lexicon_path)
    corpus = synthcorpus.generate_corpus(config, args.seed, lexicon, table)
    out = synthcorpus.save_manifest(corpus, args.out)
    checksum = synthcorpus.manifest_checksum(out)
    splits = synthcorpus.corpus_splits(corpus)
    summary = {
        "n_utterances": len(corpus),
        "n_speakers": len(corpus.speakers),
        "n_words": len(corpus.lexicon.entries),
        "speaker_counts": corpus.speaker_counts(),
        "split_sizes": {k: len(v) for k, v in splits.as_dict().items()},
        "checksum": checksum,
    }
    print(f"wrote {len(corpus)} utterances from {len(corpus.speakers)} speakers to {out}")
    print(f"checksum {checksum}")
    return out, {"corpus": config.to_dict(), "lexicon": lexicon_path, "features": features_path}, summary


def cmd_distance_matrix(args):
    path = args.features
    if path is not None and not Path(path).is_file():
        raise ValidationError(f"feature table not found: {path}")
    table = phonetics.load_feature_table(path)
    m = phonetics.build_distance_matrix(table)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    m.to_csv(out)
    stats = phonetics.distance_stats(m)
    summary = {k: stats[k] for k in ("mean", "median", "min", "max", "n_pairs")}
    print(f"wrote {len(table)}x{len(table)} distance matrix to {out}")
    if args.stats:
        print(f"mean   {stats['mean']:.4f}  (reference {REFERENCE_MEAN:.2f})")
        print(f"median {stats['median']:.4f}  (reference {REFERENCE_MEDIAN:.2f})")
        print(f"min    {stats['min']:.4f}  max {stats['max']:.4f}  pairs {stats['n_pairs']}")
        for lo, hi, n in stats["histogram"]:
            print(f"  [{lo:.2f}, {hi:.2f})  {n}")
    return out, {"features": path}, summary


def _parse_caps(text: str, epoch_size: int) -> sampler.SamplingCaps:
    try:
        pos, neg = (int(x) for x in text.split(","))
        return sampler.SamplingCaps(pos, neg, epoch_size)
    except ValueError:
        raise ValidationError(f"--caps expects two positive integers like 5,5, got {text!r}") from None


def cmd_build_triplets(args):
    corpus = _load_corpus(args.corpus)
    caps = _parse_caps(args.caps, args.epoch_size)
    try:
        scheme = phonetics.get_scheme(args.scheme)
    except (KeyError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    table = phonetics.load_feature_table(args.features)
    splits = synthcorpus.corpus_splits(corpus)
    trips = sampler.build_triplets(splits.train, table, caps, scheme, seed=args.seed, healthy_only=args.healthy_only)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sampler.save_triplets(trips, out, header={"scheme": scheme.name, "caps": args.caps, "seed": args.seed})
    hist = trips.bin_histogram()
    by_bin = {scheme.bin_label(b): hist.get(b, 0) for b in range(scheme.n_bins)}
    n_anchors = len({t.anchor.ref for t in trips})
    print(f"wrote {len(trips)} triplets from {n_anchors} anchors to {out}")
    for label, n in by_bin.items():
        print(f"  {label:<6} {n}")
    if trips.skipped:
        print("skipped: " + ", ".join(f"{k}={v}" for k, v in sorted(trips.skipped.items())))
    summary = {"n_triplets": len(trips), "n_anchors": n_anchors, "per_bin": by_bin, "skipped": dict(trips.skipped)}
    return out, {"caps": args.caps, "scheme": scheme.name, "epoch_size": args.epoch_size}, summary


_TRAIN_FLAGS = {
    "strategy": "strategy",
    "scheme": "scheme",
    "align_mode": "alignment_mode",
    "margin": "margin",
    "lam": "lam",
    "lr": "learning_rate",
    "stage2_lr": "stage2_learning_rate",
    "epochs": None,  # stage-dependent
    "epoch_budget": "epoch_budget",
}


def _train_config(args) -> trainer.TrainConfig:
    d = load_config(args.config)
    d["seed"] = args.seed
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if flag == "epochs":
            key = "stage1_epochs" if args.stage == 1 else "stage2_epochs"
        if flag == "align_mode":
            v = dynalign.AlignmentMode.parse(v).value
        d[key] = v
    try:
        cfg = trainer.TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None
    problems = cfg.validate()
    if problems:
        raise ValidationError("invalid training config:\n  " + "\n  ".join(problems))
    return cfg


def cmd_train(args):
    cfg = _train_config(args)
    corpus = _load_corpus(args.corpus)
    out = Path(args.out)
    log_dir = Path(args.log_dir) if args.log_dir else out.with_name(out.name + ".logs")
    resume = load_checkpoint(args.resume) if args.resume else None
    if args.stage == 1:
        ck = trainer.train_stage1(corpus, cfg, resume=resume, stop_after=args.stop_after, log_dir=log_dir)
        extra = {}
    else:
        if not args.stage1:
            raise trainer.PreconditionError("stage 2 requires --stage1 CKPT (a stage-1 checkpoint)")
        if not args.triplets:
            raise trainer.PreconditionError("stage 2 requires --triplets PATH")
        s1 = load_checkpoint(args.stage1)
        if s1.stage != 1:
            raise trainer.PreconditionError(f"{args.stage1} is a stage-{s1.stage} checkpoint, expected stage 1")
        trips = sampler.load_triplets(args.triplets, {u.utterance_id: u for u in corpus.utterances})
        schedule = curriculum.make_schedule(cfg.strategy, phonetics.get_scheme(cfg.scheme), cfg.epoch_budget)
        print(f"curriculum {schedule.strategy}: {len(schedule.phases)} phases")
        print(schedule.dump())
        ck = trainer.train_stage2(corpus, s1, trips, cfg, schedule=schedule, resume=resume,
                                  stop_after=args.stop_after, log_dir=log_dir)
        extra = {"stage1": str(args.stage1), "triplets": str(args.triplets), "n_phases": len(schedule.phases)}
    save_checkpoint(ck, out)
    print(f"stage {args.stage}: {ck.epoch} epochs, {ck.step} steps; best epoch {ck.best.get('epoch')} "
          f"(valid WER {ck.best.get('valid_wer', float('nan')):.4f}, PER {ck.best.get('valid_per', float('nan')):.4f})")
    print(f"wrote {out}")
    summary = {"best": ck.best, "epochs": ck.epoch, "steps": ck.step, "params_digest": ck.params.digest(),
               "log_dir": str(log_dir), **extra}
    return out, {"train": cfg.to_dict(), "stage": args.stage}, summary


def export_embeddings(params, utterances, path) -> int:
    """Alignment-pooled phoneme embeddings of ``utterances`` under ``params``."""
    def rows():
        for i in range(0, len(utterances), 128):
            chunk = utterances[i : i + 128]
            embs, logits, _ = forward_batch(params, [u.frames for u in chunk])
            for u, e, z in zip(chunk, embs, logits):
                for ph, pe in zip(u.phonemes, dynalign.extract_all(e, z, u.labels)):
                    yield u.utterance_id, ph, u.group, pe.vector

    return dynalign.export_embeddings_csv(path, rows())


def cmd_eval(args):
    corpus = _load_corpus(args.corpus)
    ck = load_checkpoint(args.ckpt)
    splits = synthcorpus.corpus_splits(corpus, ck.config.get("valid_fraction", 0.1))
    utts = splits.as_dict()[args.split.upper()]
    if not utts:
        raise ValidationError(f"split {args.split} is empty")
    report = evaluation.wer_report(ck.params, utts, evaluation.lexicon_labels(corpus), corpus.speaker_counts())
    print(f"{args.split.upper()}: {len(utts)} utterances, stage-{ck.stage} checkpoint {args.ckpt}")
    print(report.table())
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(Path(args.ckpt).name + f".{args.split.lower()}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(), encoding="utf-8")
    print(f"wrote {out}")
    summary = {"split": args.split.upper(), "report": report.to_dict()}
    if args.export_embeddings:
        n = export_embeddings(ck.params, utts, args.export_embeddings)
        print(f"wrote {n} phoneme embeddings to {args.export_embeddings}")
        summary["embeddings"] = {"path": args.export_embeddings, "rows": n}
    return out, {"split": args.split.upper()}, summary


def cmd_replay(args):
    rec = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = list(rec["argv"])
    if args.out:
        i = argv.index("--out")
        argv[i + 1] = args.out
    print("replaying: dypcl " + " ".join(argv))
    code = main(argv)
    if code != EXIT_OK:
        raise RuntimeError(f"replayed command exited with code {code}")
    return None, {"replayed": str(args.manifest)}, {"argv": argv}


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dypcl", description="Phoneme-level contrastive learning toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--config", help="YAML/JSON corpus config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("distance-matrix", help="phoneme feature-distance matrix")
    d.add_argument("--features", help="feature table TSV (default: bundled)")
    d.add_argument("--out", required=True, help="CSV output path")
    d.add_argument("--stats", action="store_true", help="print summary statistics")
    d.set_defaults(func=cmd_distance_matrix)

    b = sub.add_parser("build-triplets", help="enumerate anchor/positive/negative triplets")
    b.add_argument("--corpus", required=True)
    b.add_argument("--caps", default="5,5", help="max positives per anchor, max negatives per pair")
    b.add_argument("--epoch-size", type=int, default=2000)
    b.add_argument("--scheme", default="3LV")
    b.add_argument("--features", help="feature table TSV (default: bundled)")
    b.add_argument("--healthy-only", action="store_true", help="draw positives from other control speakers")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_triplets)

    t = sub.add_parser("train", help="stage-1 (CTC) or stage-2 (CTC + contrastive) training")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help="YAML/JSON training config; flags override it")
    t.add_argument("--stage1", help="stage-1 checkpoint (stage 2 only)")
    t.add_argument("--triplets", help="triplet file (stage 2 only)")
    t.add_argument("--strategy", choices=curriculum.STRATEGIES)
    t.add_argument("--scheme", choices=sorted(phonetics.SCHEMES))
    t.add_argument("--align-mode", dest="align_mode", choices=("timestamp", "frozen", "frozen_logit", "dynamic"))
    t.add_argument("--margin", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--lr", type=float, help="stage-1 learning rate")
    t.add_argument("--stage2-lr", dest="stage2_lr", type=float)
    t.add_argument("--epochs", type=int, help="epochs for the selected stage")
    t.add_argument("--epoch-budget", dest="epoch_budget", type=int, help="triplets per stage-2 epoch")
    t.add_argument("--resume", help="continue from a partial checkpoint of the same run")
    t.add_argument("--stop-after", dest="stop_after", type=int, help="stop after this many epochs")
    t.add_argument("--log-dir", help="run log directory (default: <out>.logs)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-group WER/PER report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="TEST", type=str.upper, choices=("TEST", "CTEST", "VALID", "TRAIN"))
    e.add_argument("--export-embeddings", help="write phoneme embeddings CSV")
    e.add_argument("--out", help="report CSV path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", help="replacement output path")
    r.set_defaults(func=cmd_replay)
    return p


VALIDATION_ERRORS = (
    ValidationError,
    synthcorpus.CorpusError,
    trainer.PreconditionError,
    phonetics.FeatureTableError,
    phonetics.UnknownPhonemeError,
    FileNotFoundError,
    CheckpointError,
)
RUNTIME_ERRORS = (trainer.TrainingDivergenceError, curriculum.PhaseStarvationError, ArithmeticError, RuntimeError, ValueError)


def _digest(path: Path) -> str | None:
    """sha256 of a file, or the manifest checksum of a corpus directory."""
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    if (path / synthcorpus.MANIFEST_NAME).is_file():
        return synthcorpus.manifest_checksum(path)
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        out, config, summary = args.func(args)
    except VALIDATION_ERRORS as exc:
        msg = "\n  ".join(exc.problems) if isinstance(exc, synthcorpus.CorpusValidationError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if out is not None:
        write_run_manifest(
            _manifest_path(Path(out)),
            {
                "command": args.command,
                "argv": argv,
                "config": config,
                "seed": getattr(args, "seed", None),
                "inputs": {
                    k: {"path": getattr(args, k), "sha256": _digest(Path(getattr(args, k)))}
                    for k in ("corpus", "ckpt", "stage1", "triplets", "features", "config")
                    if getattr(args, k, None)
                },
                "outputs": [{"path": str(out), "sha256": _digest(Path(out))}],
                "version": __version__,
                "numpy": np.__version__,
                "started": started,
                "finished": _now(),
                "summary": summary,
            },
        )
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
