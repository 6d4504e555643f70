"""Binary checkpoint format.

Layout::

    8 bytes   magic b"DYPCLCK1"
    4 bytes   header length n (little-endian uint32)
    n bytes   JSON header (schema_version, shapes, config hash, seed, rng state, ...)
    ...       little-endian float32 blobs, in the order listed by ``header["blobs"]``
    32 bytes  SHA-256 of everything above

Parameters are kept float32-representable during training, so save/load is
lossless.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import PARAM_NAMES, ModelParams, ModelShape

MAGIC = b"DYPCLCK1"
SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    stage: int
    params: ModelParams  # selected model
    config: dict
    seed: int
    epoch: int = 0  # completed epochs
    step: int = 0
    rng_state: dict | None = None
    last: ModelParams | None = None  # most recent weights, for resuming
    adam_m: ModelParams | None = None
    adam_v: ModelParams | None = None
    adam_t: int = 0
    best: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> ModelShape:
        return self.params.shape

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def complete(self) -> bool:
        return self.meta.get("complete", False)


def _groups(ck: Checkpoint):
    yield "param", ck.params
    for name in ("last", "adam_m", "adam_v"):
        p = getattr(ck, name)
        if p is not None:
            yield name, p


def save_checkpoint(ck: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    blobs, chunks = [], []
    for group, p in _groups(ck):
        for name in PARAM_NAMES:
            a = np.asarray(p[name])
            f32 = a.astype("<f4")
            if not np.array_equal(f32.astype(np.float64), a):
                raise CheckpointError(f"{group}/{name} is not float32-representable")
            blobs.append({"name": f"{group}/{name}", "shape": list(a.shape)})
            chunks.append(f32.tobytes(order="C"))
    header = {
        "schema_version": SCHEMA_VERSION,
        "stage": ck.stage,
        "shape": asdict(ck.shape),
        "config": ck.config,
        "config_hash": ck.config_hash,
        "seed": ck.seed,
        "epoch": ck.epoch,
        "step": ck.step,
        "rng_state": ck.rng_state,
        "adam_t": ck.adam_t,
        "best": ck.best,
        "history": ck.history,
        "meta": ck.meta,
        "blobs": blobs,
    }
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)
    data = body + hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def _json_default(o: Any):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 4 + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    (n,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12 : 12 + n].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {header.get('schema_version')!r}")
    shape = ModelShape(**header["shape"])
    arrays: dict[str, dict[str, np.ndarray]] = {}
    off = 12 + n
    for b in header["blobs"]:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        a = np.frombuffer(body, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(b["shape"])
        off += 4 * count
        group, name = b["name"].split("/", 1)
        arrays.setdefault(group, {})[name] = a
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter blobs")
    groups = {g: ModelParams(shape, a) for g, a in arrays.items()}
    return Checkpoint(
        stage=header["stage"],
        params=groups["param"],
        config=header["config"],
        seed=header["seed"],
        epoch=header["epoch"],
        step=header["step"],
        rng_state=header["rng_state"],
        last=groups.get("last"),
        adam_m=groups.get("adam_m"),
        adam_v=groups.get("adam_v"),
        adam_t=header["adam_t"],
        best=header["best"],
        history=header["history"],
        meta=header["meta"],
    )
