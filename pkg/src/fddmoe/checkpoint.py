"""Versioned checkpoint file: model parameters plus optional optimizer state.

Layout: ``b"FDDM"`` | version (u16 LE) | manifest length (u32 LE) | JSON
manifest | float32 LE payload in manifest order | CRC32 of payload (u32 LE).
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .channels import TaskConfig
from .endtoend import ModelBundle, ModelConfig, TaskHead

MAGIC = b"FDDM"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, bundle: ModelBundle, opt_state=None, meta: dict | None = None) -> None:
    named = bundle.named_parameters()
    manifest = {
        "arch": bundle.arch.to_dict(),
        "tasks": [{"config": h.config.to_dict(), "kind": h.kind} for h in bundle.tasks.values()],
        "params": [[name, list(t.shape)] for name, t in named.items()],
        "optimizer": None,
        "meta": meta or {},
    }
    arrays = [t.data for t in named.values()]
    if opt_state is not None:
        slots = [n for n in named if n in opt_state.m]
        manifest["optimizer"] = {
            "lr": opt_state.lr, "betas": list(opt_state.betas), "eps": opt_state.eps,
            "weight_decay": opt_state.weight_decay, "step": opt_state.step, "slots": slots,
        }
        arrays += [opt_state.m[n] for n in slots] + [opt_state.v[n] for n in slots]
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(mbytes)))
        fh.write(mbytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path, require_tasks=()):
    """Returns ``(bundle, opt_state or None, meta)``; parameters come back as float32."""
    from .training import OptimizerState

    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, mlen = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (reader is {VERSION})")
    off = _HEAD.size
    try:
        manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest: {e}") from None
    off += mlen
    payload, crc_bytes = raw[off:-4], raw[-4:]
    if len(crc_bytes) < 4 or zlib.crc32(payload) != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError("checkpoint CRC32 mismatch or truncated payload")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape, dtype=np.int64))
        if pos + n > flat.size:
            raise CheckpointError("payload shorter than the manifest declares")
        out = flat[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    arch = ModelConfig.from_dict(manifest["arch"])
    heads = {}
    for t in manifest["tasks"]:
        cfg = TaskConfig.from_dict(t["config"])
        heads[cfg.task_id] = TaskHead(cfg, t["kind"])
    trunk = {}
    for name, shape in manifest["params"]:
        data = dc.parameter(take(shape), dtype=np.float32)
        if name.startswith("trunk."):
            trunk[name[len("trunk."):]] = data
            continue
        if not name.startswith("task."):
            raise CheckpointError(f"unrecognised parameter name {name!r}")
        owners = [t for t in heads if name.startswith(f"task.{t}.")]
        if not owners:
            raise CheckpointError(f"parameter {name!r} belongs to a task missing from the manifest")
        tid = max(owners, key=len)
        heads[tid].params[name[len(f"task.{tid}."):]] = data
    for tid, h in heads.items():
        if "pilot" not in h.params:
            raise CheckpointError(f"task {tid!r} listed in manifest but has no parameters")
    missing = [t for t in require_tasks if t not in heads]
    if missing:
        raise CheckpointError(f"checkpoint has no task(s) {missing}")
    bundle = ModelBundle(arch, trunk, heads)
    opt = None
    o = manifest.get("optimizer")
    if o is not None:
        named = bundle.named_parameters()
        m = {n: take(named[n].shape) for n in o["slots"]}
        v = {n: take(named[n].shape) for n in o["slots"]}
        opt = OptimizerState(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"],
                             weight_decay=o["weight_decay"], step=o["step"], m=m, v=v)
    if pos != flat.size:
        raise CheckpointError("payload longer than the manifest declares")
    return bundle, opt, manifest.get("meta", {})
