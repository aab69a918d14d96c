"""Binary checkpoint container for policy parameters and optimizer state.

Layout (all integers little-endian):

    magic "XRCK" | u32 major | u32 minor
    u32 meta_len | meta JSON (arch, tensor index with shapes, optimizer
                              hyperparameters and step, vocab tokens)
    tensor payloads in index order, row-major float64 little-endian
    32-byte sha256 of the run config bytes
    u32 rng_len | rng-state JSON

Readers reject unknown major versions, truncated or oversized files, shape
mismatches, and non-finite values; nothing is returned unless the whole file
parses. A caller-supplied expected architecture refuses mismatched loads; a
differing config hash only warns.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import PersistenceError
from .fileio import atomic_write_bytes
from .policy import Arch, OptimizerState, PolicyParams
from .tokens import Vocab

MAGIC = b"XRCK"
MAJOR = 1
MINOR = 0


@dataclass
class Checkpoint:
    params: PolicyParams
    opt_state: OptimizerState | None
    vocab: Vocab | None
    config_hash: bytes
    rng_state: dict


def config_hash_of(config_bytes: bytes | None) -> bytes:
    return hashlib.sha256(config_bytes or b"").digest()


def save_checkpoint(
    path,
    params: PolicyParams,
    opt_state: OptimizerState | None = None,
    *,
    vocab: Vocab | None = None,
    config_bytes: bytes | None = None,
    rng_state: dict | None = None,
) -> None:
    tensors: list[tuple[str, np.ndarray]] = [
        (f"param/{n}", t) for n, t in sorted(params.tensors.items())
    ]
    optimizer_meta = None
    if opt_state is not None:
        tensors += [(f"opt_m/{n}", t) for n, t in sorted(opt_state.m.items())]
        tensors += [(f"opt_v/{n}", t) for n, t in sorted(opt_state.v.items())]
        optimizer_meta = {
            "lr": opt_state.lr,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "weight_decay": opt_state.weight_decay,
            "step": opt_state.step,
        }
    meta = {
        "arch": {
            "context": params.arch.context,
            "hidden": params.arch.hidden,
            "vocab_size": params.arch.vocab_size,
        },
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "optimizer": optimizer_meta,
        "vocab": list(vocab.tokens) if vocab is not None else None,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    rng_bytes = json.dumps(rng_state or {}).encode("utf-8")

    parts = [MAGIC, struct.pack("<II", MAJOR, MINOR)]
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    for _, t in tensors:
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    parts.append(config_hash_of(config_bytes))
    parts.append(struct.pack("<I", len(rng_bytes)))
    parts.append(rng_bytes)
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise PersistenceError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(
    path,
    *,
    expected_arch: Arch | None = None,
    config_bytes: bytes | None = None,
) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise PersistenceError("bad checkpoint magic")
    major, _minor = struct.unpack("<II", r.take(8))
    if major != MAJOR:
        raise PersistenceError(f"unsupported checkpoint major version {major}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except ValueError as e:
        raise PersistenceError(f"corrupt checkpoint header: {e}") from e

    try:
        arch = Arch(**meta["arch"])
        index = meta["tensors"]
    except (KeyError, TypeError) as e:
        raise PersistenceError(f"corrupt checkpoint meta: {e}") from e
    if expected_arch is not None and arch != expected_arch:
        raise PersistenceError(
            f"architecture mismatch: checkpoint {arch} vs expected {expected_arch}"
        )

    tensors: dict[str, np.ndarray] = {}
    for entry in index:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        buf = r.take(count * 8)
        t = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(t)):
            raise PersistenceError(f"non-finite values in tensor {entry['name']}")
        tensors[entry["name"]] = t

    stored_hash = r.take(32)
    rng_state = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(data):
        raise PersistenceError("trailing bytes after checkpoint payload")

    if config_bytes is not None and stored_hash != config_hash_of(config_bytes):
        warnings.warn("checkpoint config hash does not match current config")

    param_tensors = {
        n[len("param/") :]: t for n, t in tensors.items() if n.startswith("param/")
    }
    try:
        params = PolicyParams(arch, param_tensors)
    except Exception as e:
        raise PersistenceError(f"invalid parameter tensors: {e}") from e

    opt_state = None
    if meta.get("optimizer") is not None:
        o = meta["optimizer"]
        opt_state = OptimizerState(
            lr=o["lr"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
            weight_decay=o["weight_decay"],
            step=o["step"],
            m={n[len("opt_m/") :]: t for n, t in tensors.items() if n.startswith("opt_m/")},
            v={n[len("opt_v/") :]: t for n, t in tensors.items() if n.startswith("opt_v/")},
        )
    vocab = Vocab(tokens=tuple(meta["vocab"])) if meta.get("vocab") else None
    return Checkpoint(
        params=params,
        opt_state=opt_state,
        vocab=vocab,
        config_hash=stored_hash,
        rng_state=rng_state,
    )
