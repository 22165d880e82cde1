"""Bit-exact binary serialization of model state.

Layout (all integers little-endian):

    bytes 0-3    magic ``SIDN``
    bytes 4-7    format version, u32 (currently 1)
    bytes 8-11   metadata length M, u32
    M bytes      metadata, UTF-8 JSON with sorted keys
    4 bytes      tensor count, u32
    per tensor, sorted lexicographically by name:
        u16   name length N
        N     name, UTF-8
        u8    rank R
        R*u32 dimensions
        4*prod(dims) payload, float32 little-endian, C order

The metadata block carries the model/train configuration, class table,
per-channel pixel means, iteration count, and whether optimizer state is
included. Optimizer moments are stored in the same tensor table under
``adam.m.<name>`` / ``adam.v.<name>``. Tensors are written in sorted order
and floats stored exactly, so identical states produce identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, IntegrityError, TensorMismatchError,
                     UnsupportedVersionError)
from .model import ModelConfig, init_params, named_tensors, state_tensors
from .trainer import AdamState, TrainConfig

MAGIC = b"SIDN"
VERSION = 1


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save(path, params, model_config, train_config, class_table, channel_means,
         iteration=0, adam_state=None):
    """Write a checkpoint; returns the path."""
    meta = {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "class_table": list(class_table),
        "channel_means": [float(x) for x in np.asarray(channel_means).ravel()],
        "iteration": int(iteration),
        "has_adam": adam_state is not None,
    }
    tensors = dict(named_tensors(params))
    tensors.update(dict(state_tensors(params)))
    if adam_state is not None:
        meta["adam"] = {"t": adam_state.t, "beta1": adam_state.beta1,
                        "beta2": adam_state.beta2, "eps": adam_state.eps}
        for n, a in adam_state.m.items():
            tensors[f"adam.m.{n}"] = a
        for n, a in adam_state.v.items():
            tensors[f"adam.v.{n}"] = a
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        blob += _pack_tensor(name, tensors[name])
    Path(path).write_bytes(bytes(blob))
    return Path(path)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"checkpoint truncated at byte {self.pos} "
                                 f"(wanted {n} more of {len(self.buf)})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load(path):
    """Read a checkpoint; returns (params, adam_state or None, metadata).

    The tensor table is validated against the architecture implied by the
    stored configuration: wrong magic, unsupported version, truncation,
    missing tensors, and shape mismatches raise distinct errors.
    """
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint (bad magic)")
    version = r.u32()
    if version > VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} is newer than supported ({VERSION})")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt metadata block: {exc}") from exc
    n_tensors = r.u32()
    table = {}
    for _ in range(n_tensors):
        name_len = struct.unpack("<H", r.take(2))[0]
        name = r.take(name_len).decode("utf-8")
        rank = struct.unpack("<B", r.take(1))[0]
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)))
        table[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(buf):
        raise IntegrityError(f"{len(buf) - r.pos} trailing bytes after tensor table")

    config = ModelConfig.from_dict(meta["model_config"])
    params = init_params(config, np.random.default_rng(0), dtype=np.float32)
    expected = dict(named_tensors(params))
    expected.update(dict(state_tensors(params)))
    for name, arr in expected.items():
        if name not in table:
            raise TensorMismatchError(f"checkpoint is missing tensor {name}")
        if table[name].shape != arr.shape:
            raise TensorMismatchError(
                f"tensor {name} has shape {table[name].shape}, "
                f"architecture wants {arr.shape}")
        arr[...] = table[name]
    adam = None
    if meta.get("has_adam"):
        a = meta["adam"]
        m, v = {}, {}
        for name in dict(named_tensors(params)):
            for store, prefix in ((m, "adam.m."), (v, "adam.v.")):
                key = prefix + name
                if key not in table:
                    raise TensorMismatchError(f"checkpoint is missing tensor {key}")
                store[name] = table[key]
        adam = AdamState(m=m, v=v, t=int(a["t"]), beta1=a["beta1"],
                         beta2=a["beta2"], eps=a["eps"])
        known = set(expected) | {p + n for n in dict(named_tensors(params))
                                 for p in ("adam.m.", "adam.v.")}
    else:
        known = set(expected)
    stray = set(table) - known
    if stray:
        raise TensorMismatchError(f"checkpoint holds unknown tensors: {sorted(stray)[:3]}")
    return params, adam, meta


def load_train_config(meta):
    return TrainConfig.from_dict(meta["train_config"])
