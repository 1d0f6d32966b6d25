"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BRKR"  u8 version(=1)  u32 len  <utf-8 JSON header>
    repeated: u16 name_len  name  u8 ndim  u32 dims[ndim]  f64 values[prod(dims)]
    u32 CRC32 of everything before it

The JSON header carries the train config, model spec, global step and the
Adam scalars. Tensor names: parameters as-is, ``target/<name>`` for the
delayed copy, ``adam.m/<name>`` and ``adam.v/<name>`` for optimiser moments.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .engine import AdamState, ParamSet
from .model import ModelSpec
from .trainer import TrainConfig, TrainResult

MAGIC = b"BRKR"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    spec: ModelSpec
    params: ParamSet
    target: ParamSet
    global_step: int = 0
    adam: Optional[AdamState] = None

    @classmethod
    def from_result(cls, result: TrainResult, with_adam: bool = True) -> "Checkpoint":
        return cls(result.config, result.spec, result.params, result.target,
                   result.global_step, result.adam if with_adam else None)


def _header(ck: Checkpoint) -> bytes:
    head = {
        "train": ck.config.to_dict(),
        "model": ck.spec.to_dict(),
        "global_step": ck.global_step,
        "adam": None if ck.adam is None else {
            "t": ck.adam.t, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2, "eps": ck.adam.eps,
        },
    }
    return json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensors(ck: Checkpoint) -> Dict[str, np.ndarray]:
    out = dict(ck.params)
    out.update({f"target/{n}": v for n, v in ck.target.items()})
    if ck.adam is not None:
        out.update({f"adam.m/{n}": v for n, v in ck.adam.m.items()})
        out.update({f"adam.v/{n}": v for n, v in ck.adam.v.items()})
    return out


def dumps(ck: Checkpoint) -> bytes:
    head = _header(ck)
    parts = [MAGIC, struct.pack("<BI", VERSION, len(head)), head]
    for name, arr in _tensors(ck).items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ck))


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("missing BRKR magic")
    if blob[4] != VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {blob[4]} (supported: {VERSION})")
    if len(blob) < 13:
        raise CorruptCheckpointError("truncated checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError("CRC mismatch (truncated or corrupted file)")

    try:
        (head_len,) = struct.unpack_from("<I", body, 5)
        pos = 9 + head_len
        head = json.loads(body[9:pos].decode("utf-8"))
        tensors: Dict[str, np.ndarray] = {}
        while pos < len(body):
            (n_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n_len].decode("utf-8")
            pos += n_len
            ndim = body[pos]
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            if pos + 8 * count > len(body):
                raise CorruptCheckpointError(f"tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * count
        config = TrainConfig.from_dict(head["train"])
        spec = ModelSpec.from_dict(head["model"])
    except CheckpointError:
        raise
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint: {exc}") from exc

    shapes = spec.param_shapes()
    params = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointShapeError(f"missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(f"{name}: stored shape {tensors[name].shape}, config implies {shape}")
        params[name] = tensors[name]
    target = {}
    for name in [n for n in shapes if n == "user_emb" or n.startswith("user_rem.")]:
        t = tensors.get(f"target/{name}")
        if t is None or t.shape != shapes[name]:
            raise CheckpointShapeError(f"target tensor {name!r} missing or mis-shaped")
        target[name] = t
    adam = None
    if head.get("adam") is not None:
        a = head["adam"]
        adam = AdamState(
            m={n: tensors[f"adam.m/{n}"] for n in shapes if f"adam.m/{n}" in tensors},
            v={n: tensors[f"adam.v/{n}"] for n in shapes if f"adam.v/{n}" in tensors},
            t=a["t"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
        )
    return Checkpoint(config, spec, params, target, int(head["global_step"]), adam)


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
