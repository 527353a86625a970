"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MIRA-CKPT"                 magic
    u32 version
    u32 n, n bytes               model config as canonical JSON
    u32 count                    number of parameter records
    per record:
        u16 n, n bytes           name (utf-8)
        u8  ndim, u32 * ndim     shape
        u8  width                32 or 64
        payload                  little-endian floats, row-major
    32 bytes                     SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import fields

import numpy as np

from .model import MiraModel, ModelConfig

MAGIC = b"MIRA-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(model: MiraModel, width: int = 64) -> bytes:
    if width not in (32, 64):
        raise CheckpointError(f"element width must be 32 or 64, got {width}")
    dtype = "<f4" if width == 32 else "<f8"
    config = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(config)), config]
    params = model.state_dict()
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = params[name]
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", width))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[MiraModel, int]:
    """Rebuild the model; returns it with the element width found in the file."""
    if len(blob) < len(MAGIC) + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a MIRA checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = take("<I")
    config_dict = json.loads(body[pos:pos + n])
    pos += n
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(config_dict) - known
    if unknown:
        raise CheckpointError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    model = MiraModel(ModelConfig(**config_dict))
    (count,) = take("<I")
    state, widths = {}, set()
    for _ in range(count):
        (n,) = take("<H")
        name = body[pos:pos + n].decode()
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        (width,) = take("<B")
        if width not in (32, 64):
            raise CheckpointError(f"{name}: bad element width {width}")
        dtype = "<f4" if width == 32 else "<f8"
        size = int(np.prod(shape)) * (width // 8)
        arr = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
        pos += size
        if name in state:
            raise CheckpointError(f"parameter {name} appears twice")
        state[name] = arr.astype(np.float64)
        widths.add(width)
    if pos != len(body):
        raise CheckpointError("trailing bytes after parameter records")
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None
    return model, (widths.pop() if len(widths) == 1 else 64)


def save(path, model: MiraModel, width: int = 64) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(model, width))


def load(path) -> tuple[MiraModel, int]:
    with open(path, "rb") as fh:
        return decode(fh.read())
