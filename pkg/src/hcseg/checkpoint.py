"""HCK1 checkpoint files.

Layout (little-endian): magic ``HCK1``; u32 length + UTF-8 JSON model
config; u32 parameter count; then per parameter a u16 length + UTF-8 name,
u8 rank, rank x u32 extents and the float32 payload.
"""
import json
import struct

import numpy as np

from .model import ModelConfig, build_model

MAGIC = b"HCK1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model):
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an HCK1 checkpoint")
    try:
        pos = 4
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        cfg = ModelConfig(**json.loads(raw[pos:pos + n].decode("utf-8")))
        pos += n
        model = build_model(cfg)
        params = model.parameters()
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        seen = set()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            if name not in params or params[name].shape != tuple(shape):
                raise CheckpointError(f"{path}: unexpected parameter {name} {shape}")
            params[name].data = data.astype(params[name].dtype)
            seen.add(name)
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint") from None
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:3]}")
    return model
