"""Self-describing checkpoint container.

Layout (little-endian):

    magic     8 bytes  b"R3CKPT\\0\\0"
    version   u32
    config    u32 length + UTF-8 ``model.key = value`` lines
    meta      u32 length + UTF-8 ``key = value`` lines (step, seed, rng)
    count     u32
    count x   u16 name length, UTF-8 name, u8 ndim, ndim x u64 extents,
              product(extents) x f64 values

Blocks are named ``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .config import model_config_from_lines, model_config_lines, parse_lines
from .errors import FormatError
from .model import R3Transformer
from .optim import Adam

MAGIC = b"R3CKPT\x00\x00"
VERSION = 1


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, model: R3Transformer, optimizer: Optional[Adam], step: int,
                    seed: int, extra: Optional[Dict[str, str]] = None) -> None:
    meta = {"step": str(step), "seed": str(seed), "rng": f"per-step:{seed}",
            "adam_t": str(optimizer.t if optimizer else 0)}
    meta.update(extra or {})
    blocks = {f"param/{n}": p.data for n, p in model.named_parameters().items()}
    if optimizer is not None:
        blocks.update(optimizer.state())
    parts = [MAGIC, struct.pack("<I", VERSION), _text(model_config_lines(model.cfg)),
             _text("".join(f"{k} = {v}\n" for k, v in meta.items())), struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def _read(path) -> Tuple[Dict[str, str], Dict[str, str], Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        out = data[off:off + n]
        off += n
        return out

    if take(8) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    texts = []
    for _ in range(2):
        (n,) = struct.unpack("<I", take(4))
        texts.append(parse_lines(take(n).decode("utf-8")))
    (count,) = struct.unpack("<I", take(4))
    blocks = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return texts[0], texts[1], blocks


def load_checkpoint(path, with_optimizer: bool = True):
    """Rebuild (model, optimizer or None, meta dict) from a checkpoint file."""
    cfg_lines, meta, blocks = _read(path)
    cfg = model_config_from_lines(cfg_lines)
    model = R3Transformer(cfg)
    params = model.named_parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in blocks:
            raise FormatError(f"{path}: missing parameter block {name}")
        if blocks[key].shape != p.shape:
            raise FormatError(f"{path}: block {name} has shape {blocks[key].shape}, expected {p.shape}")
        p.data = blocks[key]
    opt = None
    if with_optimizer:
        opt = Adam(params, cfg.learning_rate)
        if any(k.startswith("adam.") for k in blocks):
            opt.load_state(blocks, int(meta.get("adam_t", 0)))
    return model, opt, meta
