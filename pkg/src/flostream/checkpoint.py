"""``FLOP1`` checkpoint files.

Layout (little-endian): magic ``FLOP1``, u32 version, u32 config length,
config block (``key = value`` UTF-8 text), then one blob per parameter:
u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f32 data row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .core import config_values, denoiser_config_from, format_config, parse_config_text
from .net import build_model, model_kind

CKPT_MAGIC = b"FLOP1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def checkpoint_bytes(model) -> bytes:
    values = {"model": model_kind(model), **config_values(model.cfg)}
    cfg_block = format_config(values).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg_block)), cfg_block]
    for name, tensor in model.state_dict().items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild the model stored at ``path``."""
    raw = Path(path).read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a FLOP1 checkpoint")
    version, cfg_len = struct.unpack_from("<II", raw, 5)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 13
    values = parse_config_text(raw[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    kind = values.pop("model", "flornn")
    model = build_model(denoiser_config_from(values), kind)

    state = {}
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            state[name] = torch.from_numpy(data.copy())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated parameter block ({exc})") from None
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model.to(dtype)
