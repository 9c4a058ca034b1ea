"""Optical flow providers.

Three providers stand in for a learned flow network:

* :class:`TranslationFlow` - exact flows for synthetic clips with known
  (possibly per-frame) integer or fractional translations;
* :class:`BlockMatchingFlow` - exhaustive sum-of-absolute-differences
  search, a self-contained estimator;
* :class:`FileFlow` - precomputed flows read from ``FLOW1`` files.

Every provider returns a :class:`FlowField` on the source grid pointing to
destination coordinates. Frame indices passed as ``t_src``/``t_dst`` are
1-based.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .core import FlowField

FLOW_MAGIC = b"FLOW1"


class FlowError(RuntimeError):
    """Raised when a provider cannot produce a flow."""


def translation_flow(shape, dx: float, dy: float, dtype=torch.float32,
                     src: Optional[int] = None, dst: Optional[int] = None) -> FlowField:
    """Constant displacement ``(dx, dy)`` over an ``H x W`` grid."""
    h, w = shape[-2], shape[-1]
    data = torch.empty(2, h, w, dtype=dtype)
    data[0] = dx
    data[1] = dy
    return FlowField(data, src, dst)


class FlowProvider:
    kind = "abstract"

    def estimate(self, src: torch.Tensor, dst: torch.Tensor,
                 t_src: Optional[int] = None, t_dst: Optional[int] = None) -> FlowField:
        raise NotImplementedError


class TranslationFlow(FlowProvider):
    """Ground-truth flows for clips whose content translates rigidly.

    ``motion`` is either one ``(dx, dy)`` applied between every pair of
    frames, or a sequence whose entry ``i`` is the displacement from frame
    ``i + 1`` to frame ``i + 2`` (1-based frames). The latter needs frame
    indices at estimation time.
    """

    kind = "ground-truth-translation"

    def __init__(self, motion):
        arr = np.asarray(motion, dtype=np.float64)
        if arr.shape == (2,):
            self._const = (float(arr[0]), float(arr[1]))
            self._table = None
        elif arr.ndim == 2 and arr.shape[1] == 2:
            self._const = None
            self._table = [tuple(map(float, row)) for row in arr]
        else:
            raise ValueError(f"motion must be (dx, dy) or a sequence of them, got shape {arr.shape}")

    def displacement(self, t_src: Optional[int], t_dst: Optional[int]) -> tuple[float, float]:
        if self._const is not None:
            dx, dy = self._const
            if t_src is not None and t_dst is not None and t_dst < t_src:
                return -dx * (t_src - t_dst), -dy * (t_src - t_dst)
            steps = 1 if t_src is None or t_dst is None else t_dst - t_src
            return dx * steps, dy * steps
        if t_src is None or t_dst is None:
            raise FlowError("per-frame translation needs source and target frame indices")
        lo, hi = sorted((t_src, t_dst))
        if lo < 1 or hi - 1 > len(self._table):
            raise FlowError(f"no motion recorded between frames {t_src} and {t_dst}")
        dx = sum(self._table[i - 1][0] for i in range(lo, hi))
        dy = sum(self._table[i - 1][1] for i in range(lo, hi))
        sign = 1.0 if t_dst >= t_src else -1.0
        return sign * dx, sign * dy

    def estimate(self, src, dst, t_src=None, t_dst=None) -> FlowField:
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch: {tuple(src.shape)} vs {tuple(dst.shape)}")
        dx, dy = self.displacement(t_src, t_dst)
        flow = translation_flow(src.shape, dx, dy, dtype=src.dtype, src=t_src, dst=t_dst)
        if src.dim() == 4:
            return FlowField(flow.data.unsqueeze(0).expand(src.shape[0], -1, -1, -1).contiguous(), t_src, t_dst)
        return flow


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = img.shape[-2:]
    out = np.zeros_like(img)
    for oy in range(3):
        for ox in range(3):
            out += padded[:, oy:oy + h, ox:ox + w]
    return out / 9.0


def _block_edges(n: int, block: int) -> np.ndarray:
    return np.arange(0, n, block)


def block_matching_flow(src, dst, block: int = 8, radius: int = 4, preblur: bool = False) -> FlowField:
    """Integer per-block flow minimising the sum of absolute differences.

    ``src`` is tiled into ``block x block`` tiles (the last row/column of
    tiles may be smaller). For every tile, each displacement with
    ``|dx|, |dy| <= radius`` that keeps the displaced tile inside ``dst`` is
    scored; ties go to the smallest ``|dx| + |dy|``, then to the
    lexicographically smallest ``(dx, dy)``. The tile's vector is broadcast
    to its pixels.
    """
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    src_t, dst_t = torch.as_tensor(src), torch.as_tensor(dst)
    if src_t.shape != dst_t.shape:
        raise ValueError(f"shape mismatch: {tuple(src_t.shape)} vs {tuple(dst_t.shape)}")
    a = src_t.detach().cpu().double().numpy()
    b = dst_t.detach().cpu().double().numpy()
    if a.ndim == 2:
        a, b = a[None], b[None]
    h, w = a.shape[-2:]
    if block > h or block > w:
        raise ValueError(f"block {block} larger than frame {h}x{w}")
    if preblur:
        a, b = _box_blur3(a), _box_blur3(b)

    ry, rx = _block_edges(h, block), _block_edges(w, block)
    y_end = np.minimum(ry + block, h)
    x_end = np.minimum(rx + block, w)

    # candidates in tie-break order: |d| first, then (dx, dy)
    cands = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    cands.sort(key=lambda d: (abs(d[0]) + abs(d[1]), d[0], d[1]))

    best = np.full((len(ry), len(rx)), np.inf)
    best_d = np.zeros((len(ry), len(rx), 2), dtype=np.int64)
    for dx, dy in cands:
        # |src(x, y) - dst(x + dx, y + dy)| where the target is inside dst
        diff = np.zeros((h, w))
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        if ys0 >= ys1 or xs0 >= xs1:
            continue
        diff[ys0:ys1, xs0:xs1] = np.abs(
            a[:, ys0:ys1, xs0:xs1] - b[:, ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]).sum(axis=0)
        sad = np.add.reduceat(np.add.reduceat(diff, ry, axis=0), rx, axis=1)
        valid = ((ry + dy >= 0) & (y_end - 1 + dy <= h - 1))[:, None] & \
                ((rx + dx >= 0) & (x_end - 1 + dx <= w - 1))[None, :]
        better = valid & (sad < best)
        best = np.where(better, sad, best)
        best_d[better] = (dx, dy)

    rows = np.repeat(np.arange(len(ry)), np.diff(np.append(ry, h)))
    cols = np.repeat(np.arange(len(rx)), np.diff(np.append(rx, w)))
    per_pixel = best_d[rows][:, cols]  # (H, W, 2)
    data = torch.from_numpy(np.ascontiguousarray(per_pixel.transpose(2, 0, 1))).to(src_t.dtype)
    return FlowField(data)


class BlockMatchingFlow(FlowProvider):
    kind = "block-matching"

    def __init__(self, block: int = 8, radius: int = 4, preblur: bool = False):
        if block < 1 or radius < 0:
            raise ValueError("block must be >= 1 and radius >= 0")
        self.block = block
        self.radius = radius
        self.preblur = preblur

    def estimate(self, src, dst, t_src=None, t_dst=None) -> FlowField:
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch: {tuple(src.shape)} vs {tuple(dst.shape)}")
        if src.dim() == 4:
            flows = [block_matching_flow(s, d, self.block, self.radius, self.preblur).data
                     for s, d in zip(src, dst)]
            return FlowField(torch.stack(flows), t_src, t_dst)
        f = block_matching_flow(src, dst, self.block, self.radius, self.preblur)
        return FlowField(f.data, t_src, t_dst)


# ---------------------------------------------------------------------------
# FLOW1 files: magic, u32 H, u32 W, H*W (dx, dy) f32 pairs, little-endian

def write_flow(path, flow) -> None:
    data = flow.data if isinstance(flow, FlowField) else torch.as_tensor(flow)
    if data.dim() != 3:
        raise ValueError("only single (2, H, W) flows can be written")
    _, h, w = data.shape
    pairs = data.detach().cpu().numpy().astype("<f4").transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(pairs).tobytes())


def read_flow(path, src: Optional[int] = None, dst: Optional[int] = None) -> FlowField:
    raw = Path(path).read_bytes()
    if raw[:5] != FLOW_MAGIC:
        raise FlowError(f"{path}: not a FLOW1 file")
    h, w = struct.unpack_from("<II", raw, 5)
    body = raw[13:]
    if len(body) != h * w * 8:
        raise FlowError(f"{path}: expected {h * w * 8} payload bytes, found {len(body)}")
    pairs = np.frombuffer(body, dtype="<f4").reshape(h, w, 2)
    data = torch.from_numpy(pairs.transpose(2, 0, 1).copy())
    return FlowField(data, src, dst)


def flow_path(template: str, t_src: int, t_dst: int) -> str:
    direction = "fwd" if t_dst > t_src else "bwd"
    return template.replace("{t}", str(t_src)).replace("{dir}", direction)


class FileFlow(FlowProvider):
    """Reads flows from files named by a template with ``{t}`` and ``{dir}``."""

    kind = "external-file"

    def __init__(self, template: Union[str, Path]):
        self.template = str(template)

    def estimate(self, src, dst, t_src=None, t_dst=None) -> FlowField:
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch: {tuple(src.shape)} vs {tuple(dst.shape)}")
        if t_src is None or t_dst is None:
            raise FlowError("file flows need source and target frame indices")
        path = flow_path(self.template, t_src, t_dst)
        if not Path(path).is_file():
            raise FlowError(f"missing flow file {path}")
        flow = read_flow(path, t_src, t_dst)
        if flow.shape != tuple(src.shape[-2:]):
            raise FlowError(f"{path}: flow is {flow.shape}, frames are {tuple(src.shape[-2:])}")
        data = flow.data.to(src.dtype)
        if src.dim() == 4:
            data = data.unsqueeze(0).expand(src.shape[0], -1, -1, -1).contiguous()
        return FlowField(data, t_src, t_dst)


def estimate_flow(provider: FlowProvider, src, dst,
                  t_src: Optional[int] = None, t_dst: Optional[int] = None) -> FlowField:
    return provider.estimate(src, dst, t_src, t_dst)


def save_clip_flows(directory, fwd: Sequence[FlowField], bwd: Sequence[FlowField],
                    template: str = "flow_{t}_{dir}.flo") -> str:
    """Write a clip's flows so that ``FileFlow(directory / template)`` reads them back."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    full = str(directory / template)
    for i, f in enumerate(fwd, 1):
        write_flow(flow_path(full, i, i + 1), f)
    for i, f in enumerate(bwd, 2):
        write_flow(flow_path(full, i, i - 1), f)
    return full
