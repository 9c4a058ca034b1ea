"""Feature alignment: backward sampling, forward splatting onto an enlarged
canvas, border split/merge and the frame-by-frame warp-back chain.

All functions take batched tensors ``(N, C, H, W)`` and flows ``(N, 2, H, W)``
(or :class:`~flostream.core.FlowField`). Gradients flow to feature values
only; flows are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .core import flow_tensor

SPLAT_EPS = 1e-8


@dataclass(frozen=True)
class EnlargedFeature:
    """Canvas of shape ``(N, C, H + 2m, W + 2m)``; the interior starts at ``(m, m)``."""

    canvas: torch.Tensor
    margin: int

    @property
    def interior(self) -> torch.Tensor:
        m = self.margin
        h, w = self.canvas.shape[-2] - 2 * m, self.canvas.shape[-1] - 2 * m
        return self.canvas[..., m:m + h, m:m + w]


@dataclass(frozen=True)
class BorderRing:
    """Ring of an enlarged canvas, stored as a full canvas with a zero interior."""

    canvas: torch.Tensor
    margin: int

    @property
    def interior_shape(self) -> tuple[int, int]:
        m = self.margin
        return self.canvas.shape[-2] - 2 * m, self.canvas.shape[-1] - 2 * m

    def ring_pixels(self) -> int:
        """Ring pixel count per channel, ``(H+2m)(W+2m) - HW``."""
        h, w = self.interior_shape
        return (h + 2 * self.margin) * (w + 2 * self.margin) - h * w

    def numel(self) -> int:
        return self.canvas.numel()


def _prep_flow(flow, n: int) -> torch.Tensor:
    flow = flow_tensor(flow)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    if flow.shape[0] == 1 and n > 1:
        flow = flow.expand(n, -1, -1, -1)
    return flow.detach()


def _base_grid(h: int, w: int, like: torch.Tensor):
    ys = torch.arange(h, dtype=like.dtype, device=like.device).view(1, h, 1).expand(1, h, w)
    xs = torch.arange(w, dtype=like.dtype, device=like.device).view(1, 1, w).expand(1, h, w)
    return xs, ys


def backward_warp(feat: torch.Tensor, flow, sample_offset: int = 0) -> torch.Tensor:
    """Bilinearly sample ``feat`` at ``(x + dx + offset, y + dy + offset)``.

    The output lives on the flow's grid. ``feat`` may exceed that grid by
    ``sample_offset`` pixels on every side (enlarged canvases). Corners that
    fall outside ``feat`` contribute zero.
    """
    n, c, hf, wf = feat.shape
    flow = _prep_flow(flow, n).to(feat.dtype)
    h, w = flow.shape[-2:]
    if hf != h + 2 * sample_offset or wf != w + 2 * sample_offset:
        raise ValueError(
            f"feature {hf}x{wf} does not match flow grid {h}x{w} with offset {sample_offset}")

    xs, ys = _base_grid(h, w, feat)
    gx = xs + flow[:, 0] + sample_offset
    gy = ys + flow[:, 1] + sample_offset
    x0 = torch.floor(gx)
    y0 = torch.floor(gy)
    fx = gx - x0
    fy = gy - y0
    x0 = x0.long()
    y0 = y0.long()

    flat = feat.reshape(n, c, hf * wf)
    out = feat.new_zeros(n, c, h * w)
    for ox, oy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + ox
        yi = y0 + oy
        valid = (xi >= 0) & (xi < wf) & (yi >= 0) & (yi < hf)
        idx = (yi.clamp(0, hf - 1) * wf + xi.clamp(0, wf - 1)).reshape(n, 1, h * w)
        vals = torch.gather(flat, 2, idx.expand(n, c, h * w))
        wv = (wgt * valid).reshape(n, 1, h * w)
        out = out + vals * wv
    return out.reshape(n, c, h, w)


def forward_warp_enlarged(feat: torch.Tensor, flow, margin: int, mode: str = "average") -> EnlargedFeature:
    """Splat every source pixel to ``(x + dx + m, y + dy + m)`` on an enlarged canvas.

    Bilinear weights spread each value over the four neighbours. ``average``
    mode divides the accumulated values by the accumulated weights (targets
    with weight <= 1e-8 become holes filled with 0); ``sum`` returns the raw
    accumulation. Splats beyond the enlarged canvas are dropped.
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    if mode not in ("average", "sum"):
        raise ValueError(f"unknown splatting mode {mode!r}")
    n, c, h, w = feat.shape
    flow = _prep_flow(flow, n).to(feat.dtype)
    if tuple(flow.shape[-2:]) != (h, w):
        raise ValueError(f"flow grid {tuple(flow.shape[-2:])} does not match feature {h}x{w}")
    hc, wc = h + 2 * margin, w + 2 * margin

    xs, ys = _base_grid(h, w, feat)
    tx = xs + flow[:, 0] + margin
    ty = ys + flow[:, 1] + margin
    x0 = torch.floor(tx)
    y0 = torch.floor(ty)
    fx = tx - x0
    fy = ty - y0
    x0 = x0.long()
    y0 = y0.long()

    src = feat.reshape(n, c, h * w)
    acc = feat.new_zeros(n, c, hc * wc)
    wsum = feat.new_zeros(n, 1, hc * wc)
    for ox, oy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + ox
        yi = y0 + oy
        valid = (xi >= 0) & (xi < wc) & (yi >= 0) & (yi < hc)
        idx = (yi.clamp(0, hc - 1) * wc + xi.clamp(0, wc - 1)).reshape(n, 1, h * w)
        wv = (wgt * valid).reshape(n, 1, h * w)
        acc = acc.scatter_add(2, idx.expand(n, c, h * w), src * wv)
        wsum = wsum.scatter_add(2, idx, wv)

    if mode == "average":
        filled = wsum > SPLAT_EPS
        acc = torch.where(filled, acc / torch.where(filled, wsum, torch.ones_like(wsum)),
                          torch.zeros_like(acc))
    return EnlargedFeature(acc.reshape(n, c, hc, wc), margin)


def _ring_mask(h: int, w: int, margin: int, like: torch.Tensor) -> torch.Tensor:
    mask = torch.ones(h + 2 * margin, w + 2 * margin, dtype=like.dtype, device=like.device)
    mask[margin:margin + h, margin:margin + w] = 0
    return mask


def split_border(e: EnlargedFeature) -> tuple[BorderRing, torch.Tensor]:
    """Separate an enlarged canvas into its ring and its ``H x W`` interior."""
    m = e.margin
    interior = e.interior
    h, w = interior.shape[-2:]
    ring = e.canvas * _ring_mask(h, w, m, e.canvas)
    return BorderRing(ring, m), interior


def merge_border(h: torch.Tensor, b: BorderRing) -> EnlargedFeature:
    """Place ``h`` into the interior of ring ``b``."""
    m = b.margin
    if tuple(h.shape[-2:]) != b.interior_shape or h.shape[:-2] != b.canvas.shape[:-2]:
        raise ValueError(
            f"feature {tuple(h.shape)} does not fit ring {tuple(b.canvas.shape)} with margin {m}")
    return EnlargedFeature(b.canvas + F.pad(h, (m, m, m, m)), m)


def warp_back(h_far: torch.Tensor, rings: Sequence[Optional[BorderRing]], flows: Sequence) -> torch.Tensor:
    """Align a look-ahead feature ``k = len(flows)`` frames back to the current frame.

    ``rings[i]`` and ``flows[i]`` belong to the transition from frame
    ``t + i`` to ``t + i + 1`` (0-based ``i``). Steps run from the farthest
    transition to the nearest: merge the ring, then backward-warp the merged
    canvas with the same forward flow that was used to splat it. A ``None``
    ring means plain backward warping for that step.
    """
    if len(rings) != len(flows):
        raise ValueError(f"got {len(rings)} rings but {len(flows)} flows")
    margins = {r.margin for r in rings if r is not None}
    if len(margins) > 1:
        raise ValueError(f"rings carry different margins: {sorted(margins)}")

    h = h_far
    for ring, flow in zip(reversed(rings), reversed(flows)):
        if ring is None:
            h = backward_warp(h, flow)
        else:
            merged = merge_border(h, ring)
            h = backward_warp(merged.canvas, flow, sample_offset=ring.margin)
    return h
