"""Quality metrics and the memory / latency benchmark of the three topologies."""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import DenoiserConfig, VideoClip
from .flow import FlowProvider, TranslationFlow
from .net import BiRNN, FloRNN
from .pipeline import BiRNNStream, MemoryMeter, StreamState

PSNR_CAP = 99.0


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, VideoClip):
        return x.frames
    return torch.as_tensor(x)


def psnr(pred, ref, per_frame: bool = False, mask=None) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0.

    Clips pool the squared error over all frames unless ``per_frame``, which
    averages per-frame PSNRs instead. ``mask`` (broadcastable boolean)
    restricts the pixels. Identical inputs give the 99 dB cap.
    """
    p = _as_tensor(pred).double()
    r = _as_tensor(ref).double()
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(r.shape)}")
    if per_frame and p.dim() == 4:
        return float(np.mean([psnr(a, b, mask=mask) for a, b in zip(p, r)]))
    err = (p - r) ** 2
    if mask is not None:
        m = torch.as_tensor(mask, dtype=torch.bool).expand_as(err)
        err = err[m]
    mse = float(err.mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(pred, ref, data_range: float = 1.0) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03).

    Accepts frames ``(C, H, W)`` / ``(H, W)`` or clips ``(T, C, H, W)``;
    channels and frames are averaged. Only windows fully inside the image
    are used.
    """
    p = _as_tensor(pred).double()
    r = _as_tensor(ref).double()
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(r.shape)}")
    if p.dim() == 2:
        p, r = p[None, None], r[None, None]
    elif p.dim() == 3:
        p, r = p[None], r[None]
    if p.shape[-1] < 11 or p.shape[-2] < 11:
        raise ValueError("frames must be at least 11x11 for SSIM")
    t, c, h, w = p.shape
    p = p.reshape(t * c, 1, h, w)
    r = r.reshape(t * c, 1, h, w)
    win = _gaussian_window().view(1, 1, 11, 11)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_p = F.conv2d(p, win)
    mu_r = F.conv2d(r, win)
    var_p = F.conv2d(p * p, win) - mu_p ** 2
    var_r = F.conv2d(r * r, win) - mu_r ** 2
    cov = F.conv2d(p * r, win) - mu_p * mu_r
    num = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_r ** 2 + c1) * (var_p + var_r + c2)
    return float((num / den).mean())


def border_mask(height: int, width: int, strip: int) -> torch.Tensor:
    """True on the outer ``strip`` pixels of an ``H x W`` frame."""
    mask = torch.ones(height, width, dtype=torch.bool)
    if strip > 0:
        mask[strip:height - strip, strip:width - strip] = False
    else:
        mask[:] = False
    return mask


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchRow:
    topology: str
    T: int
    peak_elements: int
    latency_frames: int
    ms_per_frame: float


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)

    def series(self, topology: str) -> Dict[str, list]:
        rows = [r for r in self.rows if r.topology == topology]
        return {
            "T": [r.T for r in rows],
            "peak_elements": [r.peak_elements for r in rows],
            "latency_frames": [r.latency_frames for r in rows],
            "ms_per_frame": [r.ms_per_frame for r in rows],
        }

    @property
    def topologies(self) -> List[str]:
        seen = []
        for r in self.rows:
            if r.topology not in seen:
                seen.append(r.topology)
        return seen

    def to_csv(self) -> str:
        lines = ["topology,T,peak_elements,latency_frames,ms_per_frame"]
        for r in self.rows:
            lines.append(f"{r.topology},{r.T},{r.peak_elements},{r.latency_frames},{r.ms_per_frame:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "BenchReport":
        lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
        rows = []
        for line in lines[1:]:
            top, t, peak, lat, ms = line.split(",")
            rows.append(BenchRow(top, int(t), int(peak), int(lat), float(ms)))
        return cls(rows)


def _run_stream(stream, frames) -> float:
    start = time.perf_counter()
    for f in frames:
        stream.push(f)
    stream.flush()
    return (time.perf_counter() - start) * 1000.0 / len(frames)


def bench_topologies(flornn: FloRNN, birnn: BiRNN, k: int, lengths: Sequence[int],
                     size: int = 32, sigma: float = 25 / 255, seed: int = 0) -> BenchReport:
    """Instrumented retained-feature counts, frame-1 latency and timing per topology.

    Topologies run sequentially over a static random clip with zero flows;
    memory and latency do not depend on the parameters.
    """
    report = BenchReport()
    cfg_fwd = dataclasses.replace(flornn.cfg, k=0)
    cfg_flo = dataclasses.replace(flornn.cfg, k=k)
    g = torch.Generator().manual_seed(seed)
    provider: FlowProvider = TranslationFlow((0.0, 0.0))
    ch = flornn.cfg.img_channels
    for name in ("forward", f"flornn(k={k})", "birnn"):
        for T in lengths:
            frames = torch.rand(T, ch, size, size, generator=g)
            meter = MemoryMeter()
            if name == "forward":
                stream = StreamState(flornn, provider, sigma, cfg_fwd, meter=meter)
            elif name == "birnn":
                stream = BiRNNStream(birnn, provider, sigma, meter=meter)
            else:
                stream = StreamState(flornn, provider, sigma, cfg_flo, meter=meter)
            ms = _run_stream(stream, frames)
            report.rows.append(BenchRow(name, T, meter.peak, stream.latency(1), ms))
    return report


def linear_fit(x: Sequence[float], y: Sequence[float]):
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2
