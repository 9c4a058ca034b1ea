"""Synthetic clips with known motion, noise injection, patch sampling and clip I/O."""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import NoiseSpec, VideoClip
from .flow import translation_flow

CLIP_MAGIC = b"FLOV1"
PATTERNS = ("random-texture", "moving-bars", "checker")


class ClipFormatError(ValueError):
    """Malformed clip container or image directory."""


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic clip.

    ``motion`` is a list of per-transition integer ``(dx, dy)`` (length
    ``T - 1``), a single ``(dx, dy)`` repeated, or ``None`` for a seeded random
    walk with steps bounded by ``motion_max``. ``mode`` is ``wrap`` (content
    wraps around, flows exact everywhere) or ``fresh`` (a camera window over a
    larger canvas, new content enters at the trailing edge).
    """

    pattern: str = "random-texture"
    motion: Optional[Sequence] = None
    T: int = 10
    height: int = 64
    width: int = 64
    channels: int = 1
    seed: int = 0
    motion_max: int = 2
    mode: str = "wrap"

    def motions(self) -> List[Tuple[int, int]]:
        if self.motion is None:
            rng = np.random.default_rng([self.seed, 1])
            steps = rng.integers(-self.motion_max, self.motion_max + 1, size=(max(self.T - 1, 0), 2))
            return [tuple(int(v) for v in s) for s in steps]
        arr = np.asarray(self.motion, dtype=np.int64)
        if arr.shape == (2,):
            return [(int(arr[0]), int(arr[1]))] * max(self.T - 1, 0)
        if arr.shape != (self.T - 1, 2):
            raise ValueError(f"motion must have T-1 = {self.T - 1} entries, got shape {arr.shape}")
        return [(int(a), int(b)) for a, b in arr]


def _texture(rng, channels, h, w) -> np.ndarray:
    base = rng.standard_normal((channels, h, w))
    img = 0.6 * gaussian_filter(base, sigma=(0, 1.0, 1.0), mode="wrap") \
        + 0.4 * gaussian_filter(rng.standard_normal((channels, h, w)), sigma=(0, 3.0, 3.0), mode="wrap") * 3.0
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return img


def _pattern(pattern: str, rng, channels: int, h: int, w: int) -> np.ndarray:
    if pattern == "random-texture":
        return _texture(rng, channels, h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    if pattern == "checker":
        cell = int(rng.integers(4, 9))
        img = ((xx // cell + yy // cell) % 2).astype(np.float64)
        return np.repeat(img[None] * 0.8 + 0.1, channels, axis=0)
    if pattern == "moving-bars":
        period = int(rng.integers(6, 14))
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.4 * np.sin(2 * np.pi * (xx + 0.5 * yy) / period + phase)
        return np.repeat(img[None], channels, axis=0)
    raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")


def synth_clip(spec: SynthSpec, dtype=torch.float32):
    """Return ``(clean clip, flows_fwd, flows_bwd)`` for a synthetic clip.

    Frame ``t + 1`` is frame ``t`` translated by the ``t``-th motion.
    ``flows_fwd[i]`` is ``o_{i+1 -> i+2}`` and ``flows_bwd[i]`` is
    ``o_{i+2 -> i+1}`` (1-based frame tags recorded on each field).
    """
    if spec.pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {spec.pattern!r}; expected one of {PATTERNS}")
    if spec.mode not in ("wrap", "fresh"):
        raise ValueError(f"mode must be 'wrap' or 'fresh', got {spec.mode!r}")
    motions = spec.motions()
    h, w = spec.height, spec.width
    for dx, dy in motions:
        if abs(dx) >= w or abs(dy) >= h:
            raise ValueError(f"motion ({dx}, {dy}) exceeds frame size {h}x{w}")
    rng = np.random.default_rng([spec.seed, 0])

    offsets = np.cumsum([(0, 0)] + list(motions), axis=0)  # content position per frame
    if spec.mode == "wrap":
        base = _pattern(spec.pattern, rng, spec.channels, h, w)
        frames = [np.roll(base, shift=(int(oy), int(ox)), axis=(1, 2)) for ox, oy in offsets]
    else:
        lo = offsets.min(axis=0)
        hi = offsets.max(axis=0)
        ch, cw = h + int(hi[1] - lo[1]), w + int(hi[0] - lo[0])
        canvas = _pattern(spec.pattern, rng, spec.channels, ch, cw)
        frames = []
        for ox, oy in offsets:
            # the camera window moves opposite to the content
            y0, x0 = int(hi[1] - oy), int(hi[0] - ox)
            frames.append(canvas[:, y0:y0 + h, x0:x0 + w])
    clean = VideoClip(torch.from_numpy(np.stack(frames)).to(dtype))
    fwd = [translation_flow((h, w), dx, dy, dtype, src=i + 1, dst=i + 2) for i, (dx, dy) in enumerate(motions)]
    bwd = [translation_flow((h, w), -dx, -dy, dtype, src=i + 2, dst=i + 1) for i, (dx, dy) in enumerate(motions)]
    return clean, fwd, bwd


def add_noise(clip: VideoClip, spec: NoiseSpec, seed: int) -> VideoClip:
    """Add i.i.d. Gaussian noise of std ``spec.sigma``; clamp for clipped-awgn."""
    if spec.sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = clip.frames
    if spec.sigma == 0:
        noisy = x.clone()
    else:
        g = torch.Generator().manual_seed(int(seed))
        noisy = x + spec.sigma * torch.randn(x.shape, generator=g, dtype=torch.float64).to(x.dtype)
    if spec.kind == "clipped-awgn":
        noisy = noisy.clamp(0.0, 1.0)
    return VideoClip(noisy)


def sample_patches(clean: VideoClip, count: int, patch: int, length: int, seed: int,
                   with_origin: bool = False):
    """Draw ``count`` random spatio-temporal crops of ``length`` x ``patch`` x ``patch``."""
    h, w = clean.shape
    if patch < 1 or patch > min(h, w):
        raise ValueError(f"patch {patch} must be in [1, {min(h, w)}]")
    if length < 1 or length > clean.T:
        raise ValueError(f"length {length} must be in [1, {clean.T}]")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        t0 = int(rng.integers(0, clean.T - length + 1))
        y0 = int(rng.integers(0, h - patch + 1))
        x0 = int(rng.integers(0, w - patch + 1))
        crop = VideoClip(clean.frames[t0:t0 + length, :, y0:y0 + patch, x0:x0 + patch].clone())
        out.append((crop, (t0, y0, x0)) if with_origin else crop)
    return out


def mirror_clip(clip: VideoClip, length: Optional[int] = None) -> VideoClip:
    """Append the reversed sequence (e.g. 7 frames -> 14), optionally truncated."""
    frames = torch.cat([clip.frames, clip.frames.flip(0)], dim=0)
    if length is not None:
        if length > frames.shape[0]:
            raise ValueError(f"cannot mirror {clip.T} frames to {length}")
        frames = frames[:length]
    return VideoClip(frames)


# ---------------------------------------------------------------------------
# I/O

def write_clip(clip: VideoClip, path) -> None:
    """Raw ``.flov`` container, or a directory of 8-bit PNGs when ``path`` has no suffix."""
    path = Path(path)
    if path.suffix == ".flov":
        path.write_bytes(clip_to_bytes(clip))
        return
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames, 1):
        arr = np.round(frame.detach().cpu().double().clamp(0, 1).numpy() * 255).astype(np.uint8)
        img = Image.fromarray(arr[0]) if arr.shape[0] == 1 else Image.fromarray(arr.transpose(1, 2, 0))
        img.save(path / f"frame_{i:05d}.png")


def clip_to_bytes(clip: VideoClip) -> bytes:
    """Header ``FLOV1`` + u32 T, H, W, C, then f32 samples in (T, C, H, W) order."""
    t, c, h, w = clip.frames.shape
    return CLIP_MAGIC + struct.pack("<IIII", t, h, w, c) + \
        clip.frames.detach().cpu().numpy().astype("<f4").tobytes()


def clip_from_bytes(raw: bytes, name: str = "<bytes>") -> VideoClip:
    if raw[:5] != CLIP_MAGIC:
        raise ClipFormatError(f"{name}: missing FLOV1 header")
    if len(raw) < 21:
        raise ClipFormatError(f"{name}: truncated header")
    t, h, w, c = struct.unpack_from("<IIII", raw, 5)
    body = raw[21:]
    if len(body) != t * c * h * w * 4:
        raise ClipFormatError(f"{name}: expected {t * c * h * w * 4} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(t, c, h, w)
    return VideoClip(torch.from_numpy(arr.copy()))


_FRAME_RE = re.compile(r"^frame_(\d{5})\.png$")


def read_clip(path) -> VideoClip:
    path = Path(path)
    if path.is_file():
        return clip_from_bytes(path.read_bytes(), str(path))
    if not path.is_dir():
        raise FileNotFoundError(path)
    numbered = []
    for p in path.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            numbered.append((int(m.group(1)), p))
    if not numbered:
        raise ClipFormatError(f"{path}: no frame_NNNNN.png files")
    numbered.sort()
    indices = [i for i, _ in numbered]
    if indices != list(range(1, len(indices) + 1)):
        raise ClipFormatError(f"{path}: frame numbers are not contiguous from 1: {indices}")
    frames = []
    for _, p in numbered:
        img = np.asarray(Image.open(p))
        arr = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)[:3]
        frames.append(torch.from_numpy(arr.astype(np.float32) / 255.0))
    try:
        return VideoClip.from_frames(frames)
    except ValueError as exc:
        raise ClipFormatError(f"{path}: {exc}") from None
