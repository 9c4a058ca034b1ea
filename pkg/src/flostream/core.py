"""Shared value types, conventions and configuration handling.

Conventions used throughout the package:

* Intensities live on the [0, 1] scale. Noise levels quoted on the 8-bit
  scale are divided by 255 when a :class:`NoiseSpec` is built.
* Frames are tensors of shape ``(C, H, W)``; batched frames ``(N, C, H, W)``;
  clips ``(T, C, H, W)``.
* A flow ``o_{a->b}`` is stored as ``(..., 2, H, W)`` with channel 0 holding
  dx and channel 1 holding dy. It is defined on frame ``a``'s pixel grid and
  points toward frame ``b``'s coordinates: pixel ``(x, y)`` of ``a``
  corresponds to ``(x + dx, y + dy)`` in ``b``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import torch

WARP_MODES = ("backward", "forward+enlarge", "forward-no-enlarge")
NOISE_KINDS = ("awgn", "clipped-awgn")


class ConfigError(ValueError):
    """Raised for invalid or contradictory configuration values."""


@dataclass(frozen=True)
class VideoClip:
    """An ordered sequence of equally shaped frames, stored as ``(T, C, H, W)``."""

    frames: torch.Tensor

    def __post_init__(self):
        if self.frames.dim() != 4:
            raise ValueError(f"clip tensor must be (T, C, H, W), got {tuple(self.frames.shape)}")
        if self.frames.shape[0] < 1:
            raise ValueError("clip must contain at least one frame")
        if self.frames.shape[1] not in (1, 3):
            raise ValueError(f"frames must have 1 or 3 channels, got {self.frames.shape[1]}")

    @classmethod
    def from_frames(cls, frames) -> "VideoClip":
        frames = list(frames)
        if not frames:
            raise ValueError("clip must contain at least one frame")
        shape = frames[0].shape
        for i, f in enumerate(frames):
            if f.shape != shape:
                raise ValueError(f"frame {i} has shape {tuple(f.shape)}, expected {tuple(shape)}")
        return cls(torch.stack(frames))

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def __len__(self):
        return self.T

    def __getitem__(self, t):
        return self.frames[t]

    def __iter__(self):
        return iter(self.frames)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement between two frames plus its direction tag.

    ``src`` and ``dst`` are 1-based frame indices (``None`` when unknown).
    ``data`` has shape ``(2, H, W)`` or ``(N, 2, H, W)``.
    """

    data: torch.Tensor
    src: Optional[int] = None
    dst: Optional[int] = None

    def __post_init__(self):
        if self.data.dim() not in (3, 4) or self.data.shape[-3] != 2:
            raise ValueError(f"flow must be (2, H, W) or (N, 2, H, W), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("flow contains non-finite values")

    @property
    def direction(self) -> Optional[str]:
        if self.src is None or self.dst is None:
            return None
        return "fwd" if self.dst > self.src else "bwd"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[-2], self.data.shape[-1]


def flow_tensor(flow) -> torch.Tensor:
    """Return the raw displacement tensor of a FlowField or tensor."""
    return flow.data if isinstance(flow, FlowField) else flow


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "awgn"
    sigma: float = 0.0  # on the [0, 1] scale

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")

    @classmethod
    def from_255(cls, sigma255: float, kind: str = "awgn") -> "NoiseSpec":
        return cls(kind=kind, sigma=sigma255 / 255.0)


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture and alignment settings.

    ``border_margin`` is either an ``int`` (pixels per side) or a ``float``
    ratio of ``min(H, W)`` per side. The default 0.05 per side amounts to a
    10% total enlargement.
    """

    k: int = 3
    border_margin: Union[int, float] = 0.05
    channels: int = 32
    num_res_blocks: int = 3
    use_noise_map: bool = True
    warp_mode: str = "forward+enlarge"
    img_channels: int = 1

    @property
    def noise_channels(self) -> int:
        return 1 if self.use_noise_map else 0

    def margin_pixels(self, height: int, width: int) -> int:
        return validate_config(self, (height, width)).border_margin


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def validate_config(cfg: DenoiserConfig, frame_shape) -> DenoiserConfig:
    """Check ``cfg`` against a frame shape and resolve the margin to pixels.

    ``frame_shape`` is ``(H, W)`` or any shape whose last two entries are
    ``(H, W)``. Backward and no-enlarge warp modes resolve the margin to 0;
    forward+enlarge with a margin that resolves to 0 is rejected.
    """
    h, w = int(frame_shape[-2]), int(frame_shape[-1])
    if not isinstance(cfg.k, int) or cfg.k < 0:
        raise ConfigError(f"k must be a non-negative integer, got {cfg.k!r}")
    if cfg.channels < 1:
        raise ConfigError(f"channels must be >= 1, got {cfg.channels}")
    if cfg.num_res_blocks < 1:
        raise ConfigError(f"num_res_blocks must be >= 1, got {cfg.num_res_blocks}")
    if cfg.img_channels not in (1, 3):
        raise ConfigError(f"img_channels must be 1 or 3, got {cfg.img_channels}")
    if cfg.warp_mode not in WARP_MODES:
        raise ConfigError(f"warp_mode must be one of {WARP_MODES}, got {cfg.warp_mode!r}")

    margin = cfg.border_margin
    if isinstance(margin, bool) or not isinstance(margin, (int, float)):
        raise ConfigError(f"border_margin must be int pixels or float ratio, got {margin!r}")
    if margin < 0:
        raise ConfigError(f"border_margin must be >= 0, got {margin}")
    if isinstance(margin, float):
        margin = _round_half_up(margin * min(h, w))
    if margin >= min(h, w) / 2:
        raise ConfigError(f"border margin {margin}px must be smaller than min(H, W)/2 = {min(h, w) / 2}")

    if cfg.warp_mode == "forward+enlarge":
        if margin == 0:
            raise ConfigError("warp_mode 'forward+enlarge' needs a margin that resolves to at least 1 pixel")
    else:
        margin = 0
    return dataclasses.replace(cfg, border_margin=margin)


# ---------------------------------------------------------------------------
# flat key = value config files

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_margin(text: str) -> Union[int, float]:
    text = text.strip()
    if text.endswith("%"):
        return float(text[:-1]) / 100.0
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"border_margin must be pixels, a ratio or a percentage, got {text!r}") from None


# key -> parser; the first group is the documented interface, the rest are
# training settings accepted by the same file.
CONFIG_KEYS = {
    "k": int,
    "border_margin": parse_margin,
    "channels": int,
    "num_res_blocks": int,
    "use_noise_map": _parse_bool,
    "warp_mode": str,
    "sigma": float,
    "noise_kind": str,
    "seed": int,
    "img_channels": int,
    "model": str,
    "iterations": int,
    "batch_size": int,
    "patch_size": int,
    "clip_length": int,
    "lr": float,
    "lr_drop_to": float,
    "lr_drop_at": int,
    "sigma_min": float,
    "sigma_max": float,
    "loss": str,
    "log_every": int,
    "grad_clip": float,
    "motion_max": int,
}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return values


def read_config(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def denoiser_config_from(values: dict, **overrides) -> DenoiserConfig:
    names = {f.name for f in dataclasses.fields(DenoiserConfig)}
    kwargs = {k: v for k, v in values.items() if k in names}
    kwargs.update(overrides)
    return DenoiserConfig(**kwargs)


def config_values(cfg: DenoiserConfig) -> dict:
    return dataclasses.asdict(cfg)
