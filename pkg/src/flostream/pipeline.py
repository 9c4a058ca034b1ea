"""Offline and streaming denoising plus the ForwardRNN / BiRNN baselines.

The streaming path holds at most ``k + 1`` frames, one forward hidden
state, one look-ahead state and ``k`` (ring, flow) pairs, so its memory does
not depend on the stream length. Frame ``t`` is emitted when frame
``min(t + k, T)`` has been ingested; tail frames come out of
:meth:`StreamState.flush`.
"""
from __future__ import annotations

import dataclasses
from collections import deque
from typing import List, Optional

import torch

from .core import ConfigError, DenoiserConfig, VideoClip, validate_config
from .flow import FlowProvider, estimate_flow
from .net import BiRNN, FloRNN, noise_map
from .warp import warp_back

ARCH_FIELDS = ("channels", "num_res_blocks", "use_noise_map", "img_channels")


class StreamError(RuntimeError):
    """Misuse of a stream (push after flush, double flush, shape change)."""


class MemoryMeter:
    """Tracks the number of feature-map elements retained by a denoiser."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def observe(self, elements: int) -> None:
        self.current = elements
        self.peak = max(self.peak, elements)


def resolve_config(model, cfg: Optional[DenoiserConfig], frame_shape) -> DenoiserConfig:
    """Merge a runtime config with the model's and validate it for ``frame_shape``."""
    if cfg is None:
        cfg = model.cfg
    for name in ARCH_FIELDS:
        if getattr(cfg, name) != getattr(model.cfg, name):
            raise ConfigError(f"config {name}={getattr(cfg, name)!r} does not match the model "
                              f"({getattr(model.cfg, name)!r})")
    return validate_config(cfg, frame_shape)


def _param_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def clip_flows(provider: FlowProvider, frames: torch.Tensor):
    """Forward and backward flows between consecutive frames of ``(T, C, H, W)``.

    Returns lists of ``(1, 2, H, W)`` tensors: ``fwd[i] = o_{i->i+1}`` and
    ``bwd[i] = o_{i+1->i}`` (0-based).
    """
    fwd, bwd = [], []
    for i in range(frames.shape[0] - 1):
        fwd.append(estimate_flow(provider, frames[i], frames[i + 1], i + 1, i + 2).data.unsqueeze(0))
        bwd.append(estimate_flow(provider, frames[i + 1], frames[i], i + 2, i + 1).data.unsqueeze(0))
    return fwd, bwd


def denoise_offline(clip: VideoClip, model: FloRNN, provider: FlowProvider, sigma: float,
                    cfg: Optional[DenoiserConfig] = None) -> VideoClip:
    """Denoise a whole clip with FloRNN; outputs are clamped to [0, 1]."""
    if not isinstance(model, FloRNN):
        raise TypeError("denoise_offline needs a FloRNN; use birnn_denoise for BiRNN")
    rcfg = resolve_config(model, cfg, clip.shape)
    seq = clip.frames.to(_param_dtype(model))
    fwd, bwd = clip_flows(provider, seq)
    with torch.no_grad():
        out = model(seq.unsqueeze(0), sigma, fwd, bwd, cfg=rcfg)
    return VideoClip(out[0].clamp(0.0, 1.0))


def forwardrnn_denoise(clip: VideoClip, model: FloRNN, provider: FlowProvider, sigma: float,
                       cfg: Optional[DenoiserConfig] = None) -> VideoClip:
    """Forward module and decoder only: FloRNN with ``k = 0``."""
    base = cfg or model.cfg
    return denoise_offline(clip, model, provider, sigma, dataclasses.replace(base, k=0))


def birnn_denoise(clip: VideoClip, model: BiRNN, provider: FlowProvider, sigma: float,
                  meter: Optional[MemoryMeter] = None) -> VideoClip:
    """Offline bidirectional baseline; keeps one backward feature per frame."""
    if not isinstance(model, BiRNN):
        raise TypeError("birnn_denoise needs a BiRNN")
    resolve_config(model, None, clip.shape)
    seq = clip.frames.to(_param_dtype(model))
    fwd, bwd = clip_flows(provider, seq)
    stored: list = []
    with torch.no_grad():
        out = model(seq.unsqueeze(0), sigma, fwd, bwd, store=stored)
    if meter is not None:
        per_frame = stored[0].numel()
        # all backward features plus the running forward feature
        meter.observe(sum(h.numel() for h in stored) + per_frame)
    return VideoClip(out[0].clamp(0.0, 1.0))


class StreamState:
    """Online FloRNN with fixed latency ``k`` and bounded memory.

    ``push`` returns the frames that became ready (at most one, two with the
    low-latency head), ``flush`` returns the tail. Emissions are strictly
    increasing in frame index. Ticks count pushes from 1; the flush is tick
    ``T + 1``.
    """

    def __init__(self, model: FloRNN, provider: FlowProvider, sigma: float,
                 cfg: Optional[DenoiserConfig] = None, low_latency_head: bool = False,
                 meter: Optional[MemoryMeter] = None):
        if not isinstance(model, FloRNN):
            raise TypeError("streaming needs a FloRNN")
        self.model = model
        self.provider = provider
        self.sigma = sigma
        self.low_latency_head = low_latency_head
        self.meter = meter if meter is not None else MemoryMeter()
        self._cfg_in = cfg
        self.cfg: Optional[DenoiserConfig] = None
        self.frame_shape = None
        self.dtype = _param_dtype(model)

        self.frames: deque = deque()       # (t, frame), capacity k + 1
        self.pairs: deque = deque()        # (ring, flow), capacity k
        self.h_f = None
        self.fwd_prev = None               # frame t - 1 for the forward module
        self.la = None
        self.la_prev = None                # newest ingested frame for the look-ahead module
        self.nmap = None
        self.ingested = 0
        self.emitted = 0
        self.next_t = 1
        self.closed = False
        self.emit_ticks: dict = {}

    # -- helpers ---------------------------------------------------------

    def _init(self, frame):
        self.frame_shape = tuple(frame.shape)
        self.cfg = resolve_config(self.model, self._cfg_in, frame.shape)
        self.frames = deque(maxlen=self.cfg.k + 1)
        self.pairs = deque(maxlen=self.cfg.k)
        if self.model.cfg.use_noise_map:
            self.nmap = noise_map(self.sigma, frame.unsqueeze(0))

    def retained_elements(self) -> int:
        """Feature-map elements held by the state (hidden features and rings)."""
        seen = {}
        tensors = [self.h_f]
        if self.la is not None:
            tensors.append(self.la.h)
            if self.la.ring is not None:
                tensors.append(self.la.ring.canvas)
        tensors.extend(ring.canvas for ring, _ in self.pairs if ring is not None)
        for x in tensors:
            if x is not None:
                seen[id(x)] = x.numel()
        return sum(seen.values())

    def _advance_lookahead(self, t: int, frame):
        y = frame.unsqueeze(0)
        if self.la is None:
            self.la, _, _ = self.model.lookahead_step(y, self.nmap)
        else:
            fwd = estimate_flow(self.provider, self.la_prev, frame, t - 1, t).data.unsqueeze(0)
            bwd = None
            if self.cfg.warp_mode == "backward":
                bwd = estimate_flow(self.provider, frame, self.la_prev, t, t - 1).data.unsqueeze(0)
            self.la, ring, flow = self.model.lookahead_step(
                y, self.nmap, self.la, fwd, bwd, self.cfg.border_margin, self.cfg.warp_mode)
            self.pairs.append((ring, flow))
        self.la_prev = frame

    def _frame(self, t: int):
        for idx, f in self.frames:
            if idx == t:
                return f
        raise StreamError(f"frame {t} is no longer buffered")

    def _emit(self, t: int, horizon: int):
        """Decode frame ``t`` using the look-ahead feature of frame ``horizon``."""
        y = self._frame(t)
        if t == 1:
            self.h_f = self.model.forward_step(y.unsqueeze(0), self.nmap)
        else:
            flow = estimate_flow(self.provider, y, self.fwd_prev, t, t - 1).data.unsqueeze(0)
            self.h_f = self.model.forward_step(y.unsqueeze(0), self.nmap, self.h_f, flow)
        self.fwd_prev = y

        steps = horizon - t
        if self.cfg.k == 0:
            h_al = self.model.zero_feature(y.unsqueeze(0))
        else:
            pairs = list(self.pairs)[len(self.pairs) - steps:] if steps else []
            h_al = warp_back(self.la.h, [p[0] for p in pairs], [p[1] for p in pairs])
        out = self.model.decode(self.h_f, h_al, y.unsqueeze(0))[0].clamp(0.0, 1.0)
        self.emitted += 1
        self.next_t = t + 1
        self.emit_ticks[t] = self.ingested + (1 if self.closed else 0)
        return out

    # -- public API ------------------------------------------------------

    def push(self, frame: torch.Tensor) -> List[torch.Tensor]:
        if self.closed:
            raise StreamError("push after flush")
        frame = frame.to(self.dtype)
        if self.frame_shape is None:
            self._init(frame)
        elif tuple(frame.shape) != self.frame_shape:
            raise StreamError(f"frame shape {tuple(frame.shape)} differs from stream {self.frame_shape}")

        self.ingested += 1
        n = self.ingested
        self.frames.append((n, frame))
        out = []
        with torch.no_grad():
            if self.cfg.k > 0:
                self._advance_lookahead(n, frame)
            if self.low_latency_head and n == 1 and self.cfg.k > 0:
                out.append(self._emit(1, 1))
            while self.next_t <= n - self.cfg.k:
                out.append(self._emit(self.next_t, self.next_t + self.cfg.k))
        self.meter.observe(self.retained_elements())
        return out

    def flush(self) -> List[torch.Tensor]:
        if self.closed:
            raise StreamError("stream already flushed")
        self.closed = True
        out = []
        with torch.no_grad():
            while self.next_t <= self.ingested:
                out.append(self._emit(self.next_t, self.ingested))
                self.meter.observe(self.retained_elements())
        return out

    def latency(self, t: int = 1) -> int:
        """Ticks between ingesting frame ``t`` and emitting its output."""
        return self.emit_ticks[t] - t


def stream_push(state: StreamState, frame: torch.Tensor) -> List[torch.Tensor]:
    return state.push(frame)


def stream_flush(state: StreamState) -> List[torch.Tensor]:
    return state.flush()


def denoise_stream(clip: VideoClip, model: FloRNN, provider: FlowProvider, sigma: float,
                   cfg: Optional[DenoiserConfig] = None, meter: Optional[MemoryMeter] = None) -> VideoClip:
    """Run a whole clip through :class:`StreamState` (push every frame, then flush)."""
    state = StreamState(model, provider, sigma, cfg, meter=meter)
    out = []
    for frame in clip.frames:
        out.extend(state.push(frame))
    out.extend(state.flush())
    return VideoClip(torch.stack(out))


class BiRNNStream:
    """BiRNN behind the streaming interface: everything is emitted at flush."""

    def __init__(self, model: BiRNN, provider: FlowProvider, sigma: float,
                 meter: Optional[MemoryMeter] = None):
        self.model = model
        self.provider = provider
        self.sigma = sigma
        self.meter = meter if meter is not None else MemoryMeter()
        self.frames = []
        self.closed = False
        self.emit_tick = None

    def push(self, frame) -> list:
        if self.closed:
            raise StreamError("push after flush")
        self.frames.append(frame)
        return []

    def flush(self) -> list:
        if self.closed:
            raise StreamError("stream already flushed")
        self.closed = True
        out = birnn_denoise(VideoClip(torch.stack(self.frames)), self.model, self.provider,
                            self.sigma, self.meter)
        self.emit_tick = len(self.frames) + 1
        return list(out.frames)

    def latency(self, t: int = 1) -> int:
        return self.emit_tick - t
