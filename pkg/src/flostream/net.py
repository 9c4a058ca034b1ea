"""Network building blocks and the recurrent denoisers.

``FloRNN`` combines a forward recurrent module (backward-warped history), a
look-ahead recurrent module running ``k`` frames ahead (forward splatting
with border enlargement) and a two-convolution decoder. ``BiRNN`` is the
offline baseline with a backward recurrent module in place of the
look-ahead one. ``k = 0`` turns FloRNN into the ForwardRNN baseline.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from .core import DenoiserConfig, flow_tensor, validate_config
from .flow import FlowProvider, estimate_flow
from .warp import BorderRing, backward_warp, forward_warp_enlarged, split_border, warp_back


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=1, padding=1)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)
        self.relu = nn.ReLU()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(self.relu(self.conv1(x)))


class ResidualStack(nn.Module):
    """Input 3x3 conv to ``channels`` followed by ``num_blocks`` residual blocks."""

    def __init__(self, in_channels: int, channels: int, num_blocks: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv_in = conv3x3(in_channels, channels)
        self.blocks = nn.Sequential(*[ResBlock(channels) for _ in range(num_blocks)])

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.blocks(self.conv_in(x))


class Decoder(nn.Module):
    """conv(2C -> C), ReLU, conv(C -> frame channels); the last conv starts at zero."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.conv1 = conv3x3(2 * channels, channels)
        self.conv2 = conv3x3(channels, out_channels)
        self.relu = nn.ReLU()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return self.conv2(self.relu(self.conv1(x)))


def noise_map(sigma, like: torch.Tensor) -> torch.Tensor:
    """Constant sigma plane ``(N, 1, H, W)`` matching a batch of frames."""
    n, _, h, w = like.shape
    s = torch.as_tensor(sigma, dtype=like.dtype, device=like.device).reshape(-1, 1, 1, 1)
    return s.expand(n, 1, h, w)


def stack_param_count(in_channels: int, channels: int, num_blocks: int) -> int:
    conv_in = 9 * in_channels * channels + channels
    block = 2 * (9 * channels * channels + channels)
    return conv_in + num_blocks * block


def param_count(cfg: DenoiserConfig) -> int:
    """Closed-form parameter count of a FloRNN (or BiRNN) with config ``cfg``."""
    c, n = cfg.channels, cfg.num_res_blocks
    stack_in = cfg.img_channels + cfg.noise_channels + c
    decoder = (9 * 2 * c * c + c) + (9 * c * cfg.img_channels + cfg.img_channels)
    return 2 * stack_param_count(stack_in, c, n) + decoder


@dataclass
class LookaheadState:
    """Look-ahead hidden feature plus the ring and flow of its last transition."""

    h: torch.Tensor
    ring: Optional[BorderRing] = None
    flow: Optional[torch.Tensor] = None

    def __post_init__(self):
        # backward warp mode keeps a flow without a ring
        if self.ring is not None and self.flow is None:
            raise ValueError("a ring needs the flow it was splatted with")


class _Recurrent(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        in_ch = cfg.img_channels + cfg.noise_channels + cfg.channels
        self.forward_rnn = ResidualStack(in_ch, cfg.channels, cfg.num_res_blocks)
        self.decoder = Decoder(cfg.channels, cfg.img_channels)

    def _inputs(self, y, nmap, h):
        parts = [y]
        if self.cfg.use_noise_map:
            if nmap is None:
                raise ValueError("model was built with a noise map; pass sigma")
            parts.append(nmap)
        parts.append(h)
        return torch.cat(parts, dim=1)

    def zero_feature(self, y: torch.Tensor) -> torch.Tensor:
        n, _, h, w = y.shape
        return y.new_zeros(n, self.cfg.channels, h, w)

    def forward_step(self, y, nmap, h_prev=None, flow=None) -> torch.Tensor:
        """One forward-module step; ``flow`` is ``o_{t->t-1}`` on frame t's grid."""
        if (h_prev is None) != (flow is None):
            raise ValueError("h_prev and flow must both be given or both be None")
        if h_prev is None:
            h_warp = self.zero_feature(y)
        else:
            h_warp = backward_warp(h_prev, flow)
        return self.forward_rnn(self._inputs(y, nmap, h_warp))

    def decode(self, h_f, h_l, y) -> torch.Tensor:
        if h_f.shape != h_l.shape:
            raise ValueError(f"feature shapes differ: {tuple(h_f.shape)} vs {tuple(h_l.shape)}")
        if h_f.shape[-2:] != y.shape[-2:]:
            raise ValueError("feature and frame sizes differ")
        return y + self.decoder(torch.cat((h_f, h_l), dim=1))


class FloRNN(_Recurrent):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__(cfg)
        in_ch = cfg.img_channels + cfg.noise_channels + cfg.channels
        self.lookahead_rnn = ResidualStack(in_ch, cfg.channels, cfg.num_res_blocks)

    def lookahead_step(self, y_next, nmap, state: Optional[LookaheadState] = None,
                       flow_fwd=None, flow_bwd=None, margin: int = 0, warp_mode: Optional[str] = None):
        """Advance the look-ahead module onto ``y_next``.

        ``flow_fwd`` is ``o_{t->t+1}`` (previous frame to ``y_next``); the
        backward warp mode also needs ``flow_bwd = o_{t+1->t}``. Returns the
        new state and the emitted ``(ring, flow)`` pair, or ``(None, None)``
        on the first frame. The ring is ``None`` in backward mode.
        """
        if state is None:
            h = self.lookahead_rnn(self._inputs(y_next, nmap, self.zero_feature(y_next)))
            return LookaheadState(h), None, None
        if flow_fwd is None:
            raise ValueError("look-ahead step needs the forward flow")
        flow_fwd = flow_tensor(flow_fwd)
        mode = warp_mode or self.cfg.warp_mode
        if mode == "backward":
            if flow_bwd is None:
                raise ValueError("backward warp mode needs o_{t+1->t}")
            ring = None
            h_in = backward_warp(state.h, flow_bwd)
        else:
            m = margin if mode == "forward+enlarge" else 0
            ring, h_in = split_border(forward_warp_enlarged(state.h, flow_fwd, m))
        h = self.lookahead_rnn(self._inputs(y_next, nmap, h_in))
        return LookaheadState(h, ring, flow_fwd), ring, flow_fwd

    def forward(self, seq, sigma, flows_fwd: Sequence, flows_bwd: Sequence,
                cfg: Optional[DenoiserConfig] = None, return_features: bool = False):
        """Offline FloRNN over ``seq`` of shape ``(N, T, C, H, W)``.

        ``flows_fwd[i]`` is ``o_{i->i+1}`` and ``flows_bwd[i]`` is
        ``o_{i+1->i}`` (0-based frames). The look-ahead horizon of frame
        ``t`` is clamped to the last frame. Output is not clamped. ``cfg``
        may override ``k``, the margin and the warp mode of ``self.cfg``.
        """
        n, T = seq.shape[:2]
        rcfg = validate_config(cfg or self.cfg, seq.shape)
        k, margin, mode = rcfg.k, rcfg.border_margin, rcfg.warp_mode
        flows_fwd = [flow_tensor(f) for f in flows_fwd]
        flows_bwd = [flow_tensor(f) for f in flows_bwd]
        if len(flows_fwd) != T - 1 or len(flows_bwd) != T - 1:
            raise ValueError(f"need {T - 1} flows per direction, got {len(flows_fwd)}/{len(flows_bwd)}")
        nmap = noise_map(sigma, seq[:, 0]) if self.cfg.use_noise_map else None

        h_ls, rings = [], []
        if k > 0:
            state = None
            for t in range(T):
                if t == 0:
                    state, _, _ = self.lookahead_step(seq[:, 0], nmap)
                else:
                    state, ring, _ = self.lookahead_step(seq[:, t], nmap, state, flows_fwd[t - 1],
                                                         flows_bwd[t - 1], margin, mode)
                    rings.append(ring)
                h_ls.append(state.h)

        outs, feats_f, feats_l = [], [], []
        h_f = None
        for t in range(T):
            y = seq[:, t]
            h_f = self.forward_step(y, nmap, h_f, None if t == 0 else flows_bwd[t - 1])
            if k > 0:
                tp = min(t + k, T - 1)
                h_al = warp_back(h_ls[tp], rings[t:tp], flows_fwd[t:tp])
            else:
                h_al = self.zero_feature(y)
            outs.append(self.decode(h_f, h_al, y))
            if return_features:
                feats_f.append(h_f)
                feats_l.append(h_al)
        out = torch.stack(outs, dim=1)
        if return_features:
            return out, feats_f, feats_l
        return out


class BiRNN(_Recurrent):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__(cfg)
        in_ch = cfg.img_channels + cfg.noise_channels + cfg.channels
        self.backward_rnn = ResidualStack(in_ch, cfg.channels, cfg.num_res_blocks)

    def backward_step(self, y, nmap, h_next=None, flow=None) -> torch.Tensor:
        """Backward-module step; ``flow`` is ``o_{t->t+1}`` on frame t's grid."""
        if (h_next is None) != (flow is None):
            raise ValueError("h_next and flow must both be given or both be None")
        h_warp = self.zero_feature(y) if h_next is None else backward_warp(h_next, flow)
        return self.backward_rnn(self._inputs(y, nmap, h_warp))

    def forward(self, seq, sigma, flows_fwd: Sequence, flows_bwd: Sequence,
                return_features: bool = False, store: Optional[list] = None):
        n, T = seq.shape[:2]
        flows_fwd = [flow_tensor(f) for f in flows_fwd]
        flows_bwd = [flow_tensor(f) for f in flows_bwd]
        if len(flows_fwd) != T - 1 or len(flows_bwd) != T - 1:
            raise ValueError(f"need {T - 1} flows per direction, got {len(flows_fwd)}/{len(flows_bwd)}")
        nmap = noise_map(sigma, seq[:, 0]) if self.cfg.use_noise_map else None

        h_bs: List[Optional[torch.Tensor]] = [None] * T
        h_b = None
        for t in range(T - 1, -1, -1):
            h_b = self.backward_step(seq[:, t], nmap, h_b, None if t == T - 1 else flows_fwd[t])
            h_bs[t] = h_b
            if store is not None:
                store.append(h_b)

        outs, feats_f = [], []
        h_f = None
        for t in range(T):
            y = seq[:, t]
            h_f = self.forward_step(y, nmap, h_f, None if t == 0 else flows_bwd[t - 1])
            outs.append(self.decode(h_f, h_bs[t], y))
            feats_f.append(h_f)
        out = torch.stack(outs, dim=1)
        if return_features:
            return out, feats_f, h_bs
        return out


def build_model(cfg: DenoiserConfig, kind: str = "flornn", seed: Optional[int] = None) -> _Recurrent:
    if seed is not None:
        torch.manual_seed(seed)
    if kind == "flornn":
        return FloRNN(cfg)
    if kind == "birnn":
        return BiRNN(cfg)
    raise ValueError(f"unknown model kind {kind!r}")


def model_kind(model) -> str:
    return "birnn" if isinstance(model, BiRNN) else "flornn"


# ---------------------------------------------------------------------------
# single-frame operations on unbatched frames with flow providers

def _batch(x):
    return x.unsqueeze(0) if x is not None and x.dim() == 3 else x


def forward_step(model: _Recurrent, y_t, y_prev, h_prev, provider: FlowProvider, sigma=None, t: Optional[int] = None):
    """Provider-driven forward step on unbatched or batched frames.

    ``t`` is the 1-based index of ``y_t`` (needed by index-aware providers).
    """
    if (y_prev is None) != (h_prev is None):
        raise ValueError("y_prev and h_prev must both be given or both be None")
    y = _batch(y_t)
    nmap = noise_map(sigma, y) if model.cfg.use_noise_map else None
    if y_prev is None:
        return model.forward_step(y, nmap)
    yp = _batch(y_prev)
    if yp.shape != y.shape:
        raise ValueError(f"frame shapes differ: {tuple(y.shape)} vs {tuple(yp.shape)}")
    flow = estimate_flow(provider, y_t, y_prev, t, None if t is None else t - 1)
    return model.forward_step(y, nmap, _batch(h_prev), _batch(flow.data))


def lookahead_step(model: FloRNN, y_next, y_cur, state: Optional[LookaheadState], provider: FlowProvider,
                   margin: int, sigma=None, t_next: Optional[int] = None, warp_mode: Optional[str] = None):
    if (y_cur is None) != (state is None):
        raise ValueError("y_cur and state must both be given or both be None")
    y = _batch(y_next)
    nmap = noise_map(sigma, y) if model.cfg.use_noise_map else None
    if y_cur is None:
        return model.lookahead_step(y, nmap)
    t_cur = None if t_next is None else t_next - 1
    fwd = _batch(estimate_flow(provider, y_cur, y_next, t_cur, t_next).data)
    mode = warp_mode or model.cfg.warp_mode
    bwd = None
    if mode == "backward":
        bwd = _batch(estimate_flow(provider, y_next, y_cur, t_next, t_cur).data)
    return model.lookahead_step(y, nmap, state, fwd, bwd, margin, mode)


def decode(model: _Recurrent, h_f, h_l, y_t):
    return model.decode(_batch(h_f), _batch(h_l), _batch(y_t))
