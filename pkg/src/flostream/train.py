"""Losses, the Adam training loop and BiRNN-to-FloRNN feature distillation."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .core import ConfigError, VideoClip
from .data import SynthSpec, synth_clip
from .flow import FlowProvider, estimate_flow
from .net import BiRNN, FloRNN

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    patch_size: int = 48
    clip_length: int = 10
    iterations: int = 1500
    lr: float = 1e-4
    lr_drop_to: float = 1e-5
    lr_drop_at: Optional[int] = None   # None: never drop
    sigma_min: float = 0.0             # 8-bit scale
    sigma_max: float = 55.0
    seed: int = 0
    loss: str = "rec"                  # "rec" or "rec+distill"
    log_every: int = 100
    grad_clip: Optional[float] = None
    lambda_rec: float = 1.0
    lambda_distill: float = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr_drop_at is not None and self.lr_drop_at > self.iterations:
            raise ConfigError(f"lr_drop_at ({self.lr_drop_at}) must not exceed iterations ({self.iterations})")
        if not 0 <= self.sigma_min <= self.sigma_max <= 255:
            raise ConfigError(f"sigma range [{self.sigma_min}, {self.sigma_max}] must lie within [0, 255]")
        if self.loss not in ("rec", "rec+distill"):
            raise ConfigError(f"loss must be 'rec' or 'rec+distill', got {self.loss!r}")
        if self.batch_size < 1 or self.clip_length < 1 or self.patch_size < 1:
            raise ConfigError("batch_size, clip_length and patch_size must be >= 1")

    def lr_at(self, it: int) -> float:
        if self.lr_drop_at is not None and it >= self.lr_drop_at:
            return self.lr_drop_to
        return self.lr


TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def train_config_from(values: dict, **overrides) -> TrainConfig:
    kwargs = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# losses

def _frames(x) -> torch.Tensor:
    """Clip-like input as ``(N, T, C, H, W)``."""
    if isinstance(x, VideoClip):
        x = x.frames
    return x.unsqueeze(0) if x.dim() == 4 else x


def rec_loss(pred, clean) -> torch.Tensor:
    """Sum over frames of the per-frame mean squared error."""
    p, c = _frames(pred), _frames(clean)
    if p.shape != c.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(c.shape)}")
    return ((p - c) ** 2).mean(dim=(0, 2, 3, 4)).sum()


def distill_loss(student: Sequence[torch.Tensor], teacher: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over frames of the mean absolute feature difference; teacher is constant."""
    if len(student) != len(teacher):
        raise ValueError(f"got {len(student)} student and {len(teacher)} teacher features")
    total = None
    for s, t in zip(student, teacher):
        if s.shape != t.shape:
            raise ValueError(f"feature shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
        term = (s - t.detach()).abs().mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("empty feature lists")
    return total


def batch_psnr(pred: torch.Tensor, clean: torch.Tensor) -> float:
    mse = float(((pred.detach().clamp(0, 1) - clean) ** 2).mean())
    return 99.0 if mse == 0 else min(99.0, 10 * math.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# data

class SynthSource:
    """Batches of synthetic translating clips with exact flows.

    ``motion="camera"``: each clip pans with a constant per-frame motion whose
    components are drawn from ``{-step, 0, step}`` (not both zero).
    ``motion="walk"``: independent per-frame steps bounded by ``step``.
    """

    def __init__(self, size: int = 48, T: int = 10, channels: int = 1, pattern: str = "random-texture",
                 motion: str = "camera", step: int = 2, mode: str = "fresh"):
        if motion not in ("camera", "walk"):
            raise ValueError(f"motion must be 'camera' or 'walk', got {motion!r}")
        self.size, self.T, self.channels = size, T, channels
        self.pattern, self.motion, self.step, self.mode = pattern, motion, step, mode

    def spec(self, seed: int) -> SynthSpec:
        rng = np.random.default_rng([seed, 7])
        if self.motion == "camera":
            choices = [(dx, dy) for dx in (-self.step, 0, self.step)
                       for dy in (-self.step, 0, self.step) if (dx, dy) != (0, 0)]
            motion = choices[int(rng.integers(len(choices)))]
        else:
            motion = None
        return SynthSpec(pattern=self.pattern, motion=motion, T=self.T, height=self.size,
                         width=self.size, channels=self.channels, seed=seed,
                         motion_max=self.step, mode=self.mode)

    def clip(self, seed: int):
        return synth_clip(self.spec(seed))

    def batch(self, seeds: Sequence[int]):
        clips, fwds, bwds = [], [], []
        for s in seeds:
            clean, fwd, bwd = self.clip(int(s))
            clips.append(clean.frames)
            fwds.append([f.data for f in fwd])
            bwds.append([f.data for f in bwd])
        clean = torch.stack(clips)
        fwd = [torch.stack([f[i] for f in fwds]) for i in range(self.T - 1)]
        bwd = [torch.stack([b[i] for b in bwds]) for i in range(self.T - 1)]
        return clean, fwd, bwd


def provider_flows(provider: FlowProvider, seq: torch.Tensor):
    """Flows for a batch ``(N, T, C, H, W)`` from a provider (estimated on the inputs)."""
    T = seq.shape[1]
    fwd = [estimate_flow(provider, seq[:, i], seq[:, i + 1], i + 1, i + 2).data for i in range(T - 1)]
    bwd = [estimate_flow(provider, seq[:, i + 1], seq[:, i], i + 2, i + 1).data for i in range(T - 1)]
    return fwd, bwd


def _noisy_batch(clean: torch.Tensor, tcfg: TrainConfig, it: int):
    g = torch.Generator().manual_seed(tcfg.seed * 1_000_003 + it)
    n = clean.shape[0]
    sigma = tcfg.sigma_min + (tcfg.sigma_max - tcfg.sigma_min) * torch.rand(n, generator=g, dtype=torch.float64)
    sigma = (sigma / 255.0).to(clean.dtype)
    noise = torch.randn(clean.shape, generator=g, dtype=clean.dtype)
    return clean + sigma.view(n, 1, 1, 1, 1) * noise, sigma


def _batch_seeds(tcfg: TrainConfig, it: int) -> List[int]:
    rng = np.random.default_rng([tcfg.seed, it, 11])
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=tcfg.batch_size)]


# ---------------------------------------------------------------------------
# loop

def _optimise(model, params, source: SynthSource, tcfg: TrainConfig, loss_fn: Callable,
              provider: Optional[FlowProvider], log_path, ckpt_path, ckpt_fn):
    opt = torch.optim.Adam(params, lr=tcfg.lr, betas=(0.9, 0.999), eps=1e-8)
    history = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    dtype = next(model.parameters()).dtype
    try:
        model.train()
        for it in range(1, tcfg.iterations + 1):
            lr = tcfg.lr_at(it - 1)
            for group in opt.param_groups:
                group["lr"] = lr
            clean, fwd, bwd = source.batch(_batch_seeds(tcfg, it))
            clean = clean.to(dtype)
            noisy, sigma = _noisy_batch(clean, tcfg, it)
            if provider is not None:
                fwd, bwd = provider_flows(provider, noisy)
            fwd = [f.to(dtype) for f in fwd]
            bwd = [b.to(dtype) for b in bwd]

            loss, pred = loss_fn(noisy, sigma, fwd, bwd, clean)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {float(loss.detach())} at iteration {it} (lr={lr}, "
                    f"sigma={[round(float(s) * 255, 2) for s in sigma]})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tcfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, tcfg.grad_clip)
            opt.step()

            if it % tcfg.log_every == 0 or it == tcfg.iterations:
                entry = {"iter": it, "loss": float(loss.detach()), "lr": lr, "psnr": batch_psnr(pred, clean)}
                history.append(entry)
                line = f"iter={it} loss={entry['loss']:.6f} lr={lr:g} psnr={entry['psnr']:.4f}"
                log.info(line)
                if log_file:
                    log_file.write(line + "\n")
                    log_file.flush()
                if ckpt_path and ckpt_fn:
                    ckpt_fn(model, ckpt_path)
    finally:
        if log_file:
            log_file.close()
        model.eval()
    return history


def train_loop(model, source: SynthSource, tcfg: TrainConfig, provider: Optional[FlowProvider] = None,
               log_path=None, ckpt_path=None, ckpt_fn=None):
    """Train ``model`` (FloRNN or BiRNN) with the reconstruction loss.

    Flows come from the source's ground truth unless ``provider`` is given.
    Returns ``(model, history)`` where history holds the logged metrics.
    """
    def loss_fn(noisy, sigma, fwd, bwd, clean):
        pred = model(noisy, sigma, fwd, bwd)
        return rec_loss(pred, clean), pred

    params = [p for p in model.parameters() if p.requires_grad]
    history = _optimise(model, params, source, tcfg, loss_fn, provider, log_path, ckpt_path, ckpt_fn)
    return model, history


def _check_pair(student, teacher) -> None:
    for name in ("channels", "num_res_blocks", "use_noise_map", "img_channels"):
        if getattr(student.cfg, name) != getattr(teacher.cfg, name):
            raise ConfigError(f"teacher/student mismatch on {name}: "
                              f"{getattr(teacher.cfg, name)!r} vs {getattr(student.cfg, name)!r}")


def init_student_from_teacher(student: FloRNN, teacher: BiRNN) -> None:
    _check_pair(student, teacher)
    student.forward_rnn.load_state_dict(teacher.forward_rnn.state_dict())
    student.decoder.load_state_dict(teacher.decoder.state_dict())


def distill_finetune(student: FloRNN, teacher: BiRNN, source: SynthSource, tcfg: TrainConfig,
                     provider: Optional[FlowProvider] = None, freeze_forward: bool = False,
                     init_from_teacher: bool = True, log_path=None):
    """Fine-tune a FloRNN whose aligned look-ahead features mimic the teacher's backward ones.

    Optimises ``lambda_rec * L_rec + lambda_distill * L_distill`` over the
    look-ahead module and decoder, plus the forward module unless
    ``freeze_forward``.
    """
    if not isinstance(teacher, BiRNN) or not isinstance(student, FloRNN):
        raise TypeError("distillation needs a BiRNN teacher and a FloRNN student")
    _check_pair(student, teacher)
    if init_from_teacher:
        init_student_from_teacher(student, teacher)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)

    params = list(student.lookahead_rnn.parameters()) + list(student.decoder.parameters())
    if not freeze_forward:
        params += list(student.forward_rnn.parameters())
    for p in student.forward_rnn.parameters():
        p.requires_grad_(not freeze_forward)

    def loss_fn(noisy, sigma, fwd, bwd, clean):
        pred, _, h_l = student(noisy, sigma, fwd, bwd, return_features=True)
        with torch.no_grad():
            _, _, h_b = teacher(noisy, sigma, fwd, bwd, return_features=True)
        loss = tcfg.lambda_rec * rec_loss(pred, clean)
        if tcfg.lambda_distill:
            loss = loss + tcfg.lambda_distill * distill_loss(h_l, h_b)
        return loss, pred

    history = _optimise(student, params, source, tcfg, loss_fn, provider, log_path, None, None)
    for p in student.forward_rnn.parameters():
        p.requires_grad_(True)
    return student, history


def feature_gap(student: FloRNN, teacher: BiRNN, noisy: torch.Tensor, sigma, fwd, bwd) -> float:
    """Mean ``|h^l_{t+k->t} - h^b_t|`` over a clip batch."""
    with torch.no_grad():
        _, _, h_l = student(noisy, sigma, fwd, bwd, return_features=True)
        _, _, h_b = teacher(noisy, sigma, fwd, bwd, return_features=True)
    return float(sum((a - b).abs().mean() for a, b in zip(h_l, h_b)) / len(h_l))
