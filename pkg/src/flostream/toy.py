"""Desk-scale benchmark: translating random-texture clips with exact flows.

Used by the ablation checks (ForwardRNN vs FloRNN vs BiRNN, alignment
mechanism, distillation). Every model is trained on the same seeded data
stream so comparisons are paired.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch

from .core import DenoiserConfig, NoiseSpec, VideoClip
from .data import add_noise
from .eval import border_mask, psnr
from .flow import TranslationFlow
from .net import BiRNN, FloRNN, build_model
from .pipeline import birnn_denoise, denoise_offline
from .train import SynthSource, TrainConfig, train_loop


@dataclass(frozen=True)
class ToyBenchmark:
    size: int = 48
    T: int = 10
    sigma255: float = 25.0
    step: int = 2
    channels: int = 16
    num_res_blocks: int = 2
    iterations: int = 1500
    batch_size: int = 4
    lr: float = 1e-3
    lr_drop_to: float = 1e-4
    lr_drop_at: int = 1200
    seed: int = 0
    test_clips: int = 8
    test_seed: int = 900_000

    def source(self) -> SynthSource:
        return SynthSource(size=self.size, T=self.T, motion="camera", step=self.step, mode="fresh")

    def train_config(self, **overrides) -> TrainConfig:
        kwargs = dict(batch_size=self.batch_size, patch_size=self.size, clip_length=self.T,
                      iterations=self.iterations, lr=self.lr, lr_drop_to=self.lr_drop_to,
                      lr_drop_at=min(self.lr_drop_at, self.iterations), sigma_min=self.sigma255,
                      sigma_max=self.sigma255, seed=self.seed, log_every=100)
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    def config(self, k: int, warp_mode: str = "forward+enlarge", margin: Optional[int] = None) -> DenoiserConfig:
        if margin is None:
            margin = max(2 * k, 1)
        return DenoiserConfig(k=k, border_margin=margin, channels=self.channels,
                              num_res_blocks=self.num_res_blocks, warp_mode=warp_mode)

    def test_set(self) -> List[Tuple[VideoClip, VideoClip, TranslationFlow]]:
        src = self.source()
        out = []
        for i in range(self.test_clips):
            seed = self.test_seed + i
            spec = src.spec(seed)
            clean, _, _ = src.clip(seed)
            noisy = add_noise(clean, NoiseSpec.from_255(self.sigma255), seed)
            out.append((clean, noisy, TranslationFlow(spec.motions())))
        return out

    def train(self, kind: str, cfg: DenoiserConfig, **tcfg_overrides):
        model = build_model(cfg, kind, seed=self.seed)
        model, history = train_loop(model, self.source(), self.train_config(**tcfg_overrides))
        return model, history


def denoise_set(model, test_set, sigma: float, cfg: Optional[DenoiserConfig] = None) -> List[VideoClip]:
    outs = []
    for _, noisy, provider in test_set:
        if isinstance(model, BiRNN):
            outs.append(birnn_denoise(noisy, model, provider, sigma))
        else:
            outs.append(denoise_offline(noisy, model, provider, sigma, cfg))
    return outs


def set_psnr(outputs, test_set, strip: int = 0) -> float:
    """PSNR pooled over every clip; ``strip > 0`` keeps only the border strip."""
    pred = torch.cat([o.frames for o in outputs])
    ref = torch.cat([c.frames for c, _, _ in test_set])
    mask = None
    if strip > 0:
        mask = border_mask(pred.shape[-2], pred.shape[-1], strip)
    return psnr(pred, ref, mask=mask)


def noisy_psnr(test_set) -> float:
    return set_psnr([n for _, n, _ in test_set], test_set)
