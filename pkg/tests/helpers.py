"""Shared test utilities: random parameters and central finite differences."""
import numpy as np
import torch

from flostream.core import DenoiserConfig
from flostream.flow import translation_flow
from flostream.net import build_model


def randomize(model, seed, scale=0.1):
    """Overwrite every parameter (zero-initialised ones included) with small random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def small_model(kind="flornn", k=1, margin=2, channels=4, blocks=1, seed=0, dtype=torch.float64,
                warp_mode="forward+enlarge", random=True):
    cfg = DenoiserConfig(k=k, border_margin=margin, channels=channels, num_res_blocks=blocks,
                         warp_mode=warp_mode)
    model = build_model(cfg, kind, seed=seed).to(dtype)
    if random:
        randomize(model, seed + 1)
    return model


def const_flows(T, h, w, dx, dy, n=1, dtype=torch.float64):
    f = translation_flow((h, w), dx, dy, dtype=dtype).data.unsqueeze(0).expand(n, -1, -1, -1)
    b = translation_flow((h, w), -dx, -dy, dtype=dtype).data.unsqueeze(0).expand(n, -1, -1, -1)
    return [f] * (T - 1), [b] * (T - 1)


def random_flows(T, h, w, seed, scale=1.5, n=1, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    fwd = [(torch.rand(n, 2, h, w, generator=g, dtype=dtype) - 0.5) * 2 * scale for _ in range(T - 1)]
    bwd = [(torch.rand(n, 2, h, w, generator=g, dtype=dtype) - 0.5) * 2 * scale for _ in range(T - 1)]
    return fwd, bwd


def gradient_check(model, loss_fn, count, seed, eps=1e-6, floor=1e-6):
    """Compare autograd against central differences on ``count`` sampled scalar parameters.

    Returns a list of ``(name, index, analytic, numeric, rel_err)``.
    """
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    named = [(n, p) for n, p in model.named_parameters()]
    sizes = np.array([p.numel() for _, p in named])
    rng = np.random.default_rng(seed)
    # every tensor at least once, the rest spread by size
    picks = [(i, int(rng.integers(sizes[i]))) for i in range(len(named))]
    while len(picks) < count:
        i = int(rng.choice(len(named), p=sizes / sizes.sum()))
        picks.append((i, int(rng.integers(sizes[i]))))

    rows = []
    with torch.no_grad():
        for i, j in picks:
            name, p = named[i]
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[j])
            orig = float(flat[j])
            flat[j] = orig + eps
            up = float(loss_fn())
            flat[j] = orig - eps
            down = float(loss_fn())
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            rows.append((name, j, analytic, numeric, rel))
    return rows
