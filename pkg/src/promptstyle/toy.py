"""Synthetic texture styles, synthetic content photos and a desk-scale backbone.

The backbone stands in for a large pretrained text-to-image model: it is
pretrained on several texture families, each tied to a fixed random
"caption" matrix, plus content photos under the null caption. Afterwards
it is frozen and only prompt banks and control adapters are trained.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, ToyDenoiser, forward_diffuse, freeze, toy_schedule

log = logging.getLogger(__name__)

STYLES = ("ember", "glacier", "moss", "dusk")


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    return x, y


def _mix(t, c0, c1):
    t = np.clip(t, 0.0, 1.0)[..., None]
    return (1 - t) * np.asarray(c0) + t * np.asarray(c1)


def _ember(rng, size):
    x, y = _grid(size)
    theta = math.pi / 4 + rng.uniform(-0.35, 0.35)
    freq = rng.uniform(3.0, 5.0)
    u = x * math.cos(theta) + y * math.sin(theta)
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * u + rng.uniform(0, 2 * math.pi))
    lo = np.array([0.55, 0.05, 0.02]) + rng.uniform(-0.05, 0.05, 3)
    hi = np.array([1.0, 0.75, 0.15]) + rng.uniform(-0.05, 0.05, 3)
    return _mix(wave, lo, hi)


def _glacier(rng, size):
    x, y = _grid(size)
    field_ = np.zeros_like(x)
    for _ in range(3):
        kx, ky = rng.uniform(-1.5, 1.5, 2)
        field_ += np.sin(2 * math.pi * (kx * x + ky * y) + rng.uniform(0, 2 * math.pi))
    field_ = 0.5 + field_ / 6.0
    return _mix(field_, [0.05, 0.15, 0.45], [0.55, 0.85, 0.95])


def _moss(rng, size):
    x, y = _grid(size)
    period = rng.uniform(0.18, 0.26)
    ox, oy = rng.uniform(0, period, 2)
    dx = ((x - ox) % period) / period - 0.5
    dy = ((y - oy) % period) / period - 0.5
    dots = (np.sqrt(dx ** 2 + dy ** 2) < rng.uniform(0.22, 0.32)).astype(np.float64)
    return _mix(dots, [0.08, 0.18, 0.05], [0.45, 0.85, 0.3])


def _dusk(rng, size):
    x, y = _grid(size)
    cell = rng.uniform(0.2, 0.34)
    ox, oy = rng.uniform(0, cell, 2)
    check = ((np.floor((x - ox) / cell) + np.floor((y - oy) / cell)) % 2).astype(np.float64)
    return _mix(check, [0.35, 0.1, 0.45], [0.95, 0.85, 0.4])


_STYLE_FNS = {"ember": _ember, "glacier": _glacier, "moss": _moss, "dusk": _dusk}


def texture_images(style: str, n: int, size: int = 32, seed: int = 0) -> torch.Tensor:
    """``n`` images of one synthetic texture family as an ``(n, 3, size, size)`` tensor."""
    try:
        fn = _STYLE_FNS[style]
    except KeyError:
        raise ValueError(f"unknown synthetic style {style!r}; choose from {STYLES}") from None
    rng = np.random.default_rng([seed, STYLES.index(style)])
    imgs = np.stack([fn(rng, size) for _ in range(n)]).transpose(0, 3, 1, 2)
    imgs = np.clip(imgs + rng.normal(0, 0.02, imgs.shape), 0, 1)
    return torch.from_numpy(imgs.astype(np.float32))


def content_images(n: int, size: int = 32, seed: int = 0) -> torch.Tensor:
    """Smooth 'photographs': a two-colour gradient with one to three flat shapes."""
    rng = np.random.default_rng([seed, 1009])
    x, y = _grid(size)
    out = []
    for _ in range(n):
        angle = rng.uniform(0, 2 * math.pi)
        ramp = 0.5 + 0.5 * ((x - 0.5) * math.cos(angle) + (y - 0.5) * math.sin(angle)) * 1.4
        img = _mix(ramp, rng.uniform(0, 1, 3), rng.uniform(0, 1, 3))
        for _ in range(rng.integers(1, 4)):
            cx, cy = rng.uniform(0.15, 0.85, 2)
            rx, ry = rng.uniform(0.1, 0.3, 2)
            if rng.random() < 0.5:
                mask = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 < 1
            else:
                mask = (np.abs(x - cx) < rx) & (np.abs(y - cy) < ry)
            img[mask] = rng.uniform(0, 1, 3)
        out.append(img)
    imgs = np.stack(out).transpose(0, 3, 1, 2)
    return torch.from_numpy(imgs.astype(np.float32))


def caption_matrix(name: str, tokens: int, dim: int) -> torch.Tensor:
    """Fixed pseudo-caption embedding for a named concept."""
    seed = int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") & 0x7FFF_FFFF
    g = torch.Generator().manual_seed(seed)
    return torch.randn(tokens, dim, generator=g)


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    tokens: int = 8


@dataclass
class ToyBackbone:
    model: ToyDenoiser
    sched: NoiseSchedule
    losses: list = field(default_factory=list)


def pretrain_backbone(datasets: dict, model: ToyDenoiser | None = None, sched: NoiseSchedule | None = None,
                      cfg: PretrainConfig | None = None, null_key: str | None = "content",
                      log_every: int = 0) -> ToyBackbone:
    """Train a denoiser on labelled image sets and freeze it.

    ``datasets`` maps a concept name to an image tensor; images of
    ``null_key`` are trained under the all-zero (null) caption.
    """
    cfg = cfg or PretrainConfig()
    torch.manual_seed(cfg.seed)
    model = model or ToyDenoiser()
    sched = sched or toy_schedule()
    names = list(datasets)
    images = torch.cat([datasets[k] for k in names])
    conds = torch.stack([
        torch.zeros(cfg.tokens, model.conditioning_dim) if k == null_key
        else caption_matrix(k, cfg.tokens, model.conditioning_dim)
        for k in names
    ])
    labels = torch.cat([torch.full((len(datasets[k]),), i) for i, k in enumerate(names)])
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sch = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    model.train()
    losses = []
    for step in range(cfg.steps):
        idx = torch.randint(0, len(images), (cfg.batch_size,), generator=g)
        z0 = model.encode_image(images[idx])
        t = torch.randint(0, sched.T, (cfg.batch_size,), generator=g)
        eps = torch.randn(z0.shape, generator=g)
        pred = model(forward_diffuse(z0, t.numpy(), eps, sched), t, conds[labels[idx]])
        loss = ((pred - eps) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sch.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss=%.4f", step + 1, np.mean(losses[-log_every:]))
    freeze(model)
    return ToyBackbone(model=model, sched=sched, losses=losses)
