"""Stylisation: noise the content to a chosen depth, then denoise under sampled
style prompts with content-feature control residuals."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch

from .bank import MAX_GAMMA, PromptBank, bank_stats, omega_stream, sample_prompt
from .control import ContentEncoder, ControlAdapter, encode_content, residual_provider
from .diffusion import NoiseSchedule, denoise_sample, forward_diffuse


class UntrainedBankError(ValueError):
    pass


@dataclass
class StylizeRequest:
    content_image: torch.Tensor
    gamma: float = 1.0
    strength: float = 0.75
    seed: int = 0
    num_samples: int = 1
    adapter_conditioning: str = "sample"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= MAX_GAMMA:
            raise ValueError(f"gamma={self.gamma} outside [0, {MAX_GAMMA:g}]: the scale factor should be no more than 5")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength={self.strength} outside [0, 1]")
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.adapter_conditioning not in ("sample", "null"):
            raise ValueError(f"adapter_conditioning must be 'sample' or 'null', got {self.adapter_conditioning!r}")
        if self.content_image.dim() != 3:
            raise ValueError(f"content_image must be (C, H, W), got {tuple(self.content_image.shape)}")

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("content_image")
        d["content_shape"] = list(self.content_image.shape)
        return d


@dataclass
class StylizeResult:
    images: list
    omegas_used: list
    config_echo: dict = field(default_factory=dict)


def start_step(strength: float, sched: NoiseSchedule) -> int:
    return int(round(strength * (sched.T - 1)))


def _check_bank(bank: PromptBank, stats):
    if not (stats.mu.any() or stats.sigma.any()):
        raise UntrainedBankError("prompt bank is untrained (mean and spread are all zero); train it before stylising")


def _content_noise(seed: int, shape, dtype) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=g, dtype=dtype)


@torch.no_grad()
def stylize(req: StylizeRequest, bank: PromptBank, adapter: Optional[ControlAdapter], model,
            enc: ContentEncoder, sched: NoiseSchedule) -> StylizeResult:
    """Render ``req.num_samples`` stylisations of one content image.

    All samples share one content-noising draw; only omega varies between
    them. Samples are denoised one at a time so each output depends on
    (content, seed, index) alone. ``adapter=None`` disables content control.
    """
    prompts = bank.prompts.detach()
    stats = bank_stats(prompts)
    _check_bank(bank, stats)
    if prompts.shape[-1] != model.conditioning_dim:
        raise ValueError(f"bank embed_dim {prompts.shape[-1]} != model conditioning_dim {model.conditioning_dim}")
    dtype = prompts.dtype
    content = req.content_image.to(dtype)
    s = start_step(req.strength, sched)
    echo = req.echo() | {"start_step": s, "T": sched.T, "adapter": adapter is not None}
    omega_seeds = [[int(req.seed), i] for i in range(req.num_samples)]
    if s == 0:
        out = content.clamp(0.0, 1.0)
        return StylizeResult([out.clone() for _ in range(req.num_samples)], omega_seeds, echo)

    fc = encode_content(enc, content) if adapter is not None else None
    z0 = model.encode_image(content)
    z_s = forward_diffuse(z0, s, _content_noise(req.seed, z0.shape, dtype), sched)
    images = []
    for seed_pair in omega_seeds:
        omega = omega_stream(*seed_pair, bank.prompt_shape, dtype)
        cond = sample_prompt(stats, omega, req.gamma)
        ctrl_cond = cond if req.adapter_conditioning == "sample" else torch.zeros_like(cond)
        provider = residual_provider(adapter, fc, ctrl_cond)
        z = denoise_sample(model, z_s, s, cond, sched, provider, req.seed)
        images.append(model.decode_latent(z))
    return StylizeResult(images, omega_seeds, echo)


def diversity_sweep(content: torch.Tensor, gammas: Sequence[float], n_per_gamma: int, bank: PromptBank,
                    adapter: Optional[ControlAdapter], model, enc: ContentEncoder, sched: NoiseSchedule,
                    strength: float = 0.75, seed: int = 0) -> dict:
    """Samples per gamma with the content noising and omega draws held fixed."""
    for g in gammas:
        if not 0.0 <= g <= MAX_GAMMA:
            raise ValueError(f"gamma={g} outside [0, {MAX_GAMMA:g}]: the scale factor should be no more than 5")
    out = {}
    for g in gammas:
        req = StylizeRequest(content, gamma=float(g), strength=strength, seed=seed, num_samples=n_per_gamma)
        out[g] = stylize(req, bank, adapter, model, enc, sched).images
    return out
