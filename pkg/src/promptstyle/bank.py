"""Prompt bank: K learnable prompt matrices sampled through their elementwise Gaussian.

At inference a conditioning prompt is drawn as ``mu + gamma * omega * sigma``
with ``omega ~ N(0, 1)``; training uses ``gamma = 1`` and adds an
orthogonality penalty on the encoded prompts so the bank does not collapse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .diffusion import NoiseSchedule, denoise_sample, is_frozen, ldm_denoising_loss

log = logging.getLogger(__name__)

MIN_PROMPTS = 4
MAX_GAMMA = 5.0


class PromptBank(nn.Module):
    """K prompt matrices of shape ``(tokens, embed_dim)`` stored as one parameter."""

    def __init__(self, prompts: torch.Tensor):
        super().__init__()
        if prompts.dim() != 3:
            raise ValueError(f"prompts must be (K, tokens, embed_dim), got {tuple(prompts.shape)}")
        if prompts.shape[0] < MIN_PROMPTS:
            raise ValueError(f"prompt bank needs K >= {MIN_PROMPTS} prompts (k should satisfy k >= 4), got K={prompts.shape[0]}")
        if not torch.isfinite(prompts).all():
            raise ValueError("prompt bank entries must be finite")
        self.prompts = nn.Parameter(prompts.detach().clone())

    @property
    def K(self) -> int:
        return self.prompts.shape[0]

    @property
    def tokens(self) -> int:
        return self.prompts.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.prompts.shape[2]

    @property
    def prompt_shape(self) -> tuple[int, int]:
        return (self.tokens, self.embed_dim)


@dataclass(frozen=True)
class BankStats:
    mu: torch.Tensor
    sigma: torch.Tensor

    @property
    def shape(self):
        return tuple(self.mu.shape)


class PromptEncoder(Protocol):
    def __call__(self, prompts: torch.Tensor) -> torch.Tensor:
        """Map ``(..., tokens, dim)`` prompts to unit-norm ``(..., D)`` embeddings."""


class MeanPoolEncoder:
    """Mean over tokens followed by L2 normalisation."""

    def __call__(self, prompts: torch.Tensor) -> torch.Tensor:
        pooled = prompts.mean(dim=-2)
        return pooled / pooled.norm(dim=-1, keepdim=True)


@dataclass
class DspaTrainConfig:
    lambda_ortho: float = 5e-3
    learning_rate: float = 1e-4
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    ortho_ordered_pairs: bool = False

    def __post_init__(self):
        if self.lambda_ortho < 0:
            raise ValueError(f"lambda_ortho must be >= 0, got {self.lambda_ortho}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class DspaLosses:
    total: float
    dspa: float
    ortho: float


@dataclass
class DspaHistory:
    losses: list = field(default_factory=list)
    steps: int = 0


def init_prompt_bank(K: int = 32, tokens: int = 8, embed_dim: int = 32, seed: int = 0,
                     dtype=torch.float32) -> PromptBank:
    if K < MIN_PROMPTS:
        raise ValueError(f"K={K} violates k >= {MIN_PROMPTS}: a prompt bank needs at least {MIN_PROMPTS} prompts")
    if tokens < 1 or embed_dim < 1:
        raise ValueError("tokens and embed_dim must be >= 1")
    g = torch.Generator().manual_seed(int(seed))
    return PromptBank(torch.randn(K, tokens, embed_dim, generator=g, dtype=dtype) * 0.02)


def _population_std(prompts: torch.Tensor) -> torch.Tensor:
    var = prompts.var(dim=0, unbiased=False)
    # sqrt'(0) is infinite; keep the gradient finite for exactly collapsed entries
    safe = torch.where(var > 0, var, torch.ones_like(var))
    return torch.where(var > 0, safe.sqrt(), torch.zeros_like(var))


def bank_stats(bank: Union[PromptBank, torch.Tensor]) -> BankStats:
    prompts = bank.prompts if isinstance(bank, PromptBank) else bank
    return BankStats(mu=prompts.mean(dim=0), sigma=_population_std(prompts))


def sample_prompt(stats: BankStats, omega: torch.Tensor, gamma: float) -> torch.Tensor:
    """``mu + gamma * (omega * sigma)``; ``omega`` may carry leading batch dims."""
    if not 0.0 <= gamma <= MAX_GAMMA:
        raise ValueError(f"gamma={gamma} outside [0, {MAX_GAMMA:g}]: the scale factor should be no more than 5")
    if tuple(omega.shape[-2:]) != stats.shape:
        raise ValueError(f"omega shape {tuple(omega.shape)} does not match prompt shape {stats.shape}")
    if gamma == 0:
        return stats.mu.expand(omega.shape).clone()
    return stats.mu + gamma * (omega * stats.sigma)


def ortho_loss(bank: Union[PromptBank, torch.Tensor], encoder: Optional[PromptEncoder] = None,
               ordered_pairs: bool = False) -> torch.Tensor:
    """Absolute cosine similarity between encoded prompts, summed over pairs i < j
    and divided by K(K-1). ``ordered_pairs=True`` sums over all i != j instead.
    """
    prompts = bank.prompts if isinstance(bank, PromptBank) else bank
    K = prompts.shape[0]
    if K < 2:
        raise ValueError(f"orthogonality loss needs K >= 2 prompts, got {K}")
    enc = (encoder or MeanPoolEncoder())(prompts)
    enc = enc / enc.norm(dim=-1, keepdim=True)
    cos = (enc @ enc.T).abs()
    i, j = torch.triu_indices(K, K, offset=1)
    total = cos[i, j].sum()
    if ordered_pairs:
        total = 2.0 * total
    return total / (K * (K - 1))


def mean_pairwise_abs_cos(bank: Union[PromptBank, torch.Tensor], encoder: Optional[PromptEncoder] = None) -> float:
    prompts = bank.prompts if isinstance(bank, PromptBank) else bank
    with torch.no_grad():
        # unordered-pair sum over K(K-1) is half the mean over pairs
        return 2.0 * ortho_loss(prompts, encoder).item()


def dspa_objective(prompts: torch.Tensor, model, z0: torch.Tensor, t, eps: torch.Tensor,
                   omega: torch.Tensor, sched: NoiseSchedule, lambda_ortho: float,
                   encoder: Optional[PromptEncoder] = None, ordered_pairs: bool = False):
    """Combined loss for fixed draws of (t, eps, omega); returns (total, dspa, ortho)."""
    stats = bank_stats(prompts)
    cond = stats.mu + omega * stats.sigma
    l_dspa = ldm_denoising_loss(model, z0, cond, t, eps, sched)
    l_ortho = ortho_loss(prompts, encoder, ordered_pairs)
    return l_dspa + lambda_ortho * l_ortho, l_dspa, l_ortho


def make_optimizer(bank: PromptBank, cfg: DspaTrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam([bank.prompts], lr=cfg.learning_rate, weight_decay=0.0)


def dspa_training_step(bank: PromptBank, model, batch: torch.Tensor, cfg: DspaTrainConfig,
                       sched: NoiseSchedule, encoder: Optional[PromptEncoder] = None,
                       rng: Optional[torch.Generator] = None,
                       optimizer: Optional[torch.optim.Optimizer] = None):
    """One gradient step on the bank only. ``batch`` holds style images in [0, 1].

    Draws one timestep, one noise grid and one omega matrix per batch element.
    Pass the same ``optimizer`` across calls to keep Adam moments.
    """
    if not is_frozen(model):
        raise ValueError("backbone must be frozen before prompt-bank training (see diffusion.freeze)")
    if batch.dim() == 3:
        batch = batch.unsqueeze(0)
    if batch.shape[0] == 0:
        raise ValueError("empty style batch")
    rng = rng if rng is not None else torch.Generator().manual_seed(cfg.seed)
    optimizer = optimizer if optimizer is not None else make_optimizer(bank, cfg)
    dtype = bank.prompts.dtype

    b = batch.shape[0]
    z0 = model.encode_image(batch.to(dtype))
    t = torch.randint(0, sched.T, (b,), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=dtype)
    omega = torch.randn((b,) + bank.prompt_shape, generator=rng, dtype=dtype)

    optimizer.zero_grad(set_to_none=True)
    total, l_dspa, l_ortho = dspa_objective(bank.prompts, model, z0, t, eps, omega, sched,
                                            cfg.lambda_ortho, encoder, cfg.ortho_ordered_pairs)
    total.backward()
    optimizer.step()
    return bank, DspaLosses(total=total.item(), dspa=l_dspa.item(), ortho=l_ortho.item())


def train_dspa(bank: PromptBank, model, images: torch.Tensor, cfg: DspaTrainConfig,
               sched: NoiseSchedule, encoder: Optional[PromptEncoder] = None,
               log_every: int = 0) -> DspaHistory:
    """Stage-one loop: uniform minibatches of ``images`` for ``cfg.steps`` steps."""
    if len(images) == 0:
        raise ValueError("empty style image set")
    rng = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(bank, cfg)
    history = DspaHistory()
    n = len(images)
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=rng)
        _, losses = dspa_training_step(bank, model, images[idx], cfg, sched, encoder, rng, opt)
        history.losses.append(losses)
        if log_every and (step + 1) % log_every == 0:
            log.info("dspa step %d total=%.5f dspa=%.5f ortho=%.5f", step + 1, losses.total, losses.dspa, losses.ortho)
    history.steps = cfg.steps
    return history


def omega_stream(seed: int, index: int, shape, dtype=torch.float32) -> torch.Tensor:
    """Standard-normal omega derived from (seed, index) alone."""
    sub = np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0]
    g = torch.Generator().manual_seed(int(sub) & 0x7FFF_FFFF_FFFF_FFFF)
    return torch.randn(tuple(shape), generator=g, dtype=dtype)


@torch.no_grad()
def generate_style_samples(bank: PromptBank, model, sched: NoiseSchedule, n: int, gamma: float = 1.0,
                           seed: int = 0, image_shape: Sequence[int] = (3, 32, 32),
                           chunk: int = 64, decode: bool = True) -> list:
    """Unconditional-content samples: pure noise at step T-1 denoised under sampled prompts."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n == 0:
        return []
    stats = bank_stats(bank.prompts.detach())
    dtype = bank.prompts.dtype
    omegas = torch.stack([omega_stream(seed, i, bank.prompt_shape, dtype) for i in range(n)])
    conds = sample_prompt(stats, omegas, gamma)
    g = torch.Generator().manual_seed(int(seed))
    noise = torch.randn((n,) + tuple(image_shape), generator=g, dtype=dtype)
    out = []
    for lo in range(0, n, chunk):
        z = denoise_sample(model, noise[lo:lo + chunk], sched.T - 1, conds[lo:lo + chunk], sched, None, seed)
        z = model.decode_latent(z) if decode else z
        out.extend(z.unbind(0))
    return out
