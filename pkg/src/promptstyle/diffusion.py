"""Noise schedule, forward noising, the toy denoiser and the DDIM reverse loop.

Timesteps are 0-based over ``[0, T)``. Grids are ``(C, H, W)`` tensors or
batches ``(B, C, H, W)``; every function here accepts either.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ResidualProvider = Callable[[torch.Tensor, int], Optional[list]]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    def coefficients(self, t, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) as tensors."""
        ab = torch.tensor(self.alpha_bar[np.asarray(t)], dtype=torch.float64)
        return ab.sqrt().to(dtype), (1.0 - ab).sqrt().to(dtype)


def build_noise_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear") -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def toy_schedule(T: int = 64) -> NoiseSchedule:
    # standard 1e-4..0.02 over 1000 steps, rescaled to a short chain
    scale = 1000.0 / T
    return build_noise_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal ``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps``.

    ``t`` is a scalar step or, for batched input, one step per batch element.
    """
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    t_arr = np.asarray(t)
    if t_arr.size == 0 or t_arr.min() < 0 or t_arr.max() >= sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T})")
    a, b = sched.coefficients(t_arr, dtype=z0.dtype)
    if t_arr.ndim == 1:
        shape = (-1,) + (1,) * (z0.dim() - 1)
        a, b = a.view(shape), b.view(shape)
    return a * z0 + b * eps


# ---------------------------------------------------------------------------
# Denoiser models


class DenoiserModel(Protocol):
    """Anything callable as ``model(z_t, t, cond, residuals=None) -> eps_hat``."""

    conditioning_dim: int
    injection_points: Sequence["InjectionPoint"]

    def __call__(self, z_t, t, cond, residuals=None) -> torch.Tensor: ...

    def encode_image(self, image: torch.Tensor) -> torch.Tensor: ...

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class InjectionPoint:
    name: str
    channels: int
    downsample: int


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Block(nn.Module):
    def __init__(self, c_in, c_out, time_dim, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm = nn.GroupNorm(1, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(x) + self.temb(temb)[:, :, None, None]
        return h + self.conv2(F.silu(self.norm(h)))


class CrossAttention(nn.Module):
    def __init__(self, channels, cond_dim):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.cond_norm = nn.LayerNorm(cond_dim)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(cond_dim, channels, bias=False)
        self.v = nn.Linear(cond_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, cond):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        ctx = self.cond_norm(cond)
        k, v = self.k(ctx), self.v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class ToyEncoder(nn.Module):
    """Encoder half: input conv, two strided blocks, bottleneck cross-attention.

    Returns features ordered to match the decoder injection points
    (bottleneck first, full resolution last).
    """

    def __init__(self, in_channels, widths, cond_dim, time_dim):
        super().__init__()
        w0, w1, w2 = widths
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(in_channels, w0, 3, padding=1)
        self.block0 = Block(w0, w0, time_dim)
        self.down1 = Block(w0, w1, time_dim, stride=2)
        self.down2 = Block(w1, w2, time_dim, stride=2)
        self.attn = CrossAttention(w2, cond_dim)
        self.mid = Block(w2, w2, time_dim)

    def embed_time(self, t):
        return self.time_mlp(timestep_embedding(t, self.time_dim).to(self.conv_in.weight.dtype))

    def forward(self, x, temb, cond, hint=None):
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        h0 = self.block0(h, temb)
        h1 = self.down1(h0, temb)
        h2 = self.down2(h1, temb)
        m = self.mid(self.attn(h2, cond), temb)
        return [m, h1, h0]


class ToyDecoder(nn.Module):
    def __init__(self, out_channels, widths, time_dim):
        super().__init__()
        w0, w1, w2 = widths
        self.up1 = Block(w2, w1, time_dim)
        self.up2 = Block(w1, w0, time_dim)
        self.final = Block(w0, w0, time_dim)
        self.norm_out = nn.GroupNorm(1, w0)
        self.conv_out = nn.Conv2d(w0, out_channels, 3, padding=1)

    def forward(self, feats, temb, residuals=None):
        m, h1, h0 = feats
        r = residuals if residuals is not None else (None, None, None)
        x = m if r[0] is None else m + r[0]
        x = F.interpolate(self.up1(x, temb), scale_factor=2, mode="nearest") + h1
        if r[1] is not None:
            x = x + r[1]
        x = F.interpolate(self.up2(x, temb), scale_factor=2, mode="nearest") + h0
        if r[2] is not None:
            x = x + r[2]
        x = self.final(x, temb)
        return self.conv_out(F.silu(self.norm_out(x)))


class ToyDenoiser(nn.Module):
    """Small pixel-space conv encoder-decoder predicting the injected noise.

    Images in [0, 1] map to latents in [-1, 1]. Conditioning is a
    ``(tokens, conditioning_dim)`` matrix read by cross-attention at the
    bottleneck; control residuals are added at the decoder block inputs.
    """

    def __init__(self, in_channels=3, widths=(16, 32, 48), conditioning_dim=32, time_dim=32):
        super().__init__()
        self.config = dict(in_channels=in_channels, widths=list(widths),
                           conditioning_dim=conditioning_dim, time_dim=time_dim)
        self.conditioning_dim = conditioning_dim
        self.encoder = ToyEncoder(in_channels, widths, conditioning_dim, time_dim)
        self.decoder = ToyDecoder(in_channels, widths, time_dim)
        w0, w1, w2 = widths
        self.injection_points = (
            InjectionPoint("mid", w2, 4),
            InjectionPoint("up1", w1, 2),
            InjectionPoint("up2", w0, 1),
        )

    def forward(self, z_t, t, cond, residuals=None):
        z_t, squeeze = _batched(z_t)
        t = _timestep_tensor(t, z_t.shape[0])
        cond = _batched_cond(cond, z_t.shape[0])
        if cond.shape[-1] != self.conditioning_dim:
            raise ValueError(f"conditioning width {cond.shape[-1]} != model conditioning_dim {self.conditioning_dim}")
        if residuals is not None:
            residuals = [None if r is None else _batched(r)[0] for r in residuals]
        temb = self.encoder.embed_time(t)
        out = self.decoder(self.encoder(z_t, temb, cond), temb, residuals)
        return out[0] if squeeze else out

    @staticmethod
    def encode_image(image):
        return image * 2.0 - 1.0

    @staticmethod
    def decode_latent(z):
        return ((z + 1.0) * 0.5).clamp(0.0, 1.0)


class FullScaleBackbone(nn.Module):
    """Adapter for an external latent-diffusion denoiser plus autoencoder.

    ``unet(z_t, t, cond, residuals)`` must return the noise prediction;
    ``autoencoder`` needs ``encode(image) -> latent`` and ``decode(latent) -> image``.
    ``encoder`` should expose the denoiser's encoder half so a control
    adapter can copy it.
    """

    def __init__(self, unet: nn.Module, autoencoder, conditioning_dim: int,
                 injection_points: Sequence[InjectionPoint], latent_scale: float = 0.18215):
        super().__init__()
        self.unet = unet
        self.autoencoder = autoencoder
        self.conditioning_dim = conditioning_dim
        self.injection_points = tuple(injection_points)
        self.latent_scale = latent_scale
        self.encoder = getattr(unet, "encoder", None)

    def forward(self, z_t, t, cond, residuals=None):
        z_t, squeeze = _batched(z_t)
        cond = _batched_cond(cond, z_t.shape[0])
        if cond.shape[-1] != self.conditioning_dim:
            raise ValueError(f"conditioning width {cond.shape[-1]} != model conditioning_dim {self.conditioning_dim}")
        out = self.unet(z_t, _timestep_tensor(t, z_t.shape[0]), cond, residuals)
        return out[0] if squeeze else out

    def encode_image(self, image):
        image, squeeze = _batched(image)
        z = self.autoencoder.encode(image * 2.0 - 1.0) * self.latent_scale
        return z[0] if squeeze else z

    def decode_latent(self, z):
        z, squeeze = _batched(z)
        x = ((self.autoencoder.decode(z / self.latent_scale) + 1.0) * 0.5).clamp(0.0, 1.0)
        return x[0] if squeeze else x


def _batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(x.shape)}")


def _batched_cond(cond: torch.Tensor, batch: int) -> torch.Tensor:
    if cond.dim() == 2:
        return cond.unsqueeze(0).expand(batch, -1, -1)
    if cond.dim() == 3 and cond.shape[0] in (1, batch):
        return cond.expand(batch, -1, -1)
    raise ValueError(f"conditioning shape {tuple(cond.shape)} incompatible with batch {batch}")


def _timestep_tensor(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(batch)
    return t


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def is_frozen(model: nn.Module) -> bool:
    return not any(p.requires_grad for p in model.parameters())


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)


# ---------------------------------------------------------------------------
# Loss and sampling


def ldm_denoising_loss(model, z0, cond, t, eps, sched: NoiseSchedule, residuals=None) -> torch.Tensor:
    """Mean squared error between ``eps`` and the model's noise prediction at ``z_t``."""
    if eps.shape != z0.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    if cond.shape[-1] != model.conditioning_dim:
        raise ValueError(f"conditioning width {cond.shape[-1]} != model conditioning_dim {model.conditioning_dim}")
    z_t = forward_diffuse(z0, t, eps, sched)
    if callable(residuals):
        residuals = residuals(z_t, t)
    pred = model(z_t, t, cond, residuals)
    return ((eps - pred) ** 2).mean()


@torch.no_grad()
def denoise_sample(model, start: torch.Tensor, start_step: int, cond: torch.Tensor,
                   sched: NoiseSchedule, residual_provider: Optional[ResidualProvider] = None,
                   rng_seed: int = 0) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) reverse loop from ``start_step`` down to step 0.

    ``rng_seed`` is accepted for interface stability; the eta = 0 update draws
    no noise so the result never depends on it.
    """
    start_step = int(start_step)
    if not 0 <= start_step < sched.T:
        raise ValueError(f"start_step={start_step} outside [0, {sched.T})")
    ab = sched.alpha_bar
    x = start.clone()
    for t in range(start_step, 0, -1):
        residuals = residual_provider(x, t) if residual_provider is not None else None
        eps = model(x, t, cond, residuals).to(x.dtype)
        a_t, a_prev = float(ab[t]), float(ab[t - 1])
        x0_hat = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        x = math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps
    return x
