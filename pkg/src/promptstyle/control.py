"""Content-feature control adapter.

A frozen content encoder turns the content photo into a 4-channel grid at
1/8 resolution. A side network, initialised as an exact copy of the
backbone's encoder half, reads the noisy latent plus a zero-initialised
projection of those content features and emits one residual per backbone
injection point through zero-initialised 1x1 connectors. At
initialisation every residual is exactly zero.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, _batched, _batched_cond, is_frozen, ldm_denoising_loss

log = logging.getLogger(__name__)

CONTENT_CHANNELS = 4
CONTENT_DOWNSAMPLE = 8


class ContentEncoder:
    """8x average pooling followed by a fixed seeded 3 -> 4 channel linear map."""

    def __init__(self, seed: int = 0, in_channels: int = 3, dtype=torch.float32):
        g = torch.Generator().manual_seed(int(seed))
        self.seed = int(seed)
        self.weight = (torch.randn(CONTENT_CHANNELS, in_channels, generator=g, dtype=torch.float64)
                       / np.sqrt(in_channels)).to(dtype)
        self.bias = torch.zeros(CONTENT_CHANNELS, dtype=dtype)

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return encode_content(self, image)


def encode_content(enc: ContentEncoder, image: torch.Tensor) -> torch.Tensor:
    x, squeeze = _batched(image)
    h, w = x.shape[-2:]
    if h % CONTENT_DOWNSAMPLE or w % CONTENT_DOWNSAMPLE:
        raise ValueError(f"image size {h}x{w} is not divisible by {CONTENT_DOWNSAMPLE}")
    with torch.no_grad():
        pooled = F.avg_pool2d(x * 2.0 - 1.0, CONTENT_DOWNSAMPLE)
        weight = enc.weight.to(pooled.dtype)
        out = torch.einsum("oc,bchw->bohw", weight, pooled) + enc.bias.to(pooled.dtype)[:, None, None]
    return out[0] if squeeze else out


def _zero_conv(c_in, c_out):
    conv = nn.Conv2d(c_in, c_out, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlAdapter(nn.Module):
    def __init__(self, model):
        super().__init__()
        if not getattr(model, "injection_points", None):
            raise ValueError("backbone defines no injection points")
        if getattr(model, "encoder", None) is None:
            raise ValueError("backbone exposes no encoder half to copy")
        self.encoder_copy = copy.deepcopy(model.encoder)
        for p in self.encoder_copy.parameters():
            p.requires_grad_(True)
        self.encoder_copy.train()
        first = self.encoder_copy.conv_in.out_channels
        self.hint_projection = _zero_conv(CONTENT_CHANNELS, first)
        self.connectors = nn.ModuleList(_zero_conv(p.channels, p.channels) for p in model.injection_points)
        self.injection_points = tuple(model.injection_points)
        self.final_loss: Optional[float] = None
        self.loss_history: list = []

    def forward(self, content_features, z_t, t, cond):
        z_t, squeeze = _batched(z_t)
        b = z_t.shape[0]
        fc, _ = _batched(content_features)
        if fc.shape[0] not in (1, b) or fc.shape[1] != CONTENT_CHANNELS:
            raise ValueError(f"content features {tuple(fc.shape)} incompatible with latent batch {tuple(z_t.shape)}")
        scale = z_t.shape[-1] // fc.shape[-1]
        if scale * fc.shape[-1] != z_t.shape[-1] or scale * fc.shape[-2] != z_t.shape[-2]:
            raise ValueError(f"content features {tuple(fc.shape[-2:])} do not tile latent {tuple(z_t.shape[-2:])}")
        fc = fc.expand(b, -1, -1, -1)
        if scale > 1:
            fc = F.interpolate(fc, scale_factor=scale, mode="nearest")
        t = torch.as_tensor(t, dtype=torch.long)
        t = t.expand(b) if t.dim() == 0 else t
        cond = _batched_cond(cond, b)
        temb = self.encoder_copy.embed_time(t)
        feats = self.encoder_copy(z_t, temb, cond, hint=self.hint_projection(fc))
        res = [conn(f) for conn, f in zip(self.connectors, feats)]
        return [r[0] for r in res] if squeeze else res


def init_control_adapter(model, seed: int = 0) -> ControlAdapter:
    """Copy the backbone encoder and zero every connector.

    ``seed`` is kept for interface symmetry; initialisation is fully
    determined by the backbone and needs no randomness.
    """
    adapter = ControlAdapter(model)
    adapter.to(next(model.parameters()).dtype)
    return adapter


def control_residuals(adapter: ControlAdapter, content_features, z_t, t, cond) -> list:
    """One residual per backbone injection point, ordered as ``adapter.injection_points``."""
    return adapter(content_features, z_t, t, cond)


def residual_provider(adapter: Optional[ControlAdapter], content_features, cond):
    """Per-step residual source for ``denoise_sample``; ``None`` disables control."""
    if adapter is None:
        return None

    def provide(z_t, t):
        return adapter(content_features, z_t, t, cond)

    return provide


# ---------------------------------------------------------------------------
# Captions


class NullCaptionProvider:
    """The same all-zero conditioning matrix for every image."""

    def __init__(self, tokens: int, dim: int, dtype=torch.float32):
        self.matrix = torch.zeros(tokens, dim, dtype=dtype)

    def __call__(self, identifier: str) -> torch.Tensor:
        return self.matrix


class FileCaptionProvider:
    """Per-image caption embeddings read from a two-column TSV file.

    Each row is ``identifier<TAB>v1 v2 ... vN`` with ``N = tokens * dim``
    entries in row-major order.
    """

    def __init__(self, table: dict, tokens: int, dim: int):
        self.tokens, self.dim = tokens, dim
        self.table = table

    @classmethod
    def from_file(cls, path, tokens: int, dim: int, dtype=torch.float32) -> "FileCaptionProvider":
        table = {}
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(row)}")
                values = np.array(row[1].split(), dtype=np.float64)
                if values.size != tokens * dim:
                    raise ValueError(f"{path}:{lineno}: expected {tokens * dim} entries, got {values.size}")
                table[row[0]] = torch.from_numpy(values.reshape(tokens, dim)).to(dtype)
        return cls(table, tokens, dim)

    def __call__(self, identifier: str) -> torch.Tensor:
        try:
            return self.table[identifier]
        except KeyError:
            raise KeyError(f"no caption embedding for image {identifier!r}") from None


def write_caption_file(path, captions: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for ident, mat in captions.items():
            flat = np.asarray(mat, dtype=np.float64).ravel()
            writer.writerow([ident, " ".join(repr(float(v)) for v in flat)])


# ---------------------------------------------------------------------------
# Training


@dataclass
class KcfpTrainConfig:
    learning_rate: float = 1e-4
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


def kcfp_objective(adapter: ControlAdapter, model, z0, content_features, t, eps, cond, sched: NoiseSchedule):
    """Noise-prediction MSE with control residuals at fixed draws of (t, eps)."""
    return ldm_denoising_loss(model, z0, cond, t, eps, sched,
                              residuals=lambda z_t, tt: adapter(content_features, z_t, tt, cond))


def train_kcfp(adapter: ControlAdapter, model, content_dataset: torch.Tensor, captions, enc: ContentEncoder,
               sched: NoiseSchedule, cfg: KcfpTrainConfig, ids: Optional[Sequence[str]] = None,
               log_every: int = 0) -> ControlAdapter:
    """Fit the adapter on content images; backbone and content encoder stay fixed."""
    if not is_frozen(model):
        raise ValueError("backbone must be frozen before adapter training (see diffusion.freeze)")
    n = len(content_dataset)
    if n == 0:
        raise ValueError("empty content dataset")
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    if len(ids) != n:
        raise ValueError("ids must align with content_dataset")
    dtype = next(adapter.parameters()).dtype
    images = content_dataset.to(dtype)
    feats = encode_content(enc, images)
    caps = torch.stack([captions(i).to(dtype) for i in ids])
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(adapter.parameters(), lr=cfg.learning_rate)
    adapter.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=g)
        z0 = model.encode_image(images[idx])
        t = torch.randint(0, sched.T, (cfg.batch_size,), generator=g)
        eps = torch.randn(z0.shape, generator=g, dtype=dtype)
        loss = kcfp_objective(adapter, model, z0, feats[idx], t, eps, caps[idx], sched)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        adapter.loss_history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("kcfp step %d loss=%.5f", step + 1, np.mean(adapter.loss_history[-log_every:]))
    if cfg.steps:
        adapter.final_loss = adapter.loss_history[-1]
    adapter.eval()
    return adapter
