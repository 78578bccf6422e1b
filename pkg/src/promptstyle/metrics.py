"""Fréchet distance over pluggable features, perceptual distance and diversity."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

COV_EPS = 1e-6


class NumericError(ArithmeticError):
    """Matrix square root or moment computation failed."""


class MomentFeatures:
    """Desk feature extractor for ``(3, H, W)`` images in [0, 1].

    Features (on the image rescaled to [-1, 1]): per-channel mean and
    variance, per-channel mean and variance on a 2x2 cell grid, and
    per-channel means on a 4x4 grid. Dimension 78 for RGB.
    """

    def __init__(self, levels: Sequence[int] = (2, 4)):
        self.levels = tuple(levels)

    def __call__(self, image) -> np.ndarray:
        x = torch.as_tensor(image, dtype=torch.float64)
        if x.dim() != 3:
            raise ValueError(f"expected a (C, H, W) image, got shape {tuple(x.shape)}")
        x = x * 2.0 - 1.0
        feats = [x.mean(dim=(1, 2)), x.var(dim=(1, 2), unbiased=False)]
        for i, cells in enumerate(self.levels):
            m = F.adaptive_avg_pool2d(x[None], cells)[0]
            feats.append(m.flatten())
            if i == 0:
                sq = F.adaptive_avg_pool2d((x * x)[None], cells)[0]
                feats.append((sq - m * m).clamp_min(0).flatten())
        return torch.cat(feats).numpy()

    def dim(self, channels: int = 3) -> int:
        return channels * (2 + 2 * self.levels[0] ** 2 + sum(c * c for c in self.levels[1:]))


FeatureExtractor = Callable[[object], np.ndarray]


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        cov = np.asarray(self.cov)
        if cov.ndim != 2 or cov.shape != (self.mean.shape[0],) * 2:
            raise ValueError(f"cov shape {cov.shape} does not match mean length {self.mean.shape[0]}")
        if not np.allclose(cov, cov.T, atol=1e-9, rtol=0, equal_nan=True):
            raise ValueError("covariance must be symmetric")


def fit_feature_gaussian(features, eps: float = COV_EPS) -> GaussianStats:
    feats = np.asarray([np.asarray(f, dtype=np.float64) for f in features])
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("need at least one feature vector")
    mean = feats.mean(axis=0)
    centred = feats - mean
    cov = centred.T @ centred / feats.shape[0]
    cov = 0.5 * (cov + cov.T) + eps * np.eye(feats.shape[1])
    return GaussianStats(mean=mean, cov=cov, n=feats.shape[0])


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    if w.min() < -1e-6 * max(1.0, abs(w).max()):
        raise NumericError(f"{what} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians.

    The trace of ``(Ca Cb)^(1/2)`` is taken as the trace of the symmetric
    ``(Ca^(1/2) Cb Ca^(1/2))^(1/2)``, which has the same eigenvalues.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    if not (np.isfinite(a.cov).all() and np.isfinite(b.cov).all()):
        raise NumericError("non-finite covariance entries")
    try:
        sa = _psd_sqrt(a.cov, "first covariance")
        m = sa @ b.cov @ sa
        w = np.linalg.eigvalsh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"matrix square root failed: {exc} (dim={a.mean.shape[0]}, n=({a.n},{b.n}))") from exc
    if w.min() < -1e-6 * max(1.0, abs(w).max()):
        raise NumericError(f"product covariance has eigenvalue {w.min():.3e}; ill-conditioned inputs")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mean - b.mean
    d2 = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    if d2 < 0:
        if d2 < -1e-6:
            raise NumericError(f"negative Fréchet distance {d2:.3e}")
        d2 = 0.0
    return d2


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def perceptual_distance(img_a, img_b, fx: Optional[FeatureExtractor] = None) -> float:
    """L2 distance between unit-normalised feature vectors."""
    if tuple(np.shape(img_a)) != tuple(np.shape(img_b)):
        raise ValueError(f"image shape mismatch: {tuple(np.shape(img_a))} vs {tuple(np.shape(img_b))}")
    fx = fx or MomentFeatures()
    fa, fb = _unit(np.asarray(fx(img_a), dtype=np.float64)), _unit(np.asarray(fx(img_b), dtype=np.float64))
    return float(np.linalg.norm(fa - fb))


def diversity_score(images: Sequence, fx: Optional[FeatureExtractor] = None) -> float:
    """Mean perceptual distance over all unordered pairs."""
    if len(images) < 2:
        raise ValueError(f"diversity needs at least 2 images, got {len(images)}")
    fx = fx or MomentFeatures()
    feats = [_unit(np.asarray(fx(im), dtype=np.float64)) for im in images]
    dists = [np.linalg.norm(a - b) for a, b in itertools.combinations(feats, 2)]
    return float(np.mean(dists))


@dataclass
class EvalReport:
    frechet: float
    diversity: Optional[float]
    content_preservation: Optional[float]
    n_generated: int
    n_reference: int
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if key == "config_echo":
                for ck, cv in sorted(value.items()):
                    lines.append(f"config.{ck}={cv}")
            else:
                lines.append(f"{key}={'omitted' if value is None else value}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate_style_run(generated: Sequence, reference_style: Sequence, contents: Optional[Sequence] = None,
                       fx: Optional[FeatureExtractor] = None, config: Optional[dict] = None) -> EvalReport:
    if len(generated) == 0 or len(reference_style) == 0:
        raise ValueError("generated and reference sets must be non-empty")
    if contents is not None and len(contents) != len(generated):
        raise ValueError(f"contents ({len(contents)}) must align 1:1 with generated ({len(generated)})")
    fx = fx or MomentFeatures()
    fd = frechet_distance(fit_feature_gaussian([fx(g) for g in generated]),
                          fit_feature_gaussian([fx(r) for r in reference_style]))
    div = diversity_score(generated, fx) if len(generated) >= 2 else None
    cp = None
    if contents is not None:
        cp = float(np.mean([perceptual_distance(c, g, fx) for c, g in zip(contents, generated)]))
    return EvalReport(frechet=fd, diversity=div, content_preservation=cp,
                      n_generated=len(generated), n_reference=len(reference_style),
                      config_echo=dict(config or {}))
