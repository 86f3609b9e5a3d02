"""Frechet distance between Gaussian fits of deep features.

Feature extractors are pluggable. ``tiny-random-conv`` is a fixed-seed random
convolutional network (768-d) that needs no downloads; ``inception-v3-pool3``
is used only when torchvision's pretrained weights are already cached.
FID values are comparable only within one extractor.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SQRT_EPS = 1e-6
DEFAULT_REPEATS = 32


class ExtractorUnavailable(RuntimeError):
    pass


class FIDError(ArithmeticError):
    pass


# --- feature extractors -----------------------------------------------------

class TinyRandomConv(nn.Module):
    """Two random ReLU conv stages, each average-pooled onto a 4x4 grid (768-d).

    Grid pooling keeps spatial layout in the features; global pooling alone
    collapses onto image brightness and makes FID estimates noisy.
    """

    name = "tiny-random-conv"
    grid = 4
    widths = (16, 32)
    dim = sum(widths) * grid * grid

    def __init__(self, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, self.widths[0], 3, padding=1)
        self.conv2 = nn.Conv2d(self.widths[0], self.widths[1], 3, stride=2, padding=1)
        for conv in (self.conv1, self.conv2):
            fan_in = conv.weight[0].numel()
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2 / fan_in))
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x):
        x = x.float()
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        h1 = F.relu(self.conv1(x - 0.5))
        h2 = F.relu(self.conv2(h1))
        return torch.cat([F.adaptive_avg_pool2d(h, self.grid).flatten(1) for h in (h1, h2)], 1)


class InceptionPool3(nn.Module):
    name = "inception-v3-pool3"
    dim = 2048

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3
        except ImportError as exc:
            raise ExtractorUnavailable("torchvision is not installed") from exc
        weights = Inception_V3_Weights.IMAGENET1K_V1
        cached = Path(torch.hub.get_dir()) / "checkpoints" / Path(weights.url).name
        if not cached.is_file():
            raise ExtractorUnavailable(f"pretrained Inception weights not cached at {cached}")
        net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        net.load_state_dict(torch.load(cached, map_location="cpu", weights_only=True))
        net.fc = nn.Identity()
        self.net = net.eval().requires_grad_(False)

    @torch.no_grad()
    def forward(self, x):
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        x = F.interpolate(x.float().clamp(0, 1), size=(299, 299), mode="bilinear",
                          align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return self.net((x - mean) / std)


EXTRACTORS = {TinyRandomConv.name: TinyRandomConv, InceptionPool3.name: InceptionPool3}


def get_extractor(name: str) -> nn.Module:
    if name not in EXTRACTORS:
        raise ExtractorUnavailable(f"unknown extractor {name!r}; available: {available_extractors()}")
    return EXTRACTORS[name]()


def available_extractors() -> list[str]:
    out = []
    for name, cls in EXTRACTORS.items():
        try:
            cls()
        except ExtractorUnavailable:
            continue
        out.append(name)
    return out


def extract(extractor, images: torch.Tensor, batch: int = 256) -> np.ndarray:
    feats = [extractor(images[i:i + batch]) for i in range(0, images.shape[0], batch)]
    return torch.cat(feats).double().numpy()


# --- statistics -------------------------------------------------------------

@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise FIDError(f"need at least 2 samples to estimate a covariance, got {self.n}")


class StatsAccumulator:
    """Streaming mean and co-moment; ``merge`` combines shards associatively."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.comoment = np.zeros((dim, dim))

    def update(self, feats: np.ndarray) -> StatsAccumulator:
        feats = np.asarray(feats, dtype=float)
        other = StatsAccumulator(feats.shape[1])
        other.n = feats.shape[0]
        if other.n:
            other.mean = feats.mean(0)
            d = feats - other.mean
            other.comoment = d.T @ d
        return self.merge(other)

    def merge(self, other: StatsAccumulator) -> StatsAccumulator:
        n = self.n + other.n
        if other.n == 0:
            return self
        delta = other.mean - self.mean
        self.comoment = (self.comoment + other.comoment
                         + np.outer(delta, delta) * self.n * other.n / n)
        self.mean = self.mean + delta * other.n / n
        self.n = n
        return self

    def stats(self) -> GaussianStats:
        if self.n < 2:
            raise FIDError(f"need at least 2 images to estimate feature covariance, got {self.n}")
        return GaussianStats(self.mean.copy(), self.comoment / (self.n - 1), self.n)


def stats_from_features(feats) -> GaussianStats:
    feats = np.asarray(feats, dtype=float)
    return StatsAccumulator(feats.shape[1]).update(feats).stats()


def _psd_sqrt(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(s1, s2) -> float:
    """``Tr((s1 s2)^{1/2})`` via the symmetric form ``(s1^{1/2} s2 s1^{1/2})^{1/2}``."""
    r = _psd_sqrt(s1)
    w = np.linalg.eigvalsh(r @ s2 @ r)
    return float(np.sum(np.sqrt(np.clip(w, 0, None))))


def frechet_distance(a: GaussianStats, b: GaussianStats, eps_scale: float = SQRT_EPS) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    Near-singular covariances get ``eps * I`` added to both, with
    ``eps = eps_scale * mean(diag)``.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    s1, s2 = np.asarray(a.sigma, float), np.asarray(b.sigma, float)
    diff = a.mu - b.mu
    ev = np.linalg.eigvalsh((s1 + s1.T) / 2), np.linalg.eigvalsh((s2 + s2.T) / 2)
    scale = max(np.abs(ev[0]).max(), np.abs(ev[1]).max(), 1e-300)
    if min(ev[0].min(), ev[1].min()) < 1e-12 * scale:
        eps = eps_scale * float(np.mean(np.concatenate([np.diag(s1), np.diag(s2)])))
        eye = np.eye(s1.shape[0])
        s1, s2 = s1 + eps * eye, s2 + eps * eye
    tr = _trace_sqrt_product(s1, s2)
    fd = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr)
    if not math.isfinite(fd):
        raise FIDError("Frechet distance is not finite after regularisation")
    # round-off can leave a tiny negative value for identical inputs
    return max(fd, 0.0)


# --- protocol ----------------------------------------------------------------

_REAL_CACHE: dict[tuple[str, str], GaussianStats] = {}


def real_stats(extractor, images: torch.Tensor) -> GaussianStats:
    """Feature statistics of the real set, cached per (extractor, image content)."""
    key = (extractor.name, hashlib.sha1(images.detach().cpu().numpy().tobytes()).hexdigest())
    if key not in _REAL_CACHE:
        _REAL_CACHE[key] = stats_from_features(extract(extractor, images))
    return _REAL_CACHE[key]


def fid_protocol(real, denoise, y_test, repeats: int = DEFAULT_REPEATS, extractor=None,
                 seed: int = 0) -> tuple[float, float, list[float]]:
    """Mean and sample std of FID over ``repeats`` stochastic realisations.

    ``real`` is a batch of real images or precomputed :class:`GaussianStats`.
    ``denoise(y, seed)`` returns one output per input; repeat ``r`` uses
    ``seed + r``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if y_test.shape[0] < 2:
        raise FIDError(f"need at least 2 test images to estimate feature covariance, "
                       f"got {y_test.shape[0]}")
    extractor = extractor or TinyRandomConv()
    ref = real if isinstance(real, GaussianStats) else real_stats(extractor, real)
    values = []
    for r in range(repeats):
        out = denoise(y_test, seed + r)
        values.append(frechet_distance(ref, stats_from_features(extract(extractor, out))))
    std = float(np.std(values, ddof=1)) if repeats > 1 else 0.0
    return float(np.mean(values)), std, values
