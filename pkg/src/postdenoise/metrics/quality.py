"""PSNR and patch-level RMS densities."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

PEAK = 1.0
PATCH = 15
N_BINS = 200


def psnr(x, x_hat, peak: float = PEAK) -> float:
    """``10 log10(peak^2 / MSE)`` over all elements; ``inf`` when MSE is 0."""
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = (x.double() - x_hat.double()).pow(2).mean().item()
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak ** 2 / mse)


def psnr_per_image(x, x_hat, peak: float = PEAK) -> np.ndarray:
    mse = (x.double() - x_hat.double()).pow(2).flatten(1).mean(1).numpy()
    with np.errstate(divide="ignore"):
        return 10 * np.log10(peak ** 2 / mse)


def patch_rms_maps(a: torch.Tensor, patch: int = PATCH) -> torch.Tensor:
    """RMS over every overlapping ``patch x patch`` window (all channels pooled).

    Returns shape (batch, H - patch + 1, W - patch + 1).
    """
    if a.ndim != 4:
        raise ValueError("expected a (batch, channels, H, W) tensor")
    if patch > min(a.shape[-2:]):
        raise ValueError(f"patch size {patch} exceeds image size {tuple(a.shape[-2:])}")
    sq = a.double().pow(2).mean(1, keepdim=True)
    return F.avg_pool2d(sq, patch, stride=1)[:, 0].clamp_min(0).sqrt()


@dataclass
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    count: int

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def mode(self) -> float:
        return float(self.centers[np.argmax(self.density)])

    @property
    def mass(self) -> float:
        return float(np.sum(self.density * np.diff(self.edges)))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_lo", "bin_hi", "density"])
            for lo, hi, d in zip(self.edges[:-1], self.edges[1:], self.density):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(d))])


def density(values, bins: int = N_BINS) -> Histogram:
    """Normalised histogram with ``bins`` uniform bins over [0, 1.5 * max]."""
    values = np.asarray(values, dtype=float).ravel()
    top = 1.5 * values.max() if values.size and values.max() > 0 else 1.0
    dens, edges = np.histogram(values, bins=bins, range=(0.0, top), density=True)
    return Histogram(edges, dens, values.size)


def patch_rmse_density(x_set, xhat_set, patch: int = PATCH, bins: int = N_BINS) -> Histogram:
    """Density of RMSE over every overlapping patch of every (clean, denoised) pair."""
    x_set, xhat_set = torch.as_tensor(x_set), torch.as_tensor(xhat_set)
    if x_set.shape != xhat_set.shape:
        raise ValueError("clean and denoised sets differ in shape")
    return density(patch_rms_maps(x_set - xhat_set, patch).numpy(), bins)


def local_noise_rms_density(noise_set, patch: int = PATCH, bins: int = N_BINS) -> Histogram:
    return density(patch_rms_maps(torch.as_tensor(noise_set), patch).numpy(), bins)
