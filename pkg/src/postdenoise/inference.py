"""Posterior sampling, N-sample averaging and per-pixel variation maps.

``model`` is anything exposing ``latent_shapes(batch)`` and
``model(y, z_maps)``: a trained :class:`~postdenoise.models.Generator` or an
analytic :class:`~postdenoise.oracle.PosteriorSampler`.

Sample ``k`` of a request always uses the ``k``-th latent draw of the
``seed`` stream, so ``average(N=1) == sample()`` and averages for different N
are nested (paired) on the same draws.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .models import draw_latents

SWEEP_N = (1, 2, 4, 8, 16, 32, 64)
DEFAULT_STD_SAMPLES = 32
MAX_BATCH = 512


@dataclass(frozen=True)
class InferenceRequest:
    y: torch.Tensor
    sigma_z: float = 1.0
    N: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.sigma_z < 0:
            raise ValueError(f"sigma_z must be >= 0, got {self.sigma_z}")


def _seeded(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def iter_samples(model, y, n: int, sigma_z: float = 1.0, seed: int = 0, max_batch: int = MAX_BATCH):
    """Yield ``n`` posterior samples for the batch ``y``, one tensor per draw.

    Draws are evaluated several at a time as one stacked batch of at most
    ``max_batch`` images; chunking does not change which latents are used.
    """
    B = y.shape[0]
    g = _seeded(seed)
    per_chunk = max(1, max_batch // B)
    done = 0
    with torch.no_grad():
        while done < n:
            k = min(per_chunk, n - done)
            draws = [draw_latents(model.latent_shapes(B), sigma_z, g, y.dtype) for _ in range(k)]
            z = [torch.cat([d[i] for d in draws]) for i in range(len(draws[0]))]
            out = model(y.repeat(k, *([1] * (y.ndim - 1))), z)
            yield from out.split(B)
            done += k


def sample(model, y, sigma_z: float = 1.0, seed: int = 0) -> torch.Tensor:
    """One forward pass with fresh latents of std ``sigma_z`` (zero when sigma_z = 0)."""
    return next(iter_samples(model, y, 1, sigma_z, seed))


def average(model, y, N: int, sigma_z: float = 1.0, seed: int = 0,
            max_batch: int = MAX_BATCH) -> torch.Tensor:
    """Arithmetic mean of N samples."""
    return average_curve(model, y, [N], sigma_z, seed, max_batch)[N]


def average_curve(model, y, N_list, sigma_z: float = 1.0, seed: int = 0,
                  max_batch: int = MAX_BATCH) -> dict[int, torch.Tensor]:
    """Running averages of one sample stream, reported at every N in ``N_list``."""
    N_list = sorted(set(int(n) for n in N_list))
    if N_list[0] < 1:
        raise ValueError("every N must be >= 1")
    wanted = set(N_list)
    out = {}
    total = None
    for k, s in enumerate(iter_samples(model, y, N_list[-1], sigma_z, seed, max_batch), 1):
        total = s.clone() if total is None else total + s
        if k in wanted:
            out[k] = total / k
    return out


def stddev_map(model, y, K: int = DEFAULT_STD_SAMPLES, seed: int = 0, sigma_z: float = 1.0,
               max_batch: int = MAX_BATCH) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel sample std (ddof = 1) over K samples, and its 4th root for display."""
    if K < 2:
        raise ValueError(f"stddev_map needs K >= 2 samples, got {K}")
    mean = m2 = None
    for k, s in enumerate(iter_samples(model, y, K, sigma_z, seed, max_batch), 1):
        s = s.double()
        if mean is None:
            mean, m2 = s.clone(), torch.zeros_like(s)
            continue
        delta = s - mean
        mean += delta / k
        m2 += delta * (s - mean)
    std = (m2 / (K - 1)).sqrt().to(y.dtype)
    return std, std.pow(0.25)


def run(model, request: InferenceRequest) -> torch.Tensor:
    return average(model, request.y, request.N, request.sigma_z, request.seed)
