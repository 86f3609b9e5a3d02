"""D'Agostino-Pearson K^2 omnibus normality test and the remainder-noise suite.

The skewness transform follows D'Agostino (1970) and the kurtosis transform
Anscombe & Glynn (1983); K^2 = Z_skew^2 + Z_kurt^2 is referred to chi^2 with
two degrees of freedom, whose survival function is exp(-K^2 / 2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .quality import PATCH, patch_rms_maps

MIN_SAMPLES = 20
ALPHA = 0.05


class NormalityTestError(ValueError):
    pass


def _moments(a: np.ndarray):
    d = a - a.mean(axis=-1, keepdims=True)
    m2 = np.mean(d ** 2, axis=-1)
    m3 = np.mean(d ** 3, axis=-1)
    m4 = np.mean(d ** 4, axis=-1)
    return m2, m3, m4


def skew_z(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    m2, m3, _ = _moments(a)
    b2 = m3 / m2 ** 1.5
    y = b2 * math.sqrt((n + 1) * (n + 3) / (6.0 * (n - 2)))
    beta2 = (3.0 * (n * n + 27 * n - 70) * (n + 1) * (n + 3)
             / ((n - 2.0) * (n + 5) * (n + 7) * (n + 9)))
    w2 = -1 + math.sqrt(2 * (beta2 - 1))
    delta = 1 / math.sqrt(0.5 * math.log(w2))
    alpha = math.sqrt(2.0 / (w2 - 1))
    return delta * np.log(y / alpha + np.sqrt((y / alpha) ** 2 + 1))


def kurtosis_z(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    m2, _, m4 = _moments(a)
    b2 = m4 / m2 ** 2
    mean = 3.0 * (n - 1) / (n + 1)
    var = 24.0 * n * (n - 2) * (n - 3) / ((n + 1.0) ** 2 * (n + 3) * (n + 5))
    x = (b2 - mean) / math.sqrt(var)
    sqrt_beta1 = (6.0 * (n * n - 5 * n + 2) / ((n + 7) * (n + 9))
                  * math.sqrt(6.0 * (n + 3) * (n + 5) / (n * (n - 2) * (n - 3))))
    A = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + math.sqrt(1 + 4.0 / sqrt_beta1 ** 2))
    term1 = 1 - 2 / (9.0 * A)
    denom = 1 + x * math.sqrt(2 / (A - 4.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        term2 = np.sign(denom) * np.cbrt((1 - 2.0 / A) / np.abs(denom))
        term2 = np.where(denom == 0, np.inf, term2)
    return (term1 - term2) / math.sqrt(2 / (9.0 * A))


def k2_test(a) -> tuple[np.ndarray, np.ndarray]:
    """K^2 statistic and p-value along the last axis."""
    a = np.asarray(a, dtype=float)
    if a.shape[-1] < MIN_SAMPLES:
        raise NormalityTestError(
            f"the K^2 test needs at least {MIN_SAMPLES} samples, got {a.shape[-1]}")
    k2 = skew_z(a) ** 2 + kurtosis_z(a) ** 2
    return k2, np.exp(-k2 / 2)


@dataclass
class NormalityResult:
    global_pass: float
    random_patch_pass: float
    top_patch_pass: float
    n_global: int
    n_random: int
    n_top: int


def _patch_values(img: np.ndarray, positions, patch):
    return np.stack([img[:, r:r + patch, c:c + patch].ravel() for r, c in positions])


def normality_suite(remainder, alpha: float = ALPHA, n_rand: int = 20, n_top: int = 20,
                    patch: int = PATCH, seed: int = 0, clean=None, denoised=None) -> NormalityResult:
    """Pass rates (p > alpha) of the K^2 test on remainder-noise images.

    Categories: each full image; ``n_rand`` random patches per image; the
    ``n_top`` patches per image with the largest patch-RMSE between ``clean``
    and ``denoised`` (falling back to the remainder's own local RMS when the
    pair is not given). When an image has fewer patch positions than
    requested, random patches are drawn with replacement and the top list is
    truncated.
    """
    rem = torch.as_tensor(remainder).double()
    if rem.ndim != 4:
        raise ValueError("remainder must be (batch, channels, H, W)")
    if clean is not None and denoised is not None:
        score = patch_rms_maps(torch.as_tensor(clean) - torch.as_tensor(denoised), patch)
    else:
        score = patch_rms_maps(rem, patch)
    rem_np = rem.numpy()
    score = score.numpy()
    rng = np.random.default_rng(seed)
    _, p_glob = k2_test(rem_np.reshape(rem_np.shape[0], -1))
    rand_p, top_p = [], []
    ph, pw = score.shape[1:]
    n_pos = ph * pw
    for img, sc in zip(rem_np, score):
        if n_rand:
            flat = rng.choice(n_pos, size=n_rand, replace=n_rand > n_pos)
            pos = [divmod(int(i), pw) for i in flat]
            rand_p.append(k2_test(_patch_values(img, pos, patch))[1])
        if n_top:
            order = np.argsort(sc.ravel(), kind="stable")[::-1][:min(n_top, n_pos)]
            pos = [divmod(int(i), pw) for i in order]
            top_p.append(k2_test(_patch_values(img, pos, patch))[1])
    rand_p = np.concatenate(rand_p) if rand_p else np.array([])
    top_p = np.concatenate(top_p) if top_p else np.array([])

    def rate(p):
        return float(np.mean(p > alpha)) if p.size else float("nan")

    return NormalityResult(rate(p_glob), rate(rand_p), rate(top_p),
                           p_glob.size, rand_p.size, top_p.size)
