"""Conditional denoiser (generator) and conditional critic.

Generator layout, for scales s = 0 (coarsest) .. S-1 (full resolution)::

    y -> stem -> [enc block] -> exit_{S-1} -> down -> ... -> exit_0
                                   |                          |
                               drip_{S-1}                  drip_0
                                   v                          v
    decoder stage 0:  cat(drip_0, bottleneck, z_0) -> NoiseInjectConv -> conv -> rgb_0
    decoder stage s:  cat(up(feat_{s-1}), drip_s, z_s) -> NoiseInjectConv -> conv
                      rgb_s = up(rgb_{s-1}) + to_rgb_s(feat_s)

Each decoder stage receives one single-channel latent map, concatenated to
the input of its first convolution.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CriticConfig, GeneratorConfig

LRELU_SLOPE = 0.2


def _act():
    return nn.LeakyReLU(LRELU_SLOPE)


class NoiseInjectConv(nn.Module):
    """Convolution over ``cat(features, z)``.

    For each output map this computes ``sum_i h_i * x_i + h_{c+1} * z``, so
    the kernel acting on the latent is a full spatial kernel rather than a
    per-channel scale.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels + 1, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2:] != x.shape[-2:] or z.shape[0] != x.shape[0] or z.shape[1] != 1:
            raise ValueError(
                f"latent map shape {tuple(z.shape)} does not match features {tuple(x.shape)}")
        return self.conv(torch.cat([x, z], dim=1))


def noise_inject_conv(features: torch.Tensor, z: torch.Tensor, kernels: torch.Tensor,
                      bias: torch.Tensor | None = None) -> torch.Tensor:
    """Functional form: ``kernels`` has shape (out, c + 1, k, k), last input slot for z."""
    if z.shape[-2:] != features.shape[-2:]:
        raise ValueError(f"latent spatial size {tuple(z.shape[-2:])} != "
                         f"feature spatial size {tuple(features.shape[-2:])}")
    return F.conv2d(torch.cat([features, z], dim=1), kernels, bias, padding=kernels.shape[-1] // 2)


def conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class Drip(nn.Sequential):
    """Shallow side network: two 3x3 convs from an encoder exit to a decoder stage."""

    def __init__(self, cin, cout):
        super().__init__(conv3(cin, cout), _act(), conv3(cout, cout), _act())


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.channels
        w = config.widths  # fine-to-coarse
        S = config.n_scales
        self.stem = nn.Sequential(conv3(c, w[0]), _act())
        # main encoder pipeline, fine to coarse
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(S):
            self.enc_blocks.append(nn.Sequential(conv3(w[i], w[i]), _act()))
            if i < S - 1:
                self.downs.append(nn.Sequential(conv3(w[i], w[i + 1], stride=2), _act()))
        self.drips = nn.ModuleList(Drip(w[i], w[i]) for i in range(S))
        # decoder, coarse to fine; stage k works at fine-index S-1-k
        self.dec_first = nn.ModuleList()
        self.dec_second = nn.ModuleList()
        self.to_rgb = nn.ModuleList()
        for k in range(S):
            i = S - 1 - k
            cin = 2 * w[i] if k == 0 else w[i + 1] + w[i]
            self.dec_first.append(NoiseInjectConv(cin, w[i]))
            self.dec_second.append(conv3(w[i], w[i]))
            self.to_rgb.append(nn.Conv2d(w[i], c, 1))
        self.act = _act()

    def latent_shapes(self, batch: int) -> list[tuple[int, ...]]:
        """Shapes of the per-stage latent maps, coarse to fine."""
        s0 = self.config.smallest_scale
        return [(batch, 1, s0 * 2 ** k, s0 * 2 ** k) for k in range(self.config.n_scales)]

    def _up(self, t):
        mode = self.config.upsample_mode
        kwargs = {} if mode == "nearest" else {"align_corners": False}
        return F.interpolate(t, scale_factor=2, mode=mode, **kwargs)

    def forward(self, y: torch.Tensor, z: list[torch.Tensor]) -> torch.Tensor:
        cfg = self.config
        if y.ndim != 4 or y.shape[1] != cfg.channels or y.shape[-1] != cfg.image_size \
                or y.shape[-2] != cfg.image_size:
            raise ValueError(f"expected input (B, {cfg.channels}, {cfg.image_size}, "
                             f"{cfg.image_size}), got {tuple(y.shape)}")
        if len(z) != cfg.n_scales:
            raise ValueError(f"expected {cfg.n_scales} latent maps, got {len(z)}")
        S = cfg.n_scales
        h = self.stem(y)
        exits = []
        for i in range(S):
            h = self.enc_blocks[i](h)
            exits.append(h)
            if i < S - 1:
                h = self.downs[i](h)
        feat = rgb = None
        for k in range(S):
            i = S - 1 - k
            drip = self.drips[i](exits[i])
            if k == 0:
                inp = torch.cat([drip, exits[i]], dim=1)
            else:
                inp = torch.cat([self._up(feat), drip], dim=1)
            feat = self.act(self.dec_first[k](inp, z[k]))
            feat = self.act(self.dec_second[k](feat))
            out = self.to_rgb[k](feat)
            rgb = out if rgb is None else self._up(rgb) + out
        return rgb


class Critic(nn.Module):
    """Scores (x_hat, y) pairs; conditioning is channel concatenation."""

    def __init__(self, config: CriticConfig):
        super().__init__()
        self.config = config
        w = config.widths
        layers = [conv3(2 * config.channels, w[0]), _act()]
        size = config.image_size
        for i in range(1, len(w)):
            layers += [conv3(w[i - 1], w[i], stride=2), _act()]
            size //= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(w[-1] * size * size, 1)

    def forward(self, x_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x_hat.shape != y.shape:
            raise ValueError(f"critic inputs differ in shape: {tuple(x_hat.shape)} vs {tuple(y.shape)}")
        h = self.features(torch.cat([x_hat, y], dim=1))
        return self.head(h.flatten(1)).squeeze(1)


def draw_latents(shapes, sigma_z: float, generator: torch.Generator | None = None,
                 dtype=torch.float32) -> list[torch.Tensor]:
    """Latent maps with std ``sigma_z``; exactly zero when ``sigma_z == 0``."""
    if sigma_z < 0:
        raise ValueError(f"sigma_z must be >= 0, got {sigma_z}")
    if sigma_z == 0:
        return [torch.zeros(s, dtype=dtype) for s in shapes]
    return [sigma_z * torch.randn(s, generator=generator, dtype=dtype) for s in shapes]


def zero_latents(model, batch: int, dtype=torch.float32) -> list[torch.Tensor]:
    return [torch.zeros(s, dtype=dtype) for s in model.latent_shapes(batch)]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
