"""Min-max training of the posterior-sampling denoiser and its two baselines.

Modes:

* ``pscgan``: critic trained with the Wasserstein-GP loss; generator trained
  on ``mean_penalty + (-lambda_mm * E[C(G(z, y), y)])``.
* ``mse``:    generator trained on plain MSE with all latents held at zero.
* ``lag``:    same adversarial game, distortion ``lambda_lag * ||x - G(0, y)||^2``.

All randomness in a step is drawn from generators seeded by
``(seed, step, stream)`` so that a run resumed from a checkpoint replays the
uninterrupted run exactly.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig
from .data import NoiseModel, add_awgn, random_hflip
from .models import Critic, Generator, draw_latents, zero_latents

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "critic_loss", "gp", "mean_penalty", "gen_adv")

STREAM_DATA, STREAM_NOISE, STREAM_LATENT, STREAM_GP, STREAM_FLIP = range(5)


class TrainingDiverged(RuntimeError):
    pass


def stream_generator(seed: int, step: int, stream: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), int(step), int(stream)]).generate_state(2, np.uint64)
    g = torch.Generator()
    g.manual_seed(int(state[0]) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


# --- loss terms -------------------------------------------------------------

def gradient_penalty(critic, x, g, y, generator: torch.Generator | None = None,
                     eps: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the batch of ``(||grad_{x_hat} C(x_hat, y)||_2 - 1)^2``.

    ``x_hat = eps * x + (1 - eps) * g`` with one ``eps ~ U[0, 1]`` per sample.
    The result is differentiable with respect to the critic's parameters.
    """
    if not (x.shape == g.shape == y.shape):
        raise ValueError("x, g and y must share a shape")
    if eps is None:
        eps = torch.rand(x.shape[0], generator=generator, dtype=x.dtype)
    eps = eps.view(-1, *([1] * (x.ndim - 1)))
    x_hat = (eps * x + (1 - eps) * g).detach().requires_grad_(True)
    outer_grad = torch.is_grad_enabled()
    with torch.enable_grad():  # the input gradient is needed even under no_grad
        scores = critic(x_hat, y)
        if not scores.requires_grad:
            # constant critic: zero gradient everywhere
            grads = torch.zeros_like(x_hat)
        else:
            grads, = torch.autograd.grad(scores.sum(), x_hat, create_graph=outer_grad,
                                         allow_unused=True)
            if grads is None:
                grads = torch.zeros_like(x_hat)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def mean_penalty(generator, x, y, M: int, sigma_z: float = 1.0,
                 rng: torch.Generator | None = None, latents=None) -> torch.Tensor:
    """``mean_b ||x_b - (1/M) sum_m G(z_m, y_b)||^2`` with the norm summed over pixels.

    ``latents`` (optional) is a list of M latent lists, each for the whole batch.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    PB = x.shape[0]
    if latents is None:
        shapes = generator.latent_shapes(PB * M)
        z = draw_latents(shapes, sigma_z, rng, dtype=x.dtype)
    else:
        if len(latents) != M:
            raise ValueError(f"expected {M} latent draws, got {len(latents)}")
        z = [torch.cat([draw[k] for draw in latents]) for k in range(len(latents[0]))]
    out = generator(y.repeat(M, *([1] * (y.ndim - 1))), z)
    out = out.view(M, PB, *out.shape[1:])
    # shifted mean: exact when all M outputs agree, less cancellation otherwise
    mean = out[0] + (out - out[0]).mean(0)
    return (x - mean).pow(2).flatten(1).sum(1).mean()


def critic_loss(critic, x, y, fake, lambda_gp: float, gp_rng=None, eps=None):
    """``E[C(G)] - E[C(x)] + lambda_gp * GP``; returns (loss, gp)."""
    gp = gradient_penalty(critic, x, fake, y, gp_rng, eps)
    loss = critic(fake, y).mean() - critic(x, y).mean() + lambda_gp * gp
    return loss, gp


def generator_loss(generator, critic, x, y, config: TrainConfig,
                   z_adv, mean_latents=None, rng=None):
    """Total generator objective for ``pscgan`` and ``lag`` modes.

    Returns (loss, distortion_term, adversarial_term) where the adversarial
    term is ``-E[C(G(z, y), y)]`` before weighting.
    """
    fake = generator(y, z_adv)
    adv = -critic(fake, y).mean()
    if config.mode == "pscgan":
        PB = config.PB
        dist = mean_penalty(generator, x[:PB], y[:PB], config.M, config.sigma_z_train,
                            rng=rng, latents=mean_latents)
        loss = dist + config.lambda_mm * adv
    elif config.mode == "lag":
        g0 = generator(y, zero_latents(generator, y.shape[0], y.dtype))
        dist = config.lambda_lag * (x - g0).pow(2).flatten(1).sum(1).mean()
        loss = dist + adv
    else:
        raise ValueError(f"generator_loss does not handle mode {config.mode!r}")
    return loss, dist, adv


def mse_loss(generator, x, y):
    out = generator(y, zero_latents(generator, y.shape[0], y.dtype))
    return (out - x).pow(2).mean()


# --- state ------------------------------------------------------------------

@dataclass
class TrainState:
    generator: Generator
    critic: Critic | None
    opt_g: torch.optim.Optimizer
    opt_c: torch.optim.Optimizer | None
    step: int = 0
    logs: list[dict] = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    gen = Generator(config.generator_config())
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=betas)
    critic = opt_c = None
    if config.mode != "mse":
        critic = Critic(config.critic_config())
        opt_c = torch.optim.Adam(critic.parameters(), lr=config.learning_rate, betas=betas)
    return TrainState(gen, critic, opt_g, opt_c)


def _check_finite(state: TrainState, config: TrainConfig, out_dir, **losses):
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        path = None
        if out_dir is not None:
            path = Path(out_dir) / f"diverged_step{state.step}.pt"
            ckpt.save_checkpoint(path, state, config)
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {bad}; state dumped to {path}")


def _clip(params, config):
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)


def _critic_updates(state, x, y, config, latent_rng, gp_rng, out_dir):
    gen, critic = state.generator, state.critic
    for _ in range(config.n_critic):
        with torch.no_grad():
            z = draw_latents(gen.latent_shapes(x.shape[0]), config.sigma_z_train, latent_rng)
            fake = gen(y, z)
        loss, gp = critic_loss(critic, x, y, fake, config.lambda_gp, gp_rng)
        state.opt_c.zero_grad(set_to_none=True)
        loss.backward()
        _check_finite(state, config, out_dir, critic_loss=loss.item(), gp=gp.item())
        _clip(critic.parameters(), config)
        state.opt_c.step()
    return loss.item(), gp.item()


def _adversarial_step(state, x, y, config, rng_seed, out_dir):
    latent_rng = stream_generator(rng_seed, state.step, STREAM_LATENT)
    gp_rng = stream_generator(rng_seed, state.step, STREAM_GP)
    c_loss, gp = _critic_updates(state, x, y, config, latent_rng, gp_rng, out_dir)
    gen, critic = state.generator, state.critic
    for p in critic.parameters():
        p.requires_grad_(False)
    try:
        z_adv = draw_latents(gen.latent_shapes(x.shape[0]), config.sigma_z_train, latent_rng)
        loss, dist, adv = generator_loss(gen, critic, x, y, config, z_adv, rng=latent_rng)
        state.opt_g.zero_grad(set_to_none=True)
        loss.backward()
    finally:
        for p in critic.parameters():
            p.requires_grad_(True)
    _check_finite(state, config, out_dir, gen_loss=loss.item())
    _clip(gen.parameters(), config)
    state.opt_g.step()
    state.step += 1
    row = {"step": state.step, "critic_loss": c_loss, "gp": gp,
           "mean_penalty": dist.item(), "gen_adv": adv.item()}
    state.logs.append(row)
    return state


def pscgan_step(state: TrainState, x, y, config: TrainConfig, out_dir=None) -> TrainState:
    """``n_critic`` critic updates then one generator update on the same batch."""
    if config.mode != "pscgan":
        raise ValueError("pscgan_step requires mode = pscgan")
    return _adversarial_step(state, x, y, config, config.seed, out_dir)


def lag_step(state: TrainState, x, y, config: TrainConfig, out_dir=None) -> TrainState:
    if config.mode != "lag":
        raise ValueError("lag_step requires mode = lag")
    return _adversarial_step(state, x, y, config, config.seed, out_dir)


def mse_step(state: TrainState, x, y, config: TrainConfig, out_dir=None) -> TrainState:
    if config.mode != "mse":
        raise ValueError("mse_step requires mode = mse")
    loss = mse_loss(state.generator, x, y)
    state.opt_g.zero_grad(set_to_none=True)
    loss.backward()
    _check_finite(state, config, out_dir, mse=loss.item())
    _clip(state.generator.parameters(), config)
    state.opt_g.step()
    state.step += 1
    state.logs.append({"step": state.step, "critic_loss": 0.0, "gp": 0.0,
                       "mean_penalty": loss.item(), "gen_adv": 0.0})
    return state


STEP_FNS = {"pscgan": pscgan_step, "mse": mse_step, "lag": lag_step}


# --- loop -------------------------------------------------------------------

def batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Indices of the mini-batch for ``step``; a fresh permutation per epoch."""
    per_epoch = max(n // batch, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([int(seed), STREAM_DATA, epoch]).permutation(n)
    return perm[pos * batch:(pos + 1) * batch]


def make_batch(x_train: torch.Tensor, step: int, config: TrainConfig):
    idx = batch_indices(x_train.shape[0], config.B, step, config.seed)
    x = x_train[torch.as_tensor(idx)]
    if config.hflip_p > 0:
        x = random_hflip(x, config.hflip_p, generator=stream_generator(config.seed, step, STREAM_FLIP))
    y = add_awgn(x, NoiseModel(config.sigma), stream_generator(config.seed, step, STREAM_NOISE))
    return x, y


def write_loss_log(path, rows, append=False):
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_loss_log(path) -> list[dict]:
    with Path(path).open() as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(f)]


def train(config: TrainConfig, x_train: torch.Tensor, out_dir, resume=None,
          stop_at: int | None = None, progress=None) -> list[Path]:
    """Train for ``config.total_steps`` (or until ``stop_at``), returning checkpoint paths.

    Losses go to ``out_dir/losses.csv``; checkpoints to ``out_dir/ckpt_<step>.pt``
    and ``out_dir/last.pt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if x_train.shape[0] < config.B:
        raise ValueError(f"need at least B={config.B} training images, got {x_train.shape[0]}")
    state = init_state(config)
    log_path = out_dir / "losses.csv"
    if resume is not None:
        ckpt.restore_state(ckpt.load_checkpoint(resume), state, config)
        kept = [r for r in read_loss_log(log_path) if r["step"] <= state.step] \
            if log_path.exists() else []
        write_loss_log(log_path, kept)
    else:
        write_loss_log(log_path, [])
    step_fn = STEP_FNS[config.mode]
    last = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    saved, pending = [], []
    t0 = time.perf_counter()
    while state.step < last:
        x, y = make_batch(x_train, state.step, config)
        step_fn(state, x, y, config, out_dir)
        pending.append(state.logs[-1])
        if state.step % config.log_every == 0 or state.step == last:
            write_loss_log(log_path, pending, append=True)
            pending = []
        if state.step % config.checkpoint_every == 0 or state.step == last:
            path = out_dir / f"ckpt_{state.step:07d}.pt"
            ckpt.save_checkpoint(path, state, config)
            ckpt.save_checkpoint(out_dir / "last.pt", state, config)
            saved.append(path)
        if progress is not None:
            progress(state)
    if pending:
        write_loss_log(log_path, pending, append=True)
    log.info("trained %d steps in %.1fs", state.step, time.perf_counter() - t0)
    return saved
