"""Desk-scale end-to-end run on the smooth-field toy problem.

Generates the toy dataset, trains a denoiser, and measures everything the
toy acceptance checks look at. Used by ``scripts/toy_experiment.py`` and the
acceptance tests.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_generator
from .config import TrainConfig
from .data import DatasetSpec, NoiseModel, add_awgn, load_images, make_splits
from .inference import SWEEP_N, average_curve, sample, stddev_map
from .metrics.fid import TinyRandomConv, real_stats
from .metrics.normality import normality_suite
from .metrics.quality import local_noise_rms_density, psnr
from .metrics.tradeoff import tradeoff_sweep, write_tradeoff_csv
from .oracle import TOY_PRIOR, make_toy_dataset, prior_from_dict
from .training import train

TOY_TRAIN = 2000
TOY_TEST = 200
EVAL_NOISE_SEED = 12345


@dataclass
class ToyResults:
    train_seconds: float
    psnr_n1: float
    psnr_n64: float
    psnr_curve: dict
    mse_curve: dict
    mean_std_map: float
    normality_global: float
    normality_random_patch: float
    normality_top_patch: float
    remainder_rms_mode: float
    noise_rms_mode: float
    sigma_z_psnr: dict
    oracle_psnr_mmse: float
    oracle_psnr_sampler: float
    initial_mean_penalty: float
    final_mean_penalty: float

    @property
    def averaging_gain_db(self) -> float:
        return self.psnr_n64 - self.psnr_n1

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "averaging_gain_db": self.averaging_gain_db}, indent=2)


def toy_config(**overrides) -> TrainConfig:
    base = dict(image_size=16, channels=1, widths=(8, 16, 16), critic_widths=(8, 16, 16),
                n_critic=3, total_steps=4000, sigma=50.0, split_rule="random",
                n_train=TOY_TRAIN, n_test=TOY_TEST, hflip_p=0.5, checkpoint_every=500,
                learning_rate=1e-3, lambda_mm=1.0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def prepare_toy_data(root, seed: int = 0) -> Path:
    root = Path(root)
    if not (root / "images.npy").is_file():
        make_toy_dataset(TOY_PRIOR, TOY_TRAIN + TOY_TEST, TOY_PRIOR.size, seed, root)
    return root


def load_split(config: TrainConfig):
    spec = DatasetSpec(config.data_root, config.image_size, config.split_rule, config.n_train,
                       config.n_test, config.test_start, config.seed)
    train_idx, test_idx = make_splits(spec)
    x_train = load_images(config.data_root, train_idx, config.image_size, config.interpolation,
                          config.channels)
    x_test = load_images(config.data_root, test_idx, config.image_size, config.interpolation,
                         config.channels)
    return x_train, x_test


def evaluate_toy(ckpt_path, config: TrainConfig, x_train, x_test, losses=None,
                 train_seconds: float = 0.0, seed: int = 0) -> ToyResults:
    gen, _, _ = load_generator(ckpt_path)
    y = add_awgn(x_test, NoiseModel(config.sigma, EVAL_NOISE_SEED))
    curve = average_curve(gen, y, SWEEP_N, 1.0, seed)
    psnr_curve = {n: psnr(x_test, out) for n, out in curve.items()}
    mse_curve = {n: float((x_test - out).pow(2).mean()) for n, out in curve.items()}
    x1 = curve[1]
    std, _ = stddev_map(gen, y, 32, seed + 1)
    remainder = y - x1
    norm = normality_suite(remainder, seed=seed, clean=x_test, denoised=x1)
    noise = y - x_test
    extractor = TinyRandomConv()
    sweep = tradeoff_sweep(gen, x_test, y, real_stats(extractor, x_train), extractor,
                           N_list=(1,), seed=seed)
    sz_psnr = {p.knob: p.psnr for p in sweep.curve("sigma_z")}

    prior = TOY_PRIOR
    manifest = Path(config.data_root) / "manifest.json"
    if manifest.is_file():
        prior = prior_from_dict(json.loads(manifest.read_text())["prior"])
    s = config.sigma / 255
    mmse = prior.posterior_mean(y.double().numpy(), s)
    post = prior.posterior_sample(y.double().numpy(), s, np.random.default_rng(seed))
    x_np = x_test.double().numpy()
    init_pen = final_pen = float("nan")
    if losses:
        pens = [r["mean_penalty"] for r in losses]
        init_pen = float(np.mean(pens[:10]))
        final_pen = float(np.mean(pens[-100:]))
    return ToyResults(
        train_seconds=train_seconds,
        psnr_n1=psnr_curve[1], psnr_n64=psnr_curve[64],
        psnr_curve=psnr_curve, mse_curve=mse_curve,
        mean_std_map=float(std.mean()),
        normality_global=norm.global_pass,
        normality_random_patch=norm.random_patch_pass,
        normality_top_patch=norm.top_patch_pass,
        remainder_rms_mode=local_noise_rms_density(remainder).mode,
        noise_rms_mode=local_noise_rms_density(noise).mode,
        sigma_z_psnr=sz_psnr,
        oracle_psnr_mmse=psnr(x_np, mmse), oracle_psnr_sampler=psnr(x_np, post),
        initial_mean_penalty=init_pen, final_mean_penalty=final_pen,
    )


def run_toy(workdir, config: TrainConfig | None = None, write_sweep: bool = True) -> ToyResults:
    """Generate data, train and evaluate under ``workdir``; results also go to ``results.json``."""
    from .training import read_loss_log

    workdir = Path(workdir)
    data_root = prepare_toy_data(workdir / "toy_data")
    config = config or toy_config()
    config.data_root = str(data_root)
    x_train, x_test = load_split(config)
    run_dir = workdir / f"train_{config.mode}"
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    train(config, x_train, run_dir)
    seconds = time.perf_counter() - t0
    losses = read_loss_log(run_dir / "losses.csv")
    res = evaluate_toy(run_dir / "last.pt", config, x_train, x_test, losses, seconds)
    (workdir / "results.json").write_text(res.to_json())
    if write_sweep:
        gen, _, _ = load_generator(run_dir / "last.pt")
        y = add_awgn(x_test, NoiseModel(config.sigma, EVAL_NOISE_SEED))
        ext = TinyRandomConv()
        curve = tradeoff_sweep(gen, x_test, y, real_stats(ext, x_train), ext)
        write_tradeoff_csv(curve, workdir / "tradeoff.csv")
    return res
