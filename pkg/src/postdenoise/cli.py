"""Command-line entry points: ``postdenoise <command> ...``.

Every command writes its artifacts under one timestamped run directory that
holds a frozen ``config.cfg`` and a ``MANIFEST`` index of the files produced.
Exit codes: 0 ok, 1 failed check, 2 config, 3 data, 4 checkpoint, 5 environment.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, config_from_checkpoint, load_checkpoint, load_generator
from .config import ConfigError, RunConfig, TrainConfig, build, dump_flat, load_config
from .data import DataError, NoiseModel, add_awgn, list_image_files, load_images, save_image
from .metrics.fid import ExtractorUnavailable, available_extractors, fid_protocol, get_extractor
from .metrics.fid import real_stats
from .metrics.normality import normality_suite
from .metrics.quality import local_noise_rms_density, patch_rmse_density, psnr
from .metrics.report import MetricReport
from .metrics.tradeoff import plot_tradeoff, tradeoff_sweep, write_tradeoff_csv

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_ENV = 0, 1, 2, 3, 4, 5

log = logging.getLogger("postdenoise")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class RunDir:
    """A fresh ``<root>/<command>-<timestamp>`` directory with a MANIFEST index."""

    def __init__(self, root, command: str, path=None):
        if path is None:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            path = Path(root) / f"{command}-{stamp}"
            k = 1
            while path.exists():
                path = Path(root) / f"{command}-{stamp}-{k}"
                k += 1
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.entries: dict[str, str] = {}
        manifest = self.path / "MANIFEST"
        if manifest.is_file():  # resumed run: keep earlier entries
            for line in manifest.read_text().splitlines():
                name, _, desc = line.partition("\t")
                self.entries[name] = desc

    def freeze(self, values: dict, name: str = "config.cfg") -> Path:
        out = self.path / name
        out.write_text(dump_flat(values))
        self.add(out, "resolved configuration")
        return out

    def add(self, path, description: str) -> None:
        rel = str(Path(path).relative_to(self.path))
        self.entries[rel] = description
        lines = [f"{k}\t{v}" for k, v in sorted(self.entries.items())]
        (self.path / "MANIFEST").write_text("\n".join(lines) + "\n")


def _parse_sets(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _require_dataset(root) -> Path:
    root = Path(root) if root else None
    if root is None or not root.is_dir():
        raise CliError(f"dataset not found: {root}", EXIT_DATA)
    if not (root / "images.npy").is_file() and not list_image_files(root):
        raise CliError(f"no images in {root}", EXIT_DATA)
    return root


def _split(config: TrainConfig, dataset):
    from .experiment import load_split

    config.data_root = str(_require_dataset(dataset))
    return load_split(config)


def _extractor(name: str):
    try:
        return get_extractor(name)
    except ExtractorUnavailable as exc:
        raise CliError(f"{exc}; available extractors: {', '.join(available_extractors())}",
                       EXIT_ENV) from exc


# --- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import train

    overrides = _parse_sets(args.set)
    if args.mode:
        overrides["mode"] = args.mode
    if args.resume:
        payload = load_checkpoint(args.resume)
        config = build(TrainConfig, {**config_from_checkpoint(payload).to_dict(), **overrides})
    else:
        config = load_config(args.config, overrides)
    x_train, _ = _split(config, config.data_root)
    if args.resume:
        run = RunDir(None, "train", Path(args.resume).parent)
    else:
        run = RunDir(args.output_dir or config.output_dir, "train")
    run.freeze(config.to_dict())
    print(f"run directory: {run.path}")
    saved = train(config, x_train, run.path, resume=args.resume)
    run.add(run.path / "losses.csv", "per-step losses")
    for path in saved:
        run.add(path, f"checkpoint at step {int(path.stem.split('_')[1])}")
    if saved:
        run.add(run.path / "last.pt", "latest checkpoint")
    return EXIT_OK


def _image_sources(input_dir: Path, count: int) -> list[tuple[str, str]]:
    """(output stem, input reference) per image, in load order."""
    if (input_dir / "images.npy").is_file():
        return [(f"image_{i:06d}", f"{input_dir / 'images.npy'}#{i}") for i in range(count)]
    return [(p.stem, str(p)) for p in list_image_files(input_dir)]


def cmd_denoise(args) -> int:
    from .inference import average, stddev_map

    gen, config, _ = load_generator(args.checkpoint)
    input_dir = _require_dataset(args.input_dir)
    y = load_images(input_dir, image_size=config.image_size, channels=config.channels)
    if y.shape[1] != config.channels:
        raise CliError(f"input has {y.shape[1]} channels, model expects {config.channels}",
                       EXIT_CHECKPOINT)
    run = RunDir(args.output_dir, "denoise")
    run.freeze(RunConfig("denoise", args.seed, str(run.path), dict(
        checkpoint=args.checkpoint, input_dir=str(input_dir), sigma_z=args.sigma_z,
        n_avg=args.n_avg, stddev_map=args.stddev_map or 0)).to_flat())
    out = average(gen, y, args.n_avg, args.sigma_z, args.seed)
    std = root = None
    if args.stddev_map:
        std, root = stddev_map(gen, y, args.stddev_map, args.seed, args.sigma_z)
    (run.path / "denoised").mkdir()
    if std is not None:
        (run.path / "stddev").mkdir()
    rows = []
    for i, (name, source) in enumerate(_image_sources(input_dir, y.shape[0])):
        path = run.path / "denoised" / f"{name}.png"
        save_image(path, out[i])
        row = dict(input_path=source, seed=args.seed, sigma_z=args.sigma_z,
                   N=args.n_avg, output_path=str(path.relative_to(run.path)))
        if std is not None:
            raw = run.path / "stddev" / f"{name}_std.npy"
            np.save(raw, std[i].numpy())
            vis = run.path / "stddev" / f"{name}_std_root4.png"
            save_image(vis, root[i])
            row.update(stddev_path=str(raw.relative_to(run.path)),
                       stddev_root4_path=str(vis.relative_to(run.path)))
        rows.append(row)
    with (run.path / "manifest.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    run.add(run.path / "manifest.csv", "per-image inputs and outputs")
    run.add(run.path / "denoised", f"{len(rows)} denoised images (N={args.n_avg})")
    if std is not None:
        run.add(run.path / "stddev", f"per-pixel std over {args.stddev_map} samples, raw and 4th root")
    print(f"run directory: {run.path}")
    return EXIT_OK


def _is_deterministic(gen, config, y) -> bool:
    from .inference import sample

    if config.mode == "mse":
        return True
    probe = y[:2]
    return torch.equal(sample(gen, probe, 1.0, 0), sample(gen, probe, 1.0, 1))


def _eval_setup(args):
    gen, config, _ = load_generator(args.checkpoint)
    extractor = _extractor(args.extractor)
    sigma = config.sigma if args.sigma is None else args.sigma
    x_train, x_test = _split(config, args.dataset)
    y = add_awgn(x_test, NoiseModel(sigma, args.noise_seed))
    return gen, config, extractor, sigma, x_train, x_test, y


def cmd_evaluate(args) -> int:
    from .inference import sample

    gen, config, extractor, sigma, x_train, x_test, y = _eval_setup(args)
    repeats = args.fid_repeats
    if repeats > 1 and _is_deterministic(gen, config, y):
        print("notice: model output does not depend on the latent; using fid_repeats=1",
              file=sys.stderr)
        repeats = 1
    run = RunDir(args.output_dir, "evaluate")
    run.freeze(RunConfig("evaluate", args.seed, str(run.path), dict(
        checkpoint=args.checkpoint, dataset=args.dataset, sigma=sigma, fid_repeats=repeats,
        extractor=args.extractor, noise_seed=args.noise_seed)).to_flat())

    def denoise(yy, seed):
        return sample(gen, yy, 1.0, seed)

    fid_mean, fid_std, fids = fid_protocol(real_stats(extractor, x_train), denoise, y, repeats,
                                           extractor, args.seed)
    xhat = denoise(y, args.seed)
    remainder = y - xhat
    norm = normality_suite(remainder, seed=args.seed, clean=x_test, denoised=xhat)
    hists = {
        "hist_patch_rmse.csv": ("clean vs denoised 15x15 patch RMSE density",
                                patch_rmse_density(x_test, xhat)),
        "hist_remainder_rms.csv": ("local RMS density of the remainder noise",
                                   local_noise_rms_density(remainder)),
        "hist_noise_rms.csv": ("local RMS density of the true noise",
                               local_noise_rms_density(y - x_test)),
    }
    for name, (desc, hist) in hists.items():
        hist.to_csv(run.path / name)
        run.add(run.path / name, desc)
    report = MetricReport(
        psnr_mean=psnr(x_test, xhat), fid_mean=fid_mean, fid_std=fid_std, fid_repeats=repeats,
        normality_global=norm.global_pass, normality_random_patch=norm.random_patch_pass,
        normality_top_patch=norm.top_patch_pass, extractor=extractor.name, seed=args.seed,
        config_hash=config.config_hash(), sigma=sigma, histogram_files=list(hists),
        extra={"remainder_rms_mode": hists["hist_remainder_rms.csv"][1].mode,
               "noise_rms_mode": hists["hist_noise_rms.csv"][1].mode,
               "n_test": int(x_test.shape[0])})
    report.write(run.path / "report.txt")
    run.add(run.path / "report.txt", "metric report")
    print(report.to_text(), end="")
    print(f"run directory: {run.path}")
    return EXIT_OK


def cmd_tradeoff(args) -> int:
    gen, config, extractor, sigma, x_train, x_test, y = _eval_setup(args)
    run = RunDir(args.output_dir, "tradeoff")
    run.freeze(RunConfig("tradeoff", args.seed, str(run.path), dict(
        checkpoint=args.checkpoint, dataset=args.dataset, sigma=sigma,
        fid_repeats=args.fid_repeats, extractor=args.extractor,
        noise_seed=args.noise_seed)).to_flat())
    curve = tradeoff_sweep(gen, x_test, y, real_stats(extractor, x_train), extractor,
                           seed=args.seed, fid_repeats=args.fid_repeats)
    write_tradeoff_csv(curve, run.path / "tradeoff.csv")
    run.add(run.path / "tradeoff.csv", "PSNR and FID per sweep point")
    plot_tradeoff(curve, run.path / "tradeoff.png", f"sigma={sigma:g}")
    run.add(run.path / "tradeoff.png", "FID versus PSNR scatter")
    for p in curve.points:
        print(f"{p.mode:8s} {p.knob:6g}  PSNR {p.psnr:7.3f}  FID {p.fid_mean:.4g}")
    print(f"run directory: {run.path}")
    return EXIT_OK


def _prior(spec: str):
    import json

    from .oracle import TOY_PRIOR, GaussianPrior, prior_from_dict

    if spec == "toy":
        return TOY_PRIOR
    if spec == "iid":
        return GaussianPrior(0.5, 0.2, 16)
    path = Path(spec)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise CliError(f"prior must be 'toy', 'iid' or a toy dataset manifest, got {spec!r}",
                       EXIT_CONFIG)
    return prior_from_dict(json.loads(path.read_text())["prior"])


def cmd_oracle(args) -> int:
    from .oracle import (
        MIN_BUDGET, exact_sampler_mse, navg_error_law, navg_theory, psnr_gap_db, write_report_csv,
    )

    prior = _prior(args.prior)
    s = args.sigma / 255
    run = RunDir(args.output_dir, "oracle")
    run.freeze(RunConfig("oracle", args.seed, str(run.path), dict(
        prior=args.prior, sigma=args.sigma, n_mc=args.n_mc)).to_flat())
    if args.n_mc < MIN_BUDGET:
        print(f"warning: n_mc={args.n_mc} is below {MIN_BUDGET}; the recorded tolerances "
              "are not met at this budget", file=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mmse, samp = exact_sampler_mse(prior, s, args.n_mc, args.seed)
        law = navg_error_law(prior, s, (1, 4, 16), args.n_mc, args.seed + 1)
    post_var = prior.posterior_variance(s)
    gap = psnr_gap_db(mmse, samp)
    rows = [
        dict(check="sampler_over_mmse", measured=samp / mmse, expected=2.0, tolerance=0.05,
             ok=abs(samp / mmse / 2.0 - 1) <= 0.05),
        dict(check="mmse_vs_posterior_variance", measured=mmse, expected=post_var,
             tolerance=0.05, ok=abs(mmse / post_var - 1) <= 0.05),
    ]
    for n, v in law.items():
        theory = navg_theory(prior, s, n)
        rows.append(dict(check=f"navg_N{n}", measured=v, expected=theory, tolerance=0.10,
                         ok=abs(v / theory - 1) <= 0.10))
    write_report_csv(run.path / "oracle.csv", rows)
    run.add(run.path / "oracle.csv", "oracle checks against closed forms")
    print(f"PSNR gap sampler vs MMSE: {gap:.3f} dB (theory {10 * np.log10(2):.3f} dB)")
    for r in rows:
        print(f"{'ok  ' if r['ok'] else 'FAIL'} {r['check']:28s} measured {r['measured']:.6g}"
              f"  expected {r['expected']:.6g}  tol {r['tolerance']:.0%}")
    print(f"run directory: {run.path}")
    return EXIT_OK if all(r["ok"] for r in rows) else EXIT_FAIL


def cmd_make_toy_data(args) -> int:
    from .oracle import make_toy_dataset

    prior = _prior(args.prior)
    try:
        root = make_toy_dataset(prior, args.count, args.size, args.seed, args.out, args.png)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    print(f"wrote {args.count} images to {root}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="postdenoise",
                                description="Posterior-sampling image denoiser toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--mode", choices=("pscgan", "mse", "lag"))
    t.add_argument("--resume", help="checkpoint to continue from (writes into its directory)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise a folder of noisy images")
    d.add_argument("checkpoint")
    d.add_argument("input_dir")
    d.add_argument("--sigma-z", type=float, default=1.0)
    d.add_argument("--n-avg", type=int, default=1)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--stddev-map", type=int, nargs="?", const=32, default=None, metavar="K",
                   help="also write per-pixel std maps over K samples (default 32)")
    d.add_argument("--output-dir", default="runs")
    d.set_defaults(func=cmd_denoise)

    for name, func, help_, repeats in (("evaluate", cmd_evaluate, "PSNR, FID, normality", 32),
                                       ("tradeoff", cmd_tradeoff, "sigma_z and N sweeps", 1)):
        e = sub.add_parser(name, help=help_)
        e.add_argument("checkpoint")
        e.add_argument("dataset", help="image folder split with the checkpoint's split rule")
        e.add_argument("--sigma", type=float, help="noise level in 8-bit units "
                       "(default: training value)")
        e.add_argument("--fid-repeats", type=int, default=repeats)
        e.add_argument("--extractor", default="tiny-random-conv")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--noise-seed", type=int, default=12345)
        e.add_argument("--output-dir", default="runs")
        e.set_defaults(func=func)

    o = sub.add_parser("oracle", help="closed-form posterior checks")
    o.add_argument("--prior", default="toy", help="'toy', 'iid' or a toy dataset directory")
    o.add_argument("--sigma", type=float, default=50.0)
    o.add_argument("--n-mc", type=int, default=10_000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--output-dir", default="runs")
    o.set_defaults(func=cmd_oracle)

    m = sub.add_parser("make-toy-data", help="write a smooth-field toy dataset")
    m.add_argument("out")
    m.add_argument("--count", type=int, default=2200)
    m.add_argument("--size", type=int, default=16)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--prior", default="toy")
    m.add_argument("--png", action="store_true", help="also write PNG files")
    m.set_defaults(func=cmd_make_toy_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are config errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ExtractorUnavailable as exc:
        print(f"environment error: {exc}; available: {', '.join(available_extractors())}",
              file=sys.stderr)
        return EXIT_ENV


if __name__ == "__main__":
    sys.exit(main())
