"""Train and evaluate a denoiser on the 16x16 smooth-field toy problem.

    python scripts/toy_experiment.py runs/toy              # default PSCGAN toy config
    python scripts/toy_experiment.py runs/toy_mse --mode mse
    python scripts/toy_experiment.py runs/toy --set total_steps=4000

Writes results.json (PSNR-vs-N curve, std-map level, normality rates, RMS
density modes, sigma_z sweep, oracle reference PSNRs) and tradeoff.csv/.png.
"""
import argparse
import logging
import math
from pathlib import Path

from postdenoise.config import TrainConfig, build
from postdenoise.experiment import run_toy, toy_config
from postdenoise.metrics.tradeoff import plot_tradeoff, read_tradeoff_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("workdir")
    p.add_argument("--mode", choices=("pscgan", "mse", "lag"), default="pscgan")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)

    base = toy_config(mode=args.mode).to_dict()
    base.update(kv.split("=", 1) for kv in args.set)
    config = build(TrainConfig, base)
    res = run_toy(args.workdir, config)
    plot_tradeoff(read_tradeoff_csv(Path(args.workdir) / "tradeoff.csv"),
                  Path(args.workdir) / "tradeoff.png", f"toy, {args.mode}")
    print(res.to_json())
    print(f"averaging gain N=64 vs N=1: {res.averaging_gain_db:.3f} dB "
          f"(exact sampler: {10 * math.log10(2 / (1 + 1 / 64)):.3f} dB)")


if __name__ == "__main__":
    main()
