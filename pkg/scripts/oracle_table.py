"""Closed-form vs Monte Carlo posterior errors at the experiment noise levels.

    python scripts/oracle_table.py out.csv [--n-mc 10000]

One row per (prior, sigma): MMSE and exact-sampler per-pixel errors, their
PSNR gap, and the N-averaging law at N = 1, 4, 16, 64.
"""
import argparse

from postdenoise.data import EXPERIMENT_SIGMAS
from postdenoise.oracle import (
    TOY_PRIOR, GaussianPrior, exact_sampler_mse, navg_error_law, navg_theory, psnr_gap_db,
    write_report_csv,
)

PRIORS = {"smooth": TOY_PRIOR, "iid": GaussianPrior(0.5, 0.2, 16)}
N_LIST = (1, 4, 16, 64)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--n-mc", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rows = []
    for name, prior in PRIORS.items():
        for sigma in EXPERIMENT_SIGMAS:
            s = sigma / 255
            mmse, samp = exact_sampler_mse(prior, s, args.n_mc, args.seed)
            law = navg_error_law(prior, s, N_LIST, args.n_mc, args.seed + 1)
            row = dict(prior=name, sigma=sigma, post_var=prior.posterior_variance(s),
                       mmse=mmse, sampler=samp, gap_db=psnr_gap_db(mmse, samp))
            for n in N_LIST:
                row[f"navg{n}"] = law[n]
                row[f"navg{n}_theory"] = navg_theory(prior, s, n)
            rows.append(row)
            print(f"{name:6s} sigma={sigma:2d}  gap {row['gap_db']:.3f} dB  "
                  + "  ".join(f"N={n}: {law[n] / row[f'navg{n}_theory']:.3f}" for n in N_LIST))
    write_report_csv(args.out, rows)


if __name__ == "__main__":
    main()
