"""Perception-distortion traversal by latent scale and by sample averaging."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..inference import SWEEP_N, average_curve, sample
from .fid import GaussianStats, extract, frechet_distance, real_stats, stats_from_features
from .quality import psnr

SIGMA_Z_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
CSV_COLUMNS = ("mode", "knob", "psnr", "fid_mean", "fid_std")


@dataclass
class TradeoffPoint:
    mode: str  # "sigma_z" or "n_avg"
    knob: float
    psnr: float
    fid_mean: float
    fid_std: float


@dataclass
class TradeoffCurve:
    points: list[TradeoffPoint] = field(default_factory=list)

    def curve(self, mode: str) -> list[TradeoffPoint]:
        return [p for p in self.points if p.mode == mode]


def _mean_std(values):
    return float(np.mean(values)), float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def tradeoff_sweep(model, x_test, y_test, real, extractor, sigma_z_list=SIGMA_Z_GRID,
                   N_list=SWEEP_N, seed: int = 0, fid_repeats: int = 1) -> TradeoffCurve:
    """Two curves of (PSNR, FID): sigma_z varied at N = 1, N varied at sigma_z = 1.

    ``real`` is a real image batch or its :class:`GaussianStats`. Every point
    is averaged over ``fid_repeats`` seeds; PSNR is averaged the same way.
    """
    ref = real if isinstance(real, GaussianStats) else real_stats(extractor, real)

    def fid(out):
        return frechet_distance(ref, stats_from_features(extract(extractor, out)))

    result = TradeoffCurve()
    for sz in sigma_z_list:
        ps, fs = [], []
        for r in range(fid_repeats):
            out = sample(model, y_test, sz, seed + r)
            ps.append(psnr(x_test, out))
            fs.append(fid(out))
        result.points.append(TradeoffPoint("sigma_z", float(sz), float(np.mean(ps)), *_mean_std(fs)))
    per_n = {n: ([], []) for n in N_list}
    for r in range(fid_repeats):
        outs = average_curve(model, y_test, N_list, 1.0, seed + r)
        for n, out in outs.items():
            per_n[n][0].append(psnr(x_test, out))
            per_n[n][1].append(fid(out))
    for n in sorted(per_n):
        ps, fs = per_n[n]
        result.points.append(TradeoffPoint("n_avg", float(n), float(np.mean(ps)), *_mean_std(fs)))
    return result


def write_tradeoff_csv(curve: TradeoffCurve, path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for p in curve.points:
            w.writerow([p.mode, repr(p.knob), repr(p.psnr), repr(p.fid_mean), repr(p.fid_std)])


def read_tradeoff_csv(path) -> TradeoffCurve:
    with Path(path).open() as f:
        rows = list(csv.DictReader(f))
    return TradeoffCurve([TradeoffPoint(r["mode"], float(r["knob"]), float(r["psnr"]),
                                        float(r["fid_mean"]), float(r["fid_std"])) for r in rows])


def tradeoff_figure(curve: TradeoffCurve, title: str | None = None):
    """Scatter plot with PSNR on the horizontal axis and FID on the vertical axis."""
    from matplotlib.figure import Figure

    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    labels = {"sigma_z": r"$\sigma_z$ sweep (N=1)", "n_avg": r"N sweep ($\sigma_z$=1)"}
    for mode, marker in (("sigma_z", "o"), ("n_avg", "s")):
        pts = curve.curve(mode)
        if not pts:
            continue
        xs, ys = [p.psnr for p in pts], [p.fid_mean for p in pts]
        ax.plot(xs, ys, marker=marker, label=labels[mode])
        for p in pts:
            ax.annotate(f"{p.knob:g}", (p.psnr, p.fid_mean), fontsize=7,
                        textcoords="offset points", xytext=(3, 3))
    ax.set_xlabel("PSNR [dB]")
    ax.set_ylabel("FID")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return fig


def plot_tradeoff(curve: TradeoffCurve, path, title: str | None = None) -> None:
    tradeoff_figure(curve, title).savefig(path, dpi=120)
