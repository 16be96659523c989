"""Report rendering: every analysis emits a CSV and a matching PNG
figure next to it, so results are both machine-readable and visible at a
glance. Uses the Agg backend only; nothing opens a window.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .analysis import CostModel, PerturbationReport, ScaleErrorProfile


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(metrics_csv, out_png) -> Path:
    with open(metrics_csv) as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(steps, [float(r["ce"]) for r in rows], label="token CE")
    axes[0].plot(steps, [float(r["total"]) for r in rows], label="total", alpha=0.7)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("log")
    axes[0].legend()
    axes[1].plot(steps, [float(r["consistency"]) for r in rows], color="tab:orange")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("consistency")
    axes[1].set_yscale("log")
    fig.suptitle("training losses")
    fig.tight_layout()
    return _save(fig, out_png)


def scale_profile_figure(profile: ScaleErrorProfile, schedule_sides, out_png,
                         second: ScaleErrorProfile | None = None,
                         labels=("run", "reference")) -> Path:
    x = np.arange(1, len(profile.mse) + 1)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    width = 0.38 if second else 0.6
    ax.bar(x - (width / 2 if second else 0), profile.mse, width, label=labels[0])
    if second is not None:
        ax.bar(x + width / 2, second.mse, width, label=labels[1])
        ax.legend()
    ax.set_xticks(x)
    ax.set_xticklabels([f"{s}x{s}" for s in schedule_sides])
    ax.set_xlabel("scale")
    ax.set_ylabel("cumulative latent MSE")
    ax.set_title("per-scale prediction error (teacher forced)")
    fig.tight_layout()
    return _save(fig, out_png)


def perturbation_figure(report: PerturbationReport, out_png) -> Path:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for s in report.scales:
        ys = [report.latent_mse[(s, g)] for g in report.sigmas]
        ax.plot(report.sigmas, ys, marker="o", label=f"scale {s}")
    ax.set_xlabel("injected noise sigma (relative to context RMS)")
    ax.set_ylabel("final latent MSE vs clean run")
    ax.set_title("perturbation robustness")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_png)


def cost_figure(models: list[CostModel], out_png) -> Path:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    sides = [m.ratio ** (m.steps - 1) for m in models]
    totals = [m.total_cost for m in models]
    ax.loglog(sides, totals, marker="o", label="total attention cost")
    ref = [totals[0] * (s / sides[0]) ** 4 for s in sides]
    ax.loglog(sides, ref, linestyle="--", label="n^4 reference")
    ax.set_xlabel("final side n")
    ax.set_ylabel("sum of squared cumulative tokens")
    ax.set_title("generation cost vs final resolution")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_png)


def locality_figure(distances: np.ndarray, out_png) -> Path:
    n_layers, n_heads, n_blocks = distances.shape
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    x = np.arange(1, n_blocks + 1)
    for li in range(n_layers):
        ax.plot(x, distances[li].mean(axis=0), marker="o", label=f"layer {li}")
    ax.set_xticks(x)
    ax.set_xlabel("scale block")
    ax.set_ylabel("mean attention distance (query grid units)")
    ax.set_title("attention locality by scale")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_png)


def eval_summary_figure(rows, out_png) -> Path:
    """rows: (name, psnr, edge_iou) per image."""
    names = [r[0] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].bar(range(len(rows)), [r[1] for r in rows])
    axes[0].set_ylabel("PSNR (dB)")
    axes[1].bar(range(len(rows)), [r[2] for r in rows], color="tab:green")
    axes[1].set_ylabel("edge IoU")
    for ax in axes:
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=6)
    fig.suptitle("reconstruction quality per image")
    fig.tight_layout()
    return _save(fig, out_png)
