"""Static plots derived from the CSV artifacts. Plotting never writes metrics."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_loss_curve(metrics_csv: Path, out_png: Path) -> Path:
    rows = _read(metrics_csv)
    steps = [int(r["step"]) for r in rows]
    loss = [float(r["loss"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, loss, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_ablation(summary_csv: Path, out_png: Path) -> Path:
    rows = _read(summary_csv)
    labels = [r["value"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].bar(labels, [100 * float(r["top1"]) for r in rows], color="tab:blue")
    axes[0].set_ylabel("top-1 (%)")
    axes[1].bar(labels, [float(r["final_loss"]) for r in rows], color="tab:orange")
    axes[1].set_ylabel("final loss")
    for ax in axes:
        ax.set_xlabel(rows[0]["sweep"] if rows else "")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_theorem(sweep_csv: Path, out_png: Path) -> Path:
    rows = _read(sweep_csv)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for regime in sorted({r["regime"] for r in rows}):
        sel = [r for r in rows if r["regime"] == regime]
        ax.plot([1 - float(r["confidence_bucket"]) for r in sel],
                [float(r["median_residual"]) for r in sel], marker="o", label=regime)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.invert_xaxis()
    ax.set_xlabel("1 - confidence bucket edge")
    ax.set_ylabel("median surrogate residual")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
