"""Figure rendering for training logs and evaluation reports.

Figures are written next to the delimited outputs (CSV/JSON) of the same
run: training curves beside the per-epoch metrics log, metric histograms
and qualitative panels beside the evaluation report.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(rows: list[dict], out_png) -> None:
    """Loss (and validation metrics when logged) versus epoch."""
    epochs = [int(r["epoch"]) for r in rows]
    loss = [float(r["train_loss"]) for r in rows]
    has_val = any(r.get("val_iou") not in ("", None) for r in rows)
    fig, axes = plt.subplots(1, 2 if has_val else 1, figsize=(9 if has_val else 5, 3.2))
    ax0 = axes[0] if has_val else axes
    ax0.plot(epochs, loss, lw=1.2)
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("train loss")
    ax0.set_yscale("log")
    ax0.grid(alpha=0.3)
    if has_val:
        val_epochs = [int(r["epoch"]) for r in rows if r.get("val_iou") not in ("", None)]
        for key in ("val_iou", "val_f1"):
            vals = [float(r[key]) for r in rows if r.get(key) not in ("", None)]
            axes[1].plot(val_epochs, vals, lw=1.2, label=key)
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("validation metric")
        axes[1].set_ylim(0, 1)
        axes[1].legend(frameon=False)
        axes[1].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_metric_histograms(report, out_png) -> None:
    """Per-image IoU / F1 / HD95 distributions of an evaluation report."""
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3))
    specs = [("iou", "IoU"), ("f1", "F1"), ("hd95", "HD95 (px)")]
    for ax, (key, label) in zip(axes, specs):
        vals = [row[key] for row in report.per_image]
        ax.hist(vals, bins=20, color="#4878a8")
        mean = float(np.mean(vals))
        ax.axvline(mean, color="k", lw=1, ls="--")
        ax.set_title(f"{label}  mean={mean:.3f}")
        ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_example_panels(samples, preds, out_png, max_rows: int = 4) -> None:
    """Image / ground truth / prediction triplets for the first few samples."""
    n = min(max_rows, len(samples))
    fig, axes = plt.subplots(n, 3, figsize=(7, 2.4 * n), squeeze=False)
    for r in range(n):
        img = samples[r].image
        show = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
        axes[r][0].imshow(show, cmap="gray", vmin=0, vmax=1)
        axes[r][0].set_ylabel(samples[r].id, fontsize=7)
        axes[r][1].imshow(samples[r].mask[0], cmap="gray", vmin=0, vmax=1)
        axes[r][2].imshow(np.asarray(preds[r]).squeeze(), cmap="gray", vmin=0, vmax=1)
        for c, title in enumerate(("image", "truth", "prediction")):
            if r == 0:
                axes[r][c].set_title(title, fontsize=9)
            axes[r][c].set_xticks([])
            axes[r][c].set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
