"""Matplotlib report figures rendered to files next to delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(history, path) -> None:
    """Per-epoch mean training loss on a log axis, validation CD overlaid."""
    epochs = [r.epoch for r in history]
    losses = [r.mean_loss for r in history]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.semilogy(epochs, losses, color="tab:blue", lw=1.2, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    val = [(r.epoch, r.val_cd) for r in history if r.val_cd is not None]
    if val:
        ax2 = ax.twinx()
        ax2.semilogy([v[0] for v in val], [v[1] for v in val], "o-",
                     color="tab:orange", lw=1.0, ms=3, label="val CD")
        ax2.set_ylabel("validation CD (normalized)")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
    else:
        ax.legend(loc="upper right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(indices, cds, emds, path, cd_scale=1e4, emd_scale=1e3) -> None:
    """Per-sample CD and EMD bars with dashed mean lines."""
    cds = np.asarray(cds, dtype=float)
    emds = np.asarray(emds, dtype=float)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, vals, scale, label in ((axes[0], cds, cd_scale, "CD x 1e4"),
                                   (axes[1], emds, emd_scale, "EMD x 1e3")):
        ax.bar(range(len(vals)), vals * scale, color="tab:blue", width=0.8)
        ax.axhline(vals.mean() * scale, color="tab:red", ls="--", lw=1.0,
                   label=f"mean {vals.mean() * scale:.3f}")
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels([str(i) for i in indices], fontsize=7)
        ax.set_xlabel("sample")
        ax.set_ylabel(label)
        ax.legend()
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cloud_overlay(pred_xyz, gt_xyz, path, title="") -> None:
    """Predicted vs ground-truth clouds projected onto the XZ and YZ planes."""
    pred = np.asarray(pred_xyz, dtype=float)
    gt = np.asarray(gt_xyz, dtype=float)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    for ax, (a, b), name in ((axes[0], (0, 2), "XZ"), (axes[1], (1, 2), "YZ")):
        ax.scatter(gt[:, a], gt[:, b], s=2, c="tab:gray", alpha=0.5, label="target")
        ax.scatter(pred[:, a], pred[:, b], s=2, c="tab:red", alpha=0.5, label="predicted")
        ax.set_xlabel(f"{name[0].lower()} [m]")
        ax.set_ylabel("z [m]")
        ax.set_title(f"{name} projection")
        ax.set_aspect("equal")
        ax.legend(markerscale=3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_workspace_figure(tips, boundary, path) -> None:
    """Tip YZ scatter with the convex hull boundary polyline."""
    tips = np.asarray(tips, dtype=float)
    boundary = np.asarray(boundary, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    ax.scatter(tips[:, 0], tips[:, 1], s=4, c="tab:blue", alpha=0.6, label="tips")
    ax.plot(boundary[:, 0], boundary[:, 1], "-", color="tab:red", lw=1.2,
            label="hull boundary")
    ax.set_xlabel("y [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
