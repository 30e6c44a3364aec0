"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence[dict], path) -> Path:
    """Measured max decode error per K against the 1/(2K) bound."""
    ks = np.array([r["k"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(ks, [r["max_err"] for r in rows], "o-", label="measured max error")
    ax.plot(ks, 1.0 / (2.0 * ks), "k--", label="1/(2K)")
    ax.set_xlabel("bins per pixel K")
    ax.set_ylabel("|decode(encode(x)) - x| (px)")
    ax.legend()
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], axis: str, path) -> Path:
    """Bar chart of parameter count and final training error per ablation value."""
    labels = [str(r["value"]) for r in rows]
    fig, ax1 = plt.subplots(figsize=(5.0, 3.2))
    x = np.arange(len(rows))
    ax1.bar(x - 0.2, [r["params"] / 1e3 for r in rows], 0.4, label="params (k)", color="tab:blue")
    ax1.set_ylabel("parameters (thousands)")
    ax1.set_xticks(x, labels)
    ax1.set_xlabel(axis)
    if all("mean_error_px" in r for r in rows):
        ax2 = ax1.twinx()
        ax2.bar(x + 0.2, [r["mean_error_px"] for r in rows], 0.4, label="mean error (px)", color="tab:orange")
        ax2.set_ylabel("mean keypoint error (px)")
    return _save(fig, path)


def plot_history(history: List[Dict[str, float]], path) -> Path:
    """Per-epoch loss and training PCK@0.1."""
    epochs = [h["epoch"] for h in history]
    fig, ax1 = plt.subplots(figsize=(5.0, 3.2))
    ax1.semilogy(epochs, [h["loss"] for h in history], color="tab:blue")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("SimCC loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [h["train_pck@0.1"] for h in history], color="tab:green")
    ax2.set_ylabel("train PCK@0.1", color="tab:green")
    ax2.set_ylim(0, 1.05)
    return _save(fig, path)


def plot_metrics(metrics: Dict[str, float], path, per_joint: Sequence[float] = (), joint_names: Sequence[str] = ()) -> Path:
    """Summary metric bars, plus per-joint rates when given."""
    ncols = 2 if len(per_joint) else 1
    fig, axes = plt.subplots(1, ncols, figsize=(4.5 * ncols, 3.2), squeeze=False)
    keys = list(metrics)
    axes[0, 0].bar(range(len(keys)), [metrics[k] for k in keys])
    axes[0, 0].set_xticks(range(len(keys)), keys, rotation=45, ha="right")
    axes[0, 0].set_ylim(0, 1.05)
    if len(per_joint):
        ax = axes[0, 1]
        ax.barh(range(len(per_joint)), np.nan_to_num(np.asarray(per_joint, dtype=float)))
        ax.set_yticks(range(len(per_joint)), list(joint_names) or [str(i) for i in range(len(per_joint))], fontsize=6)
        ax.set_xlim(0, 1.05)
        ax.set_xlabel("per-joint rate")
    return _save(fig, path)


def plot_pose(image: np.ndarray, coords: np.ndarray, limbs, path, gt: np.ndarray = None) -> Path:
    """Overlay predicted (and optionally ground-truth) skeletons on an image."""
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(image)
    for a, b in limbs:
        ax.plot(coords[[a, b], 0], coords[[a, b], 1], "r-", lw=1)
    if gt is not None:
        ax.plot(gt[:, 0], gt[:, 1], "g+", ms=4)
    ax.set_axis_off()
    return _save(fig, path)
