"""
USTD Plots Module

Static figure files for evaluation runs: per-node fan charts of sampled
windows, per-horizon error curves and training loss curves. Figures are
written with the Agg backend and never opened in a window.
"""

import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.ustd_metrics import MetricReport, SampleSet  # noqa: E402


def _save(fig: "plt.Figure", path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def fan_chart(
    sample_set: SampleSet,
    truth: np.ndarray,
    node: int,
    path: str,
    history: Optional[np.ndarray] = None,
    channel: int = 0,
    title: Optional[str] = None,
) -> str:
    """
    Median line, sample envelope and ground truth of one node's window.

    Args:
        sample_set: De-normalized samples of the window
        truth: (nodes, steps, d) truth of the window
        node: Row of the node within the window
        path: Output image path
        history: Optional (nodes, T, d) condition drawn before the targets
        channel: Channel to draw
        title: Figure title

    Returns:
        str: The written path
    """
    samples = sample_set.samples[:, node, :, channel]
    steps = samples.shape[1]
    offset = 0 if history is None else history.shape[1]
    x = np.arange(offset, offset + steps)

    fig, ax = plt.subplots(figsize=(7, 3.5))
    if history is not None:
        ax.plot(np.arange(offset), history[node, :, channel], color="0.4",
                label="condition")
    ax.fill_between(x, samples.min(axis=0), samples.max(axis=0), alpha=0.25,
                    color="tab:blue", label="sample range")
    if samples.shape[0] >= 4:
        low, high = np.quantile(samples, [0.1, 0.9], axis=0)
        ax.fill_between(x, low, high, alpha=0.35, color="tab:blue", label="10–90%")
    ax.plot(x, sample_set.point_estimate[node, :, channel], color="tab:blue",
            label="median")
    ax.plot(x, truth[node, :, channel], color="black", linestyle="--", label="truth")
    ax.set_xlabel("step")
    ax.set_ylabel("value")
    ax.set_title(title or f"node {node}, window start {sample_set.start}")
    ax.legend(loc="best", fontsize="small")
    return _save(fig, path)


def horizon_curve(reports: Sequence[MetricReport], path: str) -> str:
    """MAE per forecast horizon, one line per model."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for report in reports:
        if report.horizon_mae:
            horizons = np.arange(1, len(report.horizon_mae) + 1)
            ax.plot(horizons, report.horizon_mae, marker="o", label=report.model)
    ax.set_xlabel("horizon")
    ax.set_ylabel("MAE")
    ax.legend(loc="best", fontsize="small")
    return _save(fig, path)


def loss_curve(losses: Sequence[float], path: str, label: str = "loss",
               val_losses: Optional[Sequence[float]] = None) -> str:
    """Training (and optional validation) loss per step or epoch."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses, label=label)
    if val_losses:
        ax.plot(np.arange(1, len(val_losses) + 1), val_losses, label="validation")
    ax.set_yscale("log")
    ax.set_xlabel("step" if val_losses is None else "epoch")
    ax.legend(loc="best", fontsize="small")
    return _save(fig, path)
