"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_losses(histories: dict, path) -> Path:
    """One loss curve per phase (``{phase: losses}``), log scale."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for t, losses in sorted(histories.items()):
        ax.semilogy(np.arange(len(losses)), np.maximum(losses, 1e-16), label=f"phase {t}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if len(histories) > 1:
        ax.legend(fontsize="small")
    return _save(fig, path)


def plot_alpha_sweep(alphas, errors, optimized_error, path) -> Path:
    """Terminal error of the manual baselines against alpha, optimized run as a line."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(alphas, errors, "o-", color="tab:gray", label="manual velocity")
    if optimized_error is not None:
        ax.axhline(optimized_error, color="tab:red", ls="--", label="optimized")
    ax.set_xscale("log", base=2)
    ax.set_xlabel(r"$\alpha$")
    ax.set_ylabel("terminal centroid error")
    ax.legend(fontsize="small")
    return _save(fig, path)


def plot_trajectories(achieved, reference, path, names=None) -> Path:
    """Per-part centroid paths (frames, parts, 3) projected on the xy plane."""
    achieved, reference = np.asarray(achieved), np.asarray(reference)
    fig, ax = plt.subplots(figsize=(5, 4))
    for b in range(achieved.shape[1]):
        label = names[b] if names else f"part {b + 1}"
        line, = ax.plot(achieved[:, b, 0], achieved[:, b, 1], "o-", label=label)
        ax.plot(reference[:, b, 0], reference[:, b, 1], "x--", color=line.get_color(), alpha=0.6)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title("centroids: simulated (o) vs scaled reference (x)", fontsize="small")
    ax.legend(fontsize="small")
    return _save(fig, path)
