"""File-based figures (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LABELS = {"ms": "MS-DeepONet", "std": "Standard DeepONet"}


def plot_tracking(loops: dict, path, title: str = "", channels=None) -> Path:
    """Outputs against the reference and the applied inputs, one column per run."""
    first = next(iter(loops.values()))
    n_y = first.y_log.shape[1]
    channels = list(range(n_y)) if channels is None else list(channels)
    n_u = first.trajectory.inputs.shape[1]
    fig, axes = plt.subplots(len(channels) + n_u, 1, sharex=True,
                             figsize=(7, 1.8 * (len(channels) + n_u)), squeeze=False)
    for key, res in loops.items():
        t = res.trajectory.times[:len(res.y_log)]
        for a, ch in enumerate(channels):
            axes[a, 0].plot(t, res.y_log[:, ch], label=LABELS.get(key, key))
        for q in range(n_u):
            axes[len(channels) + q, 0].step(t, res.trajectory.inputs[:len(t), q], where="post",
                                            label=LABELS.get(key, key))
    t = first.trajectory.times[:len(first.r_log)]
    for a, ch in enumerate(channels):
        axes[a, 0].plot(t, first.r_log[:, ch], "k--", lw=1, label="reference")
        axes[a, 0].set_ylabel(f"y{ch + 1}")
    for q in range(n_u):
        axes[len(channels) + q, 0].set_ylabel(f"u{q + 1}")
    axes[-1, 0].set_xlabel("t [s]")
    axes[0, 0].legend(loc="best", fontsize=8)
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_losses(histories: dict, path, val: dict | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, h in histories.items():
        h = np.asarray(h)
        if h.size:
            ax.semilogy(np.arange(1, h.size + 1), h, label=f"{LABELS.get(key, key)} training")
    for key, v in (val or {}).items():
        ax.axhline(v, ls="--", lw=1, label=f"{LABELS.get(key, key)} validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_swingups(trajectories, path, max_traj: int = 20) -> Path:
    """Pendulum angle and cart position of a subset of swing-up runs."""
    fig, (a1, a2) = plt.subplots(2, 1, sharex=True, figsize=(6, 4))
    for tr in trajectories[:max_traj]:
        a1.plot(tr.times, tr.states[:, 1], lw=0.8)
        a2.plot(tr.times, tr.states[:, 0], lw=0.8)
    a1.set_ylabel("theta [rad]")
    a2.set_ylabel("cart position [m]")
    a2.set_xlabel("t [s]")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_ablation(rows, path) -> Path:
    """Validation loss per grid entry, sorted."""
    rows = sorted(rows, key=lambda r: r[1])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.semilogy(range(len(rows)), [r[1] for r in rows], "o-")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r[0] for r in rows], rotation=90, fontsize=6)
    ax.set_ylabel("validation loss")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
