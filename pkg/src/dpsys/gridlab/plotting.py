"""PNG figures for reports (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_eigenvalues(eigenvalues, path, title="Markov matrix spectrum") -> Path:
    lam = np.sort(np.asarray(eigenvalues, dtype=float))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(np.arange(1, len(lam) + 1), np.clip(lam, 1e-18, None), "o", ms=4)
    ax.set_xlabel("index (ascending)")
    ax.set_ylabel("eigenvalue")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_traces(runs: dict, labels, path, dt: float = 1.0) -> Path:
    """One column per run (``{name: traces}``), rows: outputs then inputs."""
    names = list(runs)
    q = len(labels)
    fig, axes = plt.subplots(q + 1, len(names), figsize=(4 * len(names), 1.8 * (q + 1)),
                             sharex=True, squeeze=False)
    for j, name in enumerate(names):
        tr = runs[name]
        t = np.asarray(tr["t"]) * dt
        for i, lab in enumerate(labels):
            axes[i, j].plot(t, tr["y"][:, i], lw=0.7)
            axes[i, j].set_ylabel(lab)
        for k in range(tr["u"].shape[1]):
            axes[q, j].plot(t, tr["u"][:, k], lw=0.7, label=f"u{k + 1}")
        axes[q, j].set_ylabel("u")
        axes[q, j].set_xlabel("time [s]")
        axes[q, j].legend(fontsize=7, loc="upper right")
        axes[0, j].set_title(name)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
