"""Report figures, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss(steps, node_term, edge_term, total, path, smooth: int = 50) -> Path:
    """Training loss curves with a running mean overlaid on the total."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, total, color="0.75", lw=0.6, label="total")
        if len(total) >= smooth > 1:
            kernel = np.ones(smooth) / smooth
            ax.plot(steps[smooth - 1:], np.convolve(total, kernel, mode="valid"), color="k", lw=1.2,
                    label=f"total ({smooth}-step mean)")
        ax.plot(steps, node_term, lw=0.6, alpha=0.7, label="node")
        ax.plot(steps, edge_term, lw=0.6, alpha=0.7, label="edge")
        ax.set_xlabel("step")
        ax.set_ylabel("score entropy")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_entropy(mean_entropy, path) -> Path:
    """Mean per-token entropy of the reverse transitions, from t=1 down to t_min."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        k = np.arange(len(mean_entropy), 0, -1)
        ax.plot(k, mean_entropy, color="C0")
        ax.invert_xaxis()
        ax.set_xlabel("reverse step k")
        ax.set_ylabel("mean token entropy (nats)")
        return _save(fig, path)


def plot_distributions(p_model, p_ref, path, labels=None, top: int = 24) -> Path:
    """Side-by-side bars for the most probable graphs under either distribution."""
    p_model = np.asarray(p_model, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    order = np.argsort(-np.maximum(p_model, p_ref), kind="stable")[:top]
    x = np.arange(len(order))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(x - 0.2, p_ref[order], width=0.4, label="data", color="0.6")
        ax.bar(x + 0.2, p_model[order], width=0.4, label="samples", color="C0")
        ax.set_xticks(x)
        ax.set_xticklabels([str(i) if labels is None else labels[i] for i in order], rotation=90, fontsize=6)
        ax.set_xlabel("graph index")
        ax.set_ylabel("probability")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_controllability(rows, path) -> Path:
    """Bars with 95% intervals; ``rows`` are ``(label, value, low, high)``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [r[0] for r in rows]
        vals = np.array([r[1] for r in rows])
        err = np.array([[r[1] - r[2] for r in rows], [r[3] - r[1] for r in rows]])
        x = np.arange(len(rows))
        ax.bar(x, vals, color="C2")
        ax.errorbar(x, vals, yerr=np.nan_to_num(err), fmt="none", ecolor="k", capsize=3)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylabel("accuracy / MAE")
        return _save(fig, path)
