"""Figure rendering for reports.  Headless (Agg) and file-only."""
from __future__ import annotations

import contextlib
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.figsize": (5.0, 4.0),
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 5,
    "svg.hashsalt": "latentaug",
    "svg.fonttype": "none",
}


@contextlib.contextmanager
def report_style():
    with matplotlib.rc_context(RC):
        yield


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def plot_trajectory(true_xy: np.ndarray, gen_xy: np.ndarray, params, title: str, path) -> Path:
    """Paired PCA polylines: circles for true augmented embeddings, squares for generated."""
    with report_style():
        fig, ax = plt.subplots()
        ax.plot(true_xy[:, 0], true_xy[:, 1], "-o", color="tab:blue", label="true augmented")
        ax.plot(gen_xy[:, 0], gen_xy[:, 1], "--s", color="tab:orange", mfc="none", label="generated")
        for (x, y), p in zip(true_xy, params):
            ax.annotate(f"{p:+.2f}", (x, y), textcoords="offset points", xytext=(4, 4), fontsize=7)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.set_title(title)
        ax.legend(loc="best")
        return _save(fig, path)


def plot_bench(batch_sizes, seconds, peak_bytes, path) -> Path:
    """Log-log wall time against batch size, with peak memory on a twin axis."""
    with report_style():
        fig, ax = plt.subplots()
        ax.loglog(batch_sizes, seconds, "-o", color="tab:blue", label="wall time")
        ax.set_xlabel("patches per forward pass")
        ax.set_ylabel("seconds")
        ax2 = ax.twinx()
        ax2.loglog(batch_sizes, np.asarray(peak_bytes) / 2**20, "--s", color="tab:red", label="peak memory")
        ax2.set_ylabel("peak MiB")
        ax2.spines["right"].set_visible(True)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="upper left")
        return _save(fig, path)


def plot_loss_curve(losses, path, window: int = 50) -> Path:
    losses = np.asarray(losses, dtype=float)
    with report_style():
        fig, ax = plt.subplots()
        ax.plot(losses, color="0.75", lw=0.6)
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, len(losses)), smooth, color="tab:blue")
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        return _save(fig, path)
