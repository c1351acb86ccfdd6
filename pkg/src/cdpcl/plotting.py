"""Matplotlib figures for run reports, written as reproducible SVG text."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "cdpcl",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (6.0, 3.6),
}
MODE_COLORS = {
    "baseline": "#444444",
    "pcl": "#1f77b4",
    "upcl": "#2ca02c",
    "hpcl": "#ff7f0e",
    "cdpcl": "#d62728",
}


def _smooth(y, window: int = 25) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if len(y) < window:
        return y
    kernel = np.ones(window) / window
    head = np.cumsum(y[: window - 1]) / np.arange(1, window)
    return np.concatenate([head, np.convolve(y, kernel, mode="valid")])


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _label(rs) -> str:
    mode = rs.mode or "unknown"
    return mode if rs.seed is None else f"{mode} (seed {rs.seed})"


def plot_loss_curves(runs, path) -> Path:
    with plt.rc_context(STYLE):
        fig, (ax_total, ax_seg) = plt.subplots(1, 2, sharex=True)
        seen = set()
        for rs in runs:
            if "l_total" not in rs.losses:
                continue
            mode = rs.mode or "unknown"
            label = mode if mode not in seen else None
            seen.add(mode)
            it = rs.losses["iter"]
            color = MODE_COLORS.get(mode, "#9467bd")
            ax_total.plot(it, _smooth(rs.losses["l_total"]), color=color, lw=0.8, alpha=0.8, label=label)
            ax_seg.plot(it, _smooth(rs.losses["l_seg"]), color=color, lw=0.8, alpha=0.8)
        ax_total.set_xlabel("iteration")
        ax_total.set_ylabel("total loss")
        ax_seg.set_xlabel("iteration")
        ax_seg.set_ylabel("segmentation loss")
        if seen:
            ax_total.legend(frameon=False)
        _save(fig, path)
    return Path(path)


def plot_miou_curves(runs, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        seen = set()
        for rs in runs:
            if not rs.miou_curve:
                continue
            domains = sorted(rs.miou_curve)
            iters = [i for i, _ in rs.miou_curve[domains[0]]]
            mean = np.mean([[v for _, v in rs.miou_curve[d]] for d in domains], axis=0)
            mode = rs.mode or "unknown"
            ax.plot(
                iters,
                100 * mean,
                marker="o",
                ms=2.5,
                lw=0.9,
                color=MODE_COLORS.get(mode, "#9467bd"),
                label=mode if mode not in seen else None,
            )
            seen.add(mode)
        ax.set_xlabel("iteration")
        ax.set_ylabel("unseen-domain mIoU (%)")
        if seen:
            ax.legend(frameon=False)
        _save(fig, path)
    return Path(path)
