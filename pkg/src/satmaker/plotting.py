"""Figure rendering for reports. Every figure is drawn from numbers already on disk."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

METRIC_LABELS = {
    "psnr": "PSNR (dB)",
    "rmse": "RMSE",
    "ssim": "SSIM",
    "mae": "MAE",
    "perceptual": "perceptual distance",
}


def _number(cell):
    try:
        v = float(cell)
    except (TypeError, ValueError):
        return math.nan
    return v


def metric_vs_ratio(table: dict, ratios: list, metric: str, path, title: str | None = None) -> None:
    """One line per method; ``table[method][ratio]`` holds the cell text, NA cells are skipped."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        x = np.array([float(r) for r in ratios])
        for method, row in table.items():
            y = np.array([_number(row.get(r)) for r in ratios])
            ok = np.isfinite(y)
            if ok.any():
                ax.plot(x[ok], y[ok], marker="o", lw=1.2, ms=3.5, label=method)
        ax.set_xlabel("missing ratio")
        ax.set_ylabel(METRIC_LABELS.get(metric, metric))
        ax.set_xticks(x)
        if title:
            ax.set_title(title)
        if table:
            ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def preview_panel(panels: dict, path, title: str | None = None) -> None:
    """Side-by-side grayscale panels (observed, reconstruction, truth, ...) on a shared [0, 1] scale."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.0 * len(panels), 2.2))
        axes = np.atleast_1d(axes)
        for ax, (name, img) in zip(axes, panels.items()):
            img = np.asarray(img, dtype=np.float64)
            lo, hi = (0.0, 1.0) if name != "dem" else (float(img.min()), float(img.max()))
            ax.imshow(img, cmap="gray" if name != "dem" else "terrain", vmin=lo, vmax=hi,
                      interpolation="nearest")
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)


def training_curve(rows: list, path) -> None:
    """Loss components against step from parsed training-log rows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        steps = np.array([int(r["step"]) for r in rows])
        for key in ("recon", "dis", "style", "total"):
            y = np.array([_number(r[key]) for r in rows])
            if np.any(np.abs(y) > 0):
                ax.plot(steps, y, lw=1.0, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
