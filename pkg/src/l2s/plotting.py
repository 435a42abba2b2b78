"""Report figures: training curves, metric summaries and sample grids."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .render import quantize  # noqa: E402

_STYLE = {
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(logs: dict[str, Sequence[dict]], path: str | Path, smooth: int = 50) -> Path:
    """One line per training log (rows of {step, loss}), smoothed by a running mean."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for label, rows in logs.items():
            if not rows:
                continue
            steps = np.array([r["step"] for r in rows])
            loss = np.array([r["loss"] for r in rows], dtype=np.float64)
            k = max(1, min(smooth, len(loss)))
            ax.plot(steps[k - 1:], np.convolve(loss, np.ones(k) / k, mode="valid"), label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def metric_bars(rows: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Horizontal bar chart of metric values with the value printed at each bar."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 0.4 * len(rows) + 1.2))
        names = [r["metric"] for r in rows]
        vals = [r["value"] for r in rows]
        y = np.arange(len(rows))
        ax.barh(y, vals, color="#4c72b0")
        ax.set_yticks(y, names)
        ax.invert_yaxis()
        for yi, v in zip(y, vals):
            ax.annotate(f"{v:.4g}", (v, yi), xytext=(3, 0), textcoords="offset points", va="center")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def sample_grid(rows: dict[str, np.ndarray], path: str | Path) -> Path:
    """Grid of latent frames: one row per label, columns are frames."""
    labels = list(rows)
    n_cols = max(v.shape[0] for v in rows.values())
    rgb = quantize(np.concatenate([rows[k] for k in labels]))
    with plt.rc_context({**_STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(len(labels), n_cols, figsize=(1.3 * n_cols, 1.4 * len(labels)),
                                 squeeze=False)
        i = 0
        for r, label in enumerate(labels):
            for c in range(n_cols):
                ax = axes[r, c]
                ax.set_xticks([])
                ax.set_yticks([])
                if c < rows[label].shape[0]:
                    ax.imshow(rgb[i], interpolation="nearest")
                    i += 1
                else:
                    ax.axis("off")
            axes[r, 0].set_ylabel(label, fontsize=7)
        return _save(fig, path)
