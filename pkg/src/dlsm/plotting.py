"""Static figures for the CLI report paths (PNG via the Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ScoreField  # noqa: E402
from .oracle import RenormResult  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
CLASS_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red")
KIND_COLORS = {"ce": "tab:red", "dlsm": "tab:green", "total": "tab:blue"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def _panels(n: int, width: float = 3.0, height: float = 3.2):
    fig, axes = plt.subplots(1, n, figsize=(width * n, height), squeeze=False)
    return fig, axes[0]


def score_fields(fields: Sequence[tuple[str, ScoreField]], path, points=None, labels=None) -> Path:
    """One quiver panel per field; arrows normalized, color shows log magnitude."""
    with plt.rc_context(STYLE):
        fig, axes = _panels(len(fields))
        for ax, (title, fld) in zip(axes, fields):
            v = fld.vectors
            mag = np.linalg.norm(v, axis=1)
            unit = v / np.where(mag > 0, mag, 1.0)[:, None]
            ax.quiver(fld.grid_points[:, 0], fld.grid_points[:, 1], unit[:, 0], unit[:, 1],
                      np.log10(mag + 1e-12), cmap="viridis", scale=40, width=0.004)
            if points is not None:
                for c in np.unique(labels):
                    sel = labels == c
                    ax.scatter(points[sel, 0], points[sel, 1], s=1, alpha=0.3,
                               color=CLASS_COLORS[int(c) % len(CLASS_COLORS)])
            ax.set_title(title)
            ax.set_aspect("equal")
        return _save(fig, path)


def samples(panels: Mapping[str, tuple[np.ndarray, np.ndarray]], path, bounds=None) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = _panels(len(panels))
        for ax, (title, (pts, labels)) in zip(axes, panels.items()):
            for c in np.unique(labels):
                sel = labels == c
                ax.scatter(pts[sel, 0], pts[sel, 1], s=2, alpha=0.5,
                           color=CLASS_COLORS[int(c) % len(CLASS_COLORS)], label=f"c{int(c) + 1}")
            if bounds is not None:
                ax.set_xlim(*bounds[0])
                ax.set_ylim(*bounds[1])
            ax.set_title(title)
            ax.set_aspect("equal")
        axes[0].legend(loc="upper right", markerscale=4)
        return _save(fig, path)


def ablation(summary: Mapping[str, Mapping[str, Mapping[str, np.ndarray]]], path) -> Path:
    """Score error and cross-entropy against iteration with 95% bands."""
    with plt.rc_context(STYLE):
        fig, axes = _panels(2, width=4.0, height=3.0)
        for kind, curves in summary.items():
            color = KIND_COLORS.get(kind)
            for ax, key in zip(axes, ("score_error", "cross_entropy")):
                c = curves[key]
                ax.plot(c["iteration"], c["mean"], color=color, label=kind)
                ax.fill_between(c["iteration"], c["lo"], c["hi"], color=color, alpha=0.2, lw=0)
        axes[0].set_ylabel("class-averaged E[D_L]")
        axes[1].set_ylabel("cross-entropy")
        for ax in axes:
            ax.set_xlabel("iteration")
        axes[0].legend()
        return _save(fig, path)


def renorm(results: Mapping[float, RenormResult], path) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = _panels(len(results), width=3.2, height=2.6)
        for ax, (alpha, res) in zip(axes, results.items()):
            ax.plot(res.x, res.prior, color="0.6", lw=1, label="p(x)")
            for i, (post, ren) in enumerate(zip(res.posterior, res.renormalized)):
                color = CLASS_COLORS[i]
                ax.plot(res.x, post, color=color, ls="--", lw=1)
                ax.plot(res.x, ren, color=color, lw=1.5, label=f"y{i + 1}")
            ax.set_title(f"alpha = {alpha:g}")
            ax.set_xlabel("x")
        axes[0].legend()
        return _save(fig, path)


def loss_trace(iterations, losses, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, axes = _panels(1, width=4.0, height=2.8)
        ax = axes[0]
        ax.plot(iterations, losses, lw=0.6)
        if np.all(np.asarray(losses) > 0):
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(title)
        return _save(fig, path)
