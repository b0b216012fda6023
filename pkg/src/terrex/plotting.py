"""Report figures: coverage histograms and bird's-eye views of predictions."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from terrex.dataset import BevMaskSet  # noqa: E402

# legend colours
INPUT_COLOR = "#0000ff"
PRED_COLOR = "#00c000"
GT_COLOR = "#008080"

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# no Software/date chunks, so identical inputs give identical PNG bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def histogram_figure(report, path) -> None:
    """Grouped bars of the per-scene CD histograms, one group per bin."""
    rows = [r for r in report.rows if not r.error]
    labels = [f"<{e:g}" for e in report.edges] + [f">={report.edges[-1]:g}"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        x = np.arange(len(labels))
        width = 0.8 / max(1, len(rows))
        for i, r in enumerate(rows):
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, r.histogram, width,
                   label=r.scene_id)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_xlabel("ground truth to nearest prediction (m)")
        ax.set_ylabel("ground-truth points (%)")
        ax.set_ylim(0, 100)
        if rows:
            ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def bev_figure(path, inputs=None, predictions=None, truth=None,
               masks: BevMaskSet = None, title: str = "") -> None:
    """Top-down scatter: input blue, prediction green, ground truth teal."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        if masks is not None:
            ox, oy = masks.projection.origin_xy
            mpp = masks.projection.meters_per_pixel
            for poly in masks.polygons:
                closed = np.vstack([poly, poly[:1]])
                ax.plot(ox + closed[:, 0] * mpp, oy + closed[:, 1] * mpp,
                        color="0.6", lw=0.8)
        for pts, color, label, size in ((inputs, INPUT_COLOR, "input", 2),
                                        (truth, GT_COLOR, "ground truth", 4),
                                        (predictions, PRED_COLOR, "prediction", 6)):
            if pts is not None and len(pts):
                pts = np.asarray(pts)
                ax.scatter(pts[:, 0], pts[:, 1], s=size, c=color, label=label,
                           linewidths=0)
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, loc="best", markerscale=2)
        fig.tight_layout()
        _save(fig, path)
