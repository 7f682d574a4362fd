"""Static figures: metric bar charts and top-down occupancy slices (PNG, deterministic)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}
METRICS = ("o_acc", "ie_acc", "ie_rec")


def metric_bars(report, out_dir) -> list:
    """One bar chart per band; not-applicable metrics are drawn as empty bars labelled n/a."""
    out_dir = Path(out_dir)
    paths = []
    for name, bm in sorted(report.bands.items()):
        vals = [getattr(bm, m) for m in METRICS]
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        ax.bar(METRICS, [v if v is not None else 0.0 for v in vals], color="#4c72b0")
        for i, v in enumerate(vals):
            ax.text(i, (v or 0.0) + 0.02, "n/a" if v is None else f"{v:.3f}", ha="center")
        ax.set_ylim(0, 1.1)
        ax.set_title(f"band {name}")
        fig.tight_layout()
        path = out_dir / f"metrics_{name}.png"
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
        paths.append(path)
    return paths


def slice_images(grid, pred, gt, out_dir) -> list:
    """Top-down view of each slice: prediction and ground truth side by side."""
    out_dir = Path(out_dir)
    P = grid.scatter(np.asarray(pred, dtype=bool)).astype(float)
    G = grid.scatter(np.asarray(gt, dtype=bool)).astype(float)
    foot = grid.footprint
    ns = len(grid.slice_heights)
    fig, axes = plt.subplots(2, ns, figsize=(3 * ns, 6), dpi=100, squeeze=False)
    extent = (-grid.extents[1] / 2, grid.extents[1] / 2, grid.band.d_min,
              grid.band.d_min + grid.extents[0])
    for s, h in enumerate(grid.slice_heights):
        for r, (arr, label) in enumerate(((P, "pred"), (G, "gt"))):
            img = np.where(foot, arr[s], np.nan)
            ax = axes[r, s]
            # lateral axis points right; flip rows so forward points up
            ax.imshow(img[::-1], extent=extent, cmap="viridis", vmin=0, vmax=1,
                      interpolation="nearest", aspect="auto")
            ax.set_title(f"{label} z={h:g} m")
            ax.set_xlabel("lateral (m)")
            ax.set_ylabel("forward (m)")
    fig.tight_layout()
    path = out_dir / f"slices_{grid.band.name}.png"
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return [path]
