"""SVG scene figures: map, past tracks, ground truth, top modes and goal points.

Every artist carries a ``gid`` so the SVG can be inspected structurally:
``feasible``, ``past-<agent_id>``, ``current``, ``future``, ``mode-<i>``,
``conf-<i>``, ``range`` and ``goals``. Output is byte-stable for identical
inputs (fixed hash salt, no date metadata).
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Circle

from .features import GoalSet
from .models import PredictionSet
from .scene import SceneBundle

ROLE_STYLE = {
    "target": dict(color="#d62728", lw=2.0, ls="-"),
    "ego": dict(color="#1f77b4", lw=1.6, ls="--"),
    "other": dict(color="#7f7f7f", lw=1.2, ls="-."),
}
MODE_COLORS = ("#2ca02c", "#ff7f0e", "#9467bd")
TOP_MODES = 3

RC = {
    "svg.hashsalt": "effmp",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.linewidth": 0.6,
    "figure.dpi": 100,
}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _view(bundle: SceneBundle, extra: Sequence[np.ndarray], margin: float = 5.0) -> tuple[float, float, float, float]:
    pts = [t.observed for t in bundle.scene.tracks] + [np.atleast_2d(e) for e in extra if len(e)]
    if bundle.scene.future is not None:
        pts.append(bundle.scene.future)
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0) - margin, allp.max(axis=0) + margin
    g = bundle.grid
    lo = np.maximum(lo, g.origin)
    hi = np.minimum(hi, np.asarray(g.origin) + g.resolution * np.array([g.width, g.height]))
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def _draw_grid(ax, bundle: SceneBundle, view) -> None:
    g = bundle.grid
    x0, y0 = g.origin
    res = g.resolution
    i0 = max(0, int(np.floor((view[0] - x0) / res)))
    i1 = min(g.width, int(np.ceil((view[1] - x0) / res)))
    j0 = max(0, int(np.floor((view[2] - y0) / res)))
    j1 = min(g.height, int(np.ceil((view[3] - y0) / res)))
    if i1 <= i0 or j1 <= j0:
        return
    cells = g.cells[j0:j1, i0:i1].astype(float)
    ax.imshow(
        np.where(cells > 0, 1.0, np.nan),
        origin="lower",
        extent=(x0 + i0 * res, x0 + i1 * res, y0 + j0 * res, y0 + j1 * res),
        cmap="Greys",
        vmin=0.0,
        vmax=6.0,
        interpolation="nearest",
        gid="feasible",
        zorder=0,
    )


def plot_scene(
    bundle: SceneBundle,
    out: str | Path,
    prediction: PredictionSet | None = None,
    goals: GoalSet | None = None,
) -> Path:
    """Render one scene to ``out`` (SVG). Only the three most confident modes are drawn."""
    scene = bundle.scene
    top = prediction.top(min(TOP_MODES, prediction.k)) if prediction is not None else None
    extra = [] if top is None else [top.trajectories.reshape(-1, 2)]
    if goals is not None:
        c = np.asarray(goals.center)
        extra.append(np.array([c - goals.radius, c + goals.radius]))
    with plt.rc_context(RC):
        fig = Figure(figsize=(5.0, 5.0))
        ax = fig.add_subplot(1, 1, 1)
        view = _view(bundle, extra)
        _draw_grid(ax, bundle, view)
        for t in scene.tracks:
            style = ROLE_STYLE[t.role]
            pts = t.observed[t.valid_mask]
            ax.plot(pts[:, 0], pts[:, 1], gid=f"past-{t.agent_id}", label=t.role, zorder=3, **style)
        cur = np.array([t.observed[-1] for t in scene.tracks])
        ax.scatter(cur[:, 0], cur[:, 1], s=18, c=[ROLE_STYLE[t.role]["color"] for t in scene.tracks], marker="s", gid="current", zorder=5)
        if scene.future is not None:
            fut = np.vstack([scene.target.observed[-1], scene.future])
            ax.plot(fut[:, 0], fut[:, 1], color="black", lw=1.4, ls=":", gid="future", label="ground truth", zorder=4)
        if top is not None:
            anchor = scene.target.observed[-1]
            for i, (traj, conf) in enumerate(zip(top.trajectories, top.confidences)):
                path = np.vstack([anchor, traj])
                color = MODE_COLORS[i % len(MODE_COLORS)]
                ax.plot(path[:, 0], path[:, 1], color=color, lw=1.4, gid=f"mode-{i}", label=f"mode {i}", zorder=4)
                ax.text(traj[-1, 0], traj[-1, 1], f"{conf:.2f}", color=color, fontsize=7, gid=f"conf-{i}", zorder=6)
        if goals is not None:
            ax.add_patch(Circle(goals.center, goals.radius, fill=False, ec="#17becf", lw=0.8, ls="--", gid="range", zorder=2))
            if len(goals):
                ax.scatter(goals.points[:, 0], goals.points[:, 1], s=6, c="#17becf", marker="o", gid="goals", zorder=2)
        ax.set_xlim(view[0], view[1])
        ax.set_ylim(view[2], view[3])
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title(scene.scene_id)
        ax.legend(loc="upper right", fontsize=6, frameon=False)
        fig.tight_layout()
        return _save(fig, out)


def plot_metric_histogram(rows: Sequence[dict], out: str | Path, bins: int = 20) -> Path:
    """Per-scene ADE / minADE / FDE / minFDE distributions from an evaluation."""
    keys = ("ade", "min_ade", "fde", "min_fde")
    with plt.rc_context(RC):
        fig = Figure(figsize=(6.0, 4.0))
        axes = fig.subplots(2, 2)
        for ax, key in zip(axes.ravel(), keys):
            vals = np.array([r[key] for r in rows])
            ax.hist(vals, bins=bins, color="#4c72b0", gid=f"hist-{key}")
            ax.axvline(vals.mean(), color="#c44e52", lw=1.0)
            ax.set_title(f"{key} (mean {vals.mean():.3f} m)")
            ax.set_xlabel("m")
        fig.tight_layout()
        return _save(fig, out)
