"""Static PNG figures of 2-D samples and sampler trajectories."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InputError  # noqa: E402

_META = {"Software": None}  # keep renderer version strings out of the file


def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise InputError("nothing to plot")
    if a.ndim != 2 or a.shape[1] != 2:
        raise InputError("plots need [n, 2] arrays")
    return a


def emit_plot(panels: dict, path: str | Path, trajectories: dict | None = None, centers=None, lim: float = 6.0) -> Path:
    """One scatter panel per entry of ``panels`` (title -> [n, 2] samples), side by side.

    ``trajectories`` maps a panel title to a [steps, m, 2] array drawn as
    thin paths over that panel.
    """
    if not panels:
        raise InputError("nothing to plot")
    pts = {k: _points(v) for k, v in panels.items()}
    n = len(pts)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, (title, x) in zip(axes[0], pts.items()):
        ax.scatter(x[:, 0], x[:, 1], s=2, alpha=0.4, color="tab:blue", rasterized=True)
        if trajectories and title in trajectories:
            tr = np.asarray(trajectories[title], dtype=np.float64)
            for j in range(tr.shape[1]):
                ax.plot(tr[:, j, 0], tr[:, j, 1], lw=0.6, color="tab:orange", alpha=0.7)
        if centers is not None:
            c = np.asarray(centers)
            ax.scatter(c[:, 0], c[:, 1], marker="x", color="k", s=20)
        ax.set_title(title, fontsize=9)
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
        ax.set_aspect("equal")
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path
