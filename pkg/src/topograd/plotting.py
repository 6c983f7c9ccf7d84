"""Static figures for the CLI reports (Agg backend, PNG files)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

from .mesh import HOLE, Mesh2D  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "image.cmap": "viridis",
    # keep PNG bytes reproducible
    "svg.hashsalt": "topograd",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_mesh(mesh: Mesh2D, path, title: str = "mesh") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 5))
        tri = mtri.Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles)
        ax.tripcolor(tri, facecolors=mesh.region.astype(float), cmap="Pastel1", vmin=0, vmax=8)
        ax.triplot(tri, lw=0.2, color="k")
        ax.set_aspect("equal")
        ax.set_title(f"{title} ({mesh.n_vertices} vertices)")
        return _save(fig, path)


def plot_field(mesh: Mesh2D, values, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.4, 4.6))
        keep = mesh.region != HOLE
        tri = mtri.Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles[keep])
        tc = ax.tripcolor(tri, np.asarray(values, dtype=float), shading="gouraud")
        fig.colorbar(tc, ax=ax, shrink=0.85)
        ax.set_aspect("equal")
        ax.set_title(title)
        return _save(fig, path)


def plot_td_field(points, values, grid_shape, path, title: str = "topological derivative") -> Path:
    pts = np.asarray(points)
    vals = np.asarray(values, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.4, 4.6))
        if len(grid_shape) == 2:
            ny, nx = grid_shape
            X = pts[:, 0].reshape(ny, nx)
            Y = pts[:, 1].reshape(ny, nx)
            im = ax.pcolormesh(X, Y, np.ma.masked_invalid(vals.reshape(ny, nx)), shading="nearest")
        else:
            im = ax.scatter(pts[:, 0], pts[:, 1], c=vals, s=30)
        fig.colorbar(im, ax=ax, shrink=0.85)
        if np.isfinite(vals).any():
            k = int(np.nanargmin(vals))
            ax.plot(*pts[k], "r+", ms=10, label="min")
            ax.legend(loc="upper right")
        ax.set_aspect("equal")
        ax.set_title(title)
        return _save(fig, path)


def plot_convergence(eps, errors: dict, path, title: str = "", ylabel: str = "relative error") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.6))
        eps = np.asarray(eps, dtype=float)
        for label, err in errors.items():
            ax.loglog(eps, np.asarray(err, dtype=float), "o-", label=label)
        ref = eps / eps[0]
        first = next(iter(errors.values()), None)
        if first is not None and len(first):
            ax.loglog(eps, ref * float(first[0]), "k--", lw=0.8, label="slope 1")
        ax.set_xlabel(r"$\varepsilon$")
        ax.set_ylabel(ylabel)
        ax.legend()
        ax.grid(True, which="both", lw=0.3)
        ax.set_title(title)
        return _save(fig, path)


def plot_truncation(R, P11, path, target: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.6))
        R = np.asarray(R, dtype=float)
        P11 = np.asarray(P11, dtype=float)
        if target is not None:
            ax.loglog(R, np.abs(P11 - target), "o-", label=r"$|P_{11}-P_{11}^{\rm exact}|$")
            ax.set_ylabel("error")
        else:
            ax.semilogx(R, P11, "o-", label=r"$P_{11}$")
            ax.set_ylabel(r"$P_{11}$")
        ax.set_xlabel("truncation radius R")
        ax.legend()
        ax.grid(True, which="both", lw=0.3)
        return _save(fig, path)
