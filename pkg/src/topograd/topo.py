"""Closed-form topological derivative of J = int u^2 at single points and grids."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import assembly as asm
from .assembly import NodalField
from .errors import ArgumentError, LookupError_, PatchError, TdPointError
from .exterior import (ExteriorNumerics, PolarisationMatrix, disk_polarisation_analytic,
                       polarisation_matrix)
from .mesh import MATRIX, InclusionShape, Mesh2D, _segments_distance, locate_point
from .pde import MaterialSpec

POL_SOURCES = ("numeric", "analytic_disk")


class PolarisationCache:
    """Polarisation matrices keyed on the frozen coefficients, shape, mode and numerics."""

    def __init__(self):
        self._store: dict = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(beta1, beta2, shape, mode, source, numerics):
        r = lambda b: tuple(np.round(np.asarray(b, dtype=float), 12).ravel().tolist())  # noqa: E731
        return (r(beta1), r(beta2), shape.placed((0.0, 0.0), 1.0).key(), mode, source, numerics)

    def get(self, beta1, beta2, shape: InclusionShape, mode: str, source: str = "numeric",
            numerics: ExteriorNumerics = ExteriorNumerics()) -> PolarisationMatrix:
        if source not in POL_SOURCES:
            raise ArgumentError(f"unknown polarisation source {source!r}")
        k = self.key(beta1, beta2, shape, mode, source, numerics)
        with self._lock:
            if k in self._store:
                self.hits += 1
                return self._store[k]
        if source == "analytic_disk":
            if shape.kind != "disk":
                raise ArgumentError("analytic polarisation is only available for the disk")
            b1, b2 = np.asarray(beta1, dtype=float), np.asarray(beta2, dtype=float)
            if not (np.allclose(b1, b1[0, 0] * np.eye(2)) and np.allclose(b2, b2[0, 0] * np.eye(2))):
                raise ArgumentError("analytic polarisation needs scalar coefficients")
            P = disk_polarisation_analytic(float(b1[0, 0]), float(b2[0, 0]), mode)
        else:
            P = polarisation_matrix(beta1, beta2, shape, mode, numerics)
        with self._lock:
            self.misses += 1
            self._store.setdefault(k, P)
            return self._store[k]


DEFAULT_CACHE = PolarisationCache()


@dataclass
class TdSample:
    z: tuple
    u_z: float
    q_z: float
    grad_u: np.ndarray
    grad_q: np.ndarray
    pol: PolarisationMatrix
    term_dlG: float
    term_R: float
    value: float
    mode: str = "transmission"

    def as_row(self):
        return {"x": self.z[0], "y": self.z[1], "value": self.value, "term_dlG": self.term_dlG,
                "term_R": self.term_R, "skipped_reason": ""}


def _clearance(mesh: Mesh2D, z) -> float:
    """Distance from z to the outer boundary and every material interface."""
    edges, _ = mesh.boundary_edges
    a, b = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
    return float(_segments_distance(np.atleast_2d(z), a, b).min())


def _point_data(u: NodalField, q: NodalField, z, patch_factor: float, exclusion_factor: float):
    mesh = u.mesh
    z = np.asarray(z, dtype=float)
    try:
        k, lam = locate_point(mesh, z)
    except LookupError_ as exc:
        raise TdPointError(f"point {z.tolist()} outside the domain") from exc
    if mesh.region[k] != MATRIX:
        raise TdPointError(f"point {z.tolist()} is inside an inclusion")
    r = patch_factor * mesh.local_h(k)
    if _clearance(mesh, z) < exclusion_factor * r:
        raise TdPointError(f"point {z.tolist()} closer than {exclusion_factor * r:.3g} "
                           "to a boundary or interface")
    tri = mesh.triangles[k]
    try:
        gu = asm.recover_gradient(mesh, u, z, r)
        gq = asm.recover_gradient(mesh, q, z, r)
    except PatchError as exc:
        raise TdPointError(str(exc)) from exc
    return float(lam @ u.values[tri]), float(lam @ q.values[tri]), gu, gq


def td_at_point(u: NodalField, q: NodalField, material: MaterialSpec, shape: InclusionShape, z,
                pol_source: str = "numeric", numerics: ExteriorNumerics = ExteriorNumerics(),
                cache: PolarisationCache | None = None, patch_factor: float = 4.0,
                exclusion_factor: float = 2.0) -> TdSample:
    """Topological derivative for nucleating an inclusion of phase 1 at z."""
    asm._check_field(u.mesh, q)
    cache = DEFAULT_CACHE if cache is None else cache
    uz, qz, gu, gq = _point_data(u, q, z, patch_factor, exclusion_factor)
    zz = np.asarray(z, dtype=float)
    b1, b2 = material.beta1, material.beta2
    db = b1 - b2
    f1 = float(material.f1(zz))
    f2 = float(material.f2(zz))
    dlg = float((db @ gu) @ gq + (material.rho1.value(uz) - material.rho2.value(uz)) * qz
                - (f1 - f2) * qz)
    zeta = -db @ gq
    P = cache.get(b1, b2, shape, "transmission", pol_source, numerics)
    R = float((db @ gu) @ (P.entries @ zeta))
    return TdSample(tuple(zz.tolist()), uz, qz, gu, gq, P, dlg, R, dlg + R, "transmission")


def td_at_point_extremal(u: NodalField, q: NodalField, material: MaterialSpec,
                         shape: InclusionShape, z, pol_source: str = "numeric",
                         numerics: ExteriorNumerics = ExteriorNumerics(),
                         cache: PolarisationCache | None = None, patch_factor: float = 4.0,
                         exclusion_factor: float = 2.0) -> TdSample:
    """Topological derivative for drilling a Neumann hole at z.

    The cost integrates over D minus the hole, so the point term carries
    -u(z)^2 in addition to the terms of the weak form.
    """
    asm._check_field(u.mesh, q)
    cache = DEFAULT_CACHE if cache is None else cache
    uz, qz, gu, gq = _point_data(u, q, z, patch_factor, exclusion_factor)
    zz = np.asarray(z, dtype=float)
    b2 = material.beta2
    f2 = float(material.f2(zz))
    dlg = float(-uz * uz - (b2 @ gu) @ gq - material.rho2.value(uz) * qz + f2 * qz)
    zeta = b2 @ gq
    P = cache.get(b2, b2, shape, "extremal", pol_source, numerics)
    R = float(-(b2 @ gu) @ (P.entries @ zeta))
    return TdSample(tuple(zz.tolist()), uz, qz, gu, gq, P, dlg, R, dlg + R, "extremal")


def td_combined(sample: TdSample, material: MaterialSpec) -> float:
    """Value through the single-matrix form ((b1-b2) grad u).(I - P (b1-b2)) grad q + ..."""
    z = np.asarray(sample.z)
    uz, qz = sample.u_z, sample.q_z
    P = sample.pol.entries
    if sample.mode == "extremal":
        b2 = material.beta2
        return float(-(b2 @ sample.grad_u) @ ((np.eye(2) + P @ b2) @ sample.grad_q)
                     - uz * uz - material.rho2.value(uz) * qz + float(material.f2(z)) * qz)
    db = material.beta1 - material.beta2
    return float((db @ sample.grad_u) @ ((np.eye(2) - P @ db) @ sample.grad_q)
                 + (material.rho1.value(uz) - material.rho2.value(uz)) * qz
                 - (float(material.f1(z)) - float(material.f2(z))) * qz)


@dataclass
class TdField:
    points: np.ndarray
    samples: list  # TdSample or None
    reasons: list  # "" for evaluated points
    shape: tuple = ()

    @property
    def values(self) -> np.ndarray:
        return np.array([s.value if s is not None else np.nan for s in self.samples])

    def rows(self):
        out = []
        for p, s, why in zip(self.points, self.samples, self.reasons):
            if s is None:
                out.append({"x": float(p[0]), "y": float(p[1]), "value": float("nan"),
                            "term_dlG": float("nan"), "term_R": float("nan"), "skipped_reason": why})
            else:
                out.append(s.as_row())
        return out

    def argmin(self) -> int:
        return int(np.nanargmin(self.values))


def grid_points(grid) -> tuple[np.ndarray, tuple]:
    """``grid`` is (x0, x1, y0, y1, nx, ny) for cell-centred points, or an (n, 2) array."""
    if isinstance(grid, (tuple, list)) and len(grid) == 6 and np.ndim(grid[0]) == 0:
        x0, x1, y0, y1, nx, ny = grid
        nx, ny = int(nx), int(ny)
        xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
        ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()]), (ny, nx)
    pts = np.asarray(grid, dtype=float).reshape(-1, 2)
    return pts, (len(pts),)


def td_field(u: NodalField, q: NodalField, material: MaterialSpec, shape: InclusionShape, grid,
             mode: str = "transmission", pol_source: str = "numeric",
             numerics: ExteriorNumerics = ExteriorNumerics(), cache: PolarisationCache | None = None,
             patch_factor: float = 4.0, exclusion_factor: float = 2.0) -> TdField:
    """Evaluate the TD on a grid; points failing the locality checks are skipped."""
    pts, shp = grid_points(grid)
    cache = PolarisationCache() if cache is None else cache
    fn = td_at_point_extremal if mode == "extremal" else td_at_point
    samples, reasons = [], []
    for p in pts:
        try:
            s = fn(u, q, material, shape, p, pol_source, numerics, cache, patch_factor, exclusion_factor)
            samples.append(s)
            reasons.append("")
        except TdPointError as exc:
            samples.append(None)
            reasons.append(str(exc))
    return TdField(pts, samples, reasons, shp)
