"""Exterior corrector problems and weak polarisation matrices.

The whole-space problem is truncated to the ball B_R with Q = 0 on its
boundary.  The right-hand side int_omega zeta . grad(psi) is assembled as the
interface functional int_{d omega} (zeta . nu) psi, which is the same number
for P1 test functions and constant zeta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import assembly as asm
from .assembly import NodalField, SparseSystem
from .errors import ArgumentError, MaterialError
from .mesh import HOLE, INCLUSION, MATRIX, OUTER, InclusionShape, Mesh2D, build_ball_mesh
from .pde import as_matrix, coercivity_bounds

MODES = ("transmission", "extremal")


@dataclass(frozen=True)
class ExteriorNumerics:
    """Truncation radius (absolute, or ``R_factor * diam`` when ``R`` is None),
    interface edge length, radial grading and uniform refinement level."""

    R: float | None = None
    R_factor: float = 25.0
    h_interface: float = 0.05
    grading: float = 1.2
    level: int = 0

    def radius(self, shape: InclusionShape) -> float:
        return float(self.R) if self.R is not None else self.R_factor * shape.diameter()


@dataclass(frozen=True, eq=False)
class ExteriorProblem:
    beta1_z: np.ndarray
    beta2_z: np.ndarray
    shape: InclusionShape
    zeta: np.ndarray
    R: float = 50.0
    mode: str = "transmission"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ArgumentError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "beta1_z", as_matrix(self.beta1_z))
        object.__setattr__(self, "beta2_z", as_matrix(self.beta2_z))
        z = np.asarray(self.zeta, dtype=float)
        if z.shape != (2,) or not np.all(np.isfinite(z)):
            raise ArgumentError("zeta must be a finite 2-vector")
        object.__setattr__(self, "zeta", z)
        if coercivity_bounds(self.beta2_z)[0] <= 0:
            raise MaterialError("beta2(z) is not uniformly elliptic")
        if self.mode == "transmission" and coercivity_bounds(self.beta1_z)[0] <= 0:
            raise MaterialError("beta1(z) is not uniformly elliptic")


@dataclass(eq=False)
class PolarisationMatrix:
    entries: np.ndarray
    mode: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)

    def __matmul__(self, v):
        return self.entries @ v

    @property
    def asymmetry(self) -> float:
        """||P - P^T|| / ||P||."""
        return float(np.linalg.norm(self.entries - self.entries.T) / np.linalg.norm(self.entries))

    @property
    def min_sym_eig(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.entries + self.entries.T))[0])

    def properties(self, symmetric_data: bool = True, tol: float = 1e-3) -> dict:
        out = {"positive_definite": self.min_sym_eig > 0, "min_sym_eig": self.min_sym_eig,
               "asymmetry": self.asymmetry}
        if symmetric_data:
            out["symmetric"] = self.asymmetry <= tol
        return out


_MESH_CACHE: dict = {}


def exterior_mesh(shape: InclusionShape, R: float, numerics: ExteriorNumerics) -> Mesh2D:
    key = (shape.key(), float(R), numerics.h_interface, numerics.grading, numerics.level)
    m = _MESH_CACHE.get(key)
    if m is None:
        m = build_ball_mesh(R, shape.placed((0.0, 0.0), 1.0), numerics.grading, numerics.h_interface)
        for _ in range(numerics.level):
            from .mesh import refine_uniform
            m = refine_uniform(m)
        if len(_MESH_CACHE) > 16:
            _MESH_CACHE.clear()
        _MESH_CACHE[key] = m
    return m


def interface_load(mesh: Mesh2D, zetas) -> np.ndarray:
    """Columns ``int_{d omega} (zeta . nu) phi_i`` for each zeta (nu points out of omega)."""
    zetas = np.atleast_2d(np.asarray(zetas, dtype=float))
    edges, owner = mesh.edges, mesh.edge_triangles
    two = owner[:, 1] >= 0
    ra = mesh.region[owner[:, 0]]
    rb = np.where(two, mesh.region[np.maximum(owner[:, 1], 0)], -1)
    inside = (ra == INCLUSION) | (ra == HOLE)
    other = (rb == INCLUSION) | (rb == HOLE)
    sel = np.flatnonzero(two & (inside != other))
    e = edges[sel]
    t_in = np.where(inside[sel], owner[sel, 0], owner[sel, 1])
    p, q = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    d = q - p
    n = np.column_stack([d[:, 1], -d[:, 0]])  # length-weighted normal
    # orient away from the inclusion triangle
    c = mesh.centroids[t_in]
    flip = ((0.5 * (p + q) - c) * n).sum(1) < 0
    n[flip] *= -1
    out = np.zeros((mesh.n_vertices, len(zetas)))
    for k, z in enumerate(zetas):
        flux = 0.5 * (n @ z)
        out[:, k] = np.bincount(e.ravel(), np.repeat(flux, 2), minlength=mesh.n_vertices)
    return out


class _Coeffs:
    """Two-phase coefficient A as a material with zero nonlinearity and source."""

    def __init__(self, beta1, beta2):
        from .pde import Nonlinearity, Source
        self._z = (Nonlinearity(), Source())
        self.b1, self.b2 = beta1, beta2

    def region(self, tag):
        return (self.b1 if tag == INCLUSION else self.b2), *self._z


def _solve_columns(mesh, problem_like, zetas, mode, lin_tol=asm.LIN_TOL):
    coeffs = _Coeffs(problem_like[0], problem_like[1])
    rhs = interface_load(mesh, zetas)
    if mode == "transmission":
        A = asm.assemble_jacobian(mesh, coeffs, np.zeros(mesh.n_vertices))
        sys_ = asm.apply_dirichlet(SparseSystem(A.matrix, rhs, symmetric=A.symmetric, mesh=mesh), OUTER)
        # b(psi, Q) with A on the left: solve with the transpose
        sys_ = SparseSystem(sys_.matrix.T.tocsr(), sys_.rhs, sys_.constrained, sys_.values,
                            sys_.symmetric, mesh)
        return asm.solve_linear(sys_, lin_tol)
    # extremal stage 1: annulus B_R minus omega, natural condition on d omega
    annulus = np.flatnonzero(mesh.region != HOLE)
    A = asm.assemble_jacobian(mesh, coeffs, np.zeros(mesh.n_vertices), tris=annulus)
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.triangles[annulus].ravel()] = True
    fixed = np.union1d(mesh.marked_vertices(OUTER), np.flatnonzero(~used))
    sys_ = SparseSystem(A.matrix.T.tocsr(), rhs, symmetric=A.symmetric, mesh=mesh)
    Q = asm.solve_linear(asm.apply_dirichlet(sys_, None, 0.0, vertices=fixed), lin_tol)
    # stage 2: Dirichlet extension into omega with the trace from stage 1
    hole = np.flatnonzero(mesh.region == HOLE)
    Ah = asm.assemble_jacobian(mesh, coeffs, np.zeros(mesh.n_vertices), tris=hole)
    inner = np.zeros(mesh.n_vertices, dtype=bool)
    inner[mesh.triangles[hole].ravel()] = True
    inner[used] = False
    keep = np.flatnonzero(~inner)
    out = np.empty_like(Q)
    for k in range(Q.shape[1]):
        s2 = SparseSystem(Ah.matrix.T.tocsr(), np.zeros(mesh.n_vertices), symmetric=Ah.symmetric)
        out[:, k] = asm.solve_linear(asm.apply_dirichlet(s2, None, Q[keep, k], vertices=keep), lin_tol)
    return out


def _ext_mesh(problem: ExteriorProblem, numerics: ExteriorNumerics) -> Mesh2D:
    m = exterior_mesh(problem.shape, problem.R, numerics)
    if problem.mode == "extremal":
        m = m.with_regions(np.where(m.region == INCLUSION, HOLE, m.region))
    return m


def solve_exterior(problem: ExteriorProblem, numerics: ExteriorNumerics = ExteriorNumerics()) -> NodalField:
    """Truncated transmission corrector Q on B_R."""
    if problem.mode != "transmission":
        raise ArgumentError("solve_exterior handles the transmission mode")
    mesh = _ext_mesh(problem, numerics)
    Q = _solve_columns(mesh, (problem.beta1_z, problem.beta2_z), problem.zeta[None, :], "transmission")
    return NodalField(mesh, Q[:, 0], "Q", {"R": problem.R, "mode": problem.mode})


def solve_exterior_extremal(problem: ExteriorProblem,
                            numerics: ExteriorNumerics = ExteriorNumerics()) -> NodalField:
    """Void corrector: Neumann problem on B_R minus omega, then the harmonic
    (beta2) Dirichlet extension into omega."""
    if problem.mode != "extremal":
        raise ArgumentError("solve_exterior_extremal handles the extremal mode")
    mesh = _ext_mesh(problem, numerics)
    Q = _solve_columns(mesh, (problem.beta2_z, problem.beta2_z), problem.zeta[None, :], "extremal")
    return NodalField(mesh, Q[:, 0], "Q", {"R": problem.R, "mode": problem.mode})


def inclusion_average_gradient(mesh: Mesh2D, values) -> np.ndarray:
    """Area-weighted mean of the P1 gradient over the inclusion (or hole)."""
    tris = np.flatnonzero((mesh.region == INCLUSION) | (mesh.region == HOLE))
    v = np.asarray(values, dtype=float)
    v = v.reshape(mesh.n_vertices, -1)
    g = np.einsum("mia,mik->mak", mesh.basis_gradients[tris], v[mesh.triangles[tris]])
    w = mesh.areas[tris]
    out = np.einsum("m,mak->ak", w, g) / w.sum()
    return out if v.shape[1] > 1 else out[:, 0]


def polarisation_matrix(beta1_z, beta2_z, shape: InclusionShape, mode: str = "transmission",
                        numerics: ExteriorNumerics = ExteriorNumerics()) -> PolarisationMatrix:
    """Weak polarisation matrix; column j is the omega-average of grad Q_{e_j}."""
    if mode not in MODES:
        raise ArgumentError(f"unknown mode {mode!r}")
    shape = shape.placed((0.0, 0.0), 1.0)
    R = numerics.radius(shape)
    b1 = as_matrix(beta2_z if mode == "extremal" else beta1_z)
    prob = ExteriorProblem(b1, beta2_z, shape, np.zeros(2), R, mode)
    mesh = _ext_mesh(prob, numerics)
    Q = _solve_columns(mesh, (prob.beta1_z, prob.beta2_z), np.eye(2), mode)
    P = inclusion_average_gradient(mesh, Q)
    inner = mesh.triangles[(mesh.region == INCLUSION) | (mesh.region == HOLE)]
    h_if = float(mesh.triangle_hmax[(mesh.region == INCLUSION) | (mesh.region == HOLE)].max())
    meta = {"R": R, "h_interface": numerics.h_interface, "h_inclusion_max": h_if,
            "grading": numerics.grading, "level": numerics.level, "n_vertices": mesh.n_vertices,
            "mode": mode, "shape": shape.kind}
    pm = PolarisationMatrix(P, mode, meta)
    sym = bool(np.allclose(prob.beta1_z, prob.beta1_z.T) and np.allclose(prob.beta2_z, prob.beta2_z.T))
    meta.update(pm.properties(sym))
    del inner
    return pm


def disk_polarisation_analytic(beta1, beta2, mode: str = "transmission") -> PolarisationMatrix:
    """Exact weak polarisation matrix of the unit disk for scalar coefficients."""
    if np.ndim(beta1) or np.ndim(beta2):
        raise ArgumentError("analytic disk formula needs scalar coefficients")
    if mode == "transmission":
        if beta1 + beta2 <= 0:
            raise ArgumentError("beta1 + beta2 must be positive")
        return PolarisationMatrix(np.eye(2) / (beta1 + beta2), mode, {"source": "analytic"})
    if mode == "extremal":
        if beta2 <= 0:
            raise ArgumentError("beta2 must be positive")
        return PolarisationMatrix(np.eye(2) / beta2, mode, {"source": "analytic"})
    raise ArgumentError(f"unknown mode {mode!r}")


def disk_polarisation_truncated(beta1: float, beta2: float, R: float) -> float:
    """Diagonal of the transmission matrix for the unit disk when Q = 0 on |x| = R."""
    d = 1.0 / R**2
    return (1.0 - d) / (beta1 * (1.0 - d) + beta2 * (1.0 + d))


def _entries(P):
    return P.entries if isinstance(P, PolarisationMatrix) else np.asarray(P, dtype=float)


def strong_from_weak(P, beta1: float, beta2: float, area: float) -> np.ndarray:
    """Strong matrix from the weak one for scalar coefficients."""
    if beta1 == beta2:
        raise ArgumentError("weak-strong relation degenerates for beta1 == beta2")
    return area * (beta1 - beta2) / beta2 * (np.eye(2) / (beta1 - beta2) - _entries(P))


def weak_from_strong(Pt, beta1: float, beta2: float, area: float) -> np.ndarray:
    if beta1 == beta2:
        raise ArgumentError("weak-strong relation degenerates for beta1 == beta2")
    Pt = np.asarray(Pt, dtype=float)
    return -(1.0 / area) * (beta2 / (beta1 - beta2)) * Pt + np.eye(2) / (beta1 - beta2)


@dataclass
class TruncationStudy:
    rows: list  # (R, level, P11, P12, P21, P22)
    extrapolated: np.ndarray | None
    observed_order: float | None

    def column(self, name):
        idx = {"R": 0, "level": 1, "P11": 2, "P12": 3, "P21": 4, "P22": 5}[name]
        return np.array([r[idx] for r in self.rows])


def truncation_study(beta1_z, beta2_z, shape: InclusionShape, R_list, levels=(0,),
                     mode: str = "transmission", numerics: ExteriorNumerics = ExteriorNumerics()
                     ) -> TruncationStudy:
    """P for every (R, level); Richardson extrapolation over the levels at the
    largest R (P1 energy-type quantities converge at order 2 in h)."""
    R_list = [float(r) for r in R_list]
    if any(b <= a for a, b in zip(R_list, R_list[1:])):
        raise ArgumentError("R list must be increasing")
    rows = []
    for R in R_list:
        for lev in levels:
            num = ExteriorNumerics(R, numerics.R_factor, numerics.h_interface, numerics.grading, lev)
            P = polarisation_matrix(beta1_z, beta2_z, shape, mode, num).entries
            rows.append((R, lev, P[0, 0], P[0, 1], P[1, 0], P[1, 1]))
    extrap, order = None, None
    last = [r for r in rows if r[0] == R_list[-1]]
    if len(last) >= 3:
        a, b, c = (np.array(r[2:]) for r in last[-3:])
        d1, d2 = b - a, c - b
        if abs(d2[0]) > 0 and abs(d1[0]) > 0:
            ratio = abs(d1[0] / d2[0])
            order = math.log2(ratio) if ratio > 0 else None
            extrap = (c + d2 / (ratio - 1.0)).reshape(2, 2) if ratio > 1 else None
    elif len(last) == 2:
        a, b = (np.array(r[2:]) for r in last)
        extrap = (b + (b - a) / 3.0).reshape(2, 2)
    return TruncationStudy(rows, extrap, order)
