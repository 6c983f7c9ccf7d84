"""P1 finite element kernels on :class:`~topograd.mesh.Mesh2D`.

Element loops are vectorised over triangles; global matrices are built in
COO form and summed into CSR in a fixed order, so assembly is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ArgumentError, LocalityError, PatchError, SolverError
from .mesh import HOLE, INCLUSION, MATRIX, OUTER, Mesh2D, locate_point

LIN_TOL = 1e-12


@dataclass(frozen=True)
class Quadrature:
    """Triangle rule (barycentric points, weights on the reference element) and
    a Gauss-Legendre rule on [0, 1] for the s-average of the linearisation."""

    tri_points: np.ndarray
    tri_weights: np.ndarray
    s_points: np.ndarray
    s_weights: np.ndarray

    @classmethod
    def default(cls, s_order: int = 4) -> "Quadrature":
        # 6-point rule, exact for polynomials of degree 4
        a, b = 0.445948490915965, 0.091576213509771
        wa, wb = 0.223381589678011 / 2, 0.109951743655322 / 2
        pts = np.array([
            [a, a, 1 - 2 * a], [a, 1 - 2 * a, a], [1 - 2 * a, a, a],
            [b, b, 1 - 2 * b], [b, 1 - 2 * b, b], [1 - 2 * b, b, b],
        ])
        w = np.array([wa, wa, wa, wb, wb, wb])
        # refine the digits so that the weights sum to 1/2 to round-off
        w = w / w.sum() * 0.5
        x, sw = np.polynomial.legendre.leggauss(s_order)
        return cls(pts, w, 0.5 * (x + 1.0), 0.5 * sw)


QUAD = Quadrature.default()


@dataclass(eq=False)
class NodalField:
    """Piecewise-linear function given by its vertex values."""

    mesh: Mesh2D
    values: np.ndarray
    name: str = "field"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_vertices,):
            raise ArgumentError(
                f"field length {self.values.shape} does not match {self.mesh.n_vertices} vertices")

    def __call__(self, x) -> float:
        k, lam = locate_point(self.mesh, x)
        return float(lam @ self.values[self.mesh.triangles[k]])

    def triangle_gradients(self) -> np.ndarray:
        return np.einsum("mia,mi->ma", self.mesh.basis_gradients, self.values[self.mesh.triangles])

    @classmethod
    def interpolate(cls, mesh, fn, name="field"):
        v = mesh.vertices
        return cls(mesh, np.asarray(fn(v[:, 0], v[:, 1]), dtype=float) * np.ones(len(v)), name)


@dataclass(eq=False)
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    symmetric: bool = False
    mesh: Mesh2D | None = None


def _check_field(mesh, *fields):
    for f in fields:
        if isinstance(f, NodalField):
            if f.mesh is not mesh and (f.mesh.n_vertices != mesh.n_vertices
                                       or not np.array_equal(f.mesh.vertices, mesh.vertices)):
                raise ArgumentError("field lives on a different mesh")
        elif len(f) != mesh.n_vertices:
            raise ArgumentError("field length does not match the mesh")


def _vals(f):
    return f.values if isinstance(f, NodalField) else np.asarray(f, dtype=float)


def quad_points(mesh: Mesh2D, tris=None, quad: Quadrature = QUAD) -> np.ndarray:
    """Physical quadrature points, shape (m, nq, 2)."""
    t = mesh.triangles if tris is None else mesh.triangles[tris]
    return np.einsum("qi,mia->mqa", quad.tri_points, mesh.vertices[t])


def at_quad(mesh: Mesh2D, values, tris=None, quad: Quadrature = QUAD) -> np.ndarray:
    t = mesh.triangles if tris is None else mesh.triangles[tris]
    return _vals(values)[t] @ quad.tri_points.T


def active_triangles(mesh: Mesh2D, mode: str = "transmission") -> np.ndarray:
    # HOLE triangles only exist in extremal meshes; both modes skip them
    return np.flatnonzero(mesh.region != HOLE)


def _region_groups(mesh, tris):
    """Yield (tag, triangle ids) for the region tags present in ``tris``.

    HOLE triangles only reach this point when passed explicitly (extension
    solves inside a hole); they carry the matrix phase data.
    """
    reg = mesh.region[tris]
    for tag, sel in ((MATRIX, tris[(reg == MATRIX) | (reg == HOLE)]),
                     (INCLUSION, tris[reg == INCLUSION])):
        if len(sel):
            yield tag, sel


def _coo(mesh, tris, elem, n):
    t = mesh.triangles[tris]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return sp.coo_matrix((elem.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def stiffness_elements(mesh, tris, beta) -> np.ndarray:
    """Element matrices ``int beta grad(phi_j) . grad(phi_i)``, shape (m, 3, 3)."""
    g = mesh.basis_gradients[tris]
    return mesh.areas[tris, None, None] * np.einsum("mia,ab,mjb->mij", g, np.asarray(beta), g)


def mass_elements(mesh, tris, coef_q, quad: Quadrature = QUAD) -> np.ndarray:
    """Element matrices ``int c phi_j phi_i`` with ``c`` given at quadrature points."""
    lam = quad.tri_points
    w = quad.tri_weights * 2.0
    return np.einsum("mq,q,qi,qj->mij", coef_q * mesh.areas[tris, None], w, lam, lam)


def load_vector(mesh, tris, vals_q, quad: Quadrature = QUAD) -> np.ndarray:
    """``int g phi_i`` with ``g`` given at quadrature points."""
    w = quad.tri_weights * 2.0
    loc = np.einsum("mq,q,qi->mi", vals_q * mesh.areas[tris, None], w, quad.tri_points)
    return np.bincount(mesh.triangles[tris].ravel(), loc.ravel(), minlength=mesh.n_vertices)


def assemble_residual(mesh: Mesh2D, material, u, mode: str = "transmission",
                      zero_dirichlet: bool = True, tris=None) -> np.ndarray:
    """Component i is ``int beta grad u . grad phi_i + rho(u) phi_i - f phi_i``.

    HOLE triangles never contribute.  With ``zero_dirichlet`` the OUTER
    boundary components are set to zero.
    """
    _check_field(mesh, u)
    uv = _vals(u)
    tris = active_triangles(mesh, mode) if tris is None else tris
    r = np.zeros(mesh.n_vertices)
    for tag, sel in _region_groups(mesh, tris):
        beta, rho, src = material.region(tag)
        ke = stiffness_elements(mesh, sel, beta)
        loc = np.einsum("mij,mj->mi", ke, uv[mesh.triangles[sel]])
        r += np.bincount(mesh.triangles[sel].ravel(), loc.ravel(), minlength=mesh.n_vertices)
        uq = at_quad(mesh, uv, sel)
        xq = quad_points(mesh, sel)
        r += load_vector(mesh, sel, rho.value(uq) - src(xq))
    if zero_dirichlet:
        r[mesh.marked_vertices(OUTER)] = 0.0
    return r


def assemble_jacobian(mesh: Mesh2D, material, u, mode: str = "transmission",
                      tris=None) -> SparseSystem:
    """Entry (i, j) is ``int beta grad phi_j . grad phi_i + rho'(u) phi_j phi_i``."""
    return assemble_averaged_bilinear(mesh, material, u, u, mode, tris=tris, _degenerate=True)


def assemble_averaged_bilinear(mesh: Mesh2D, material, u0, u_eps, mode: str = "transmission",
                               quad: Quadrature = QUAD, tris=None,
                               _degenerate: bool = False) -> SparseSystem:
    """Bilinear form with the linearisation averaged along ``s u_eps + (1-s) u0``.

    Entry (i, j) is ``b(phi_j, phi_i)``, so the matrix applied to a coefficient
    vector is the directional derivative of the residual.  Adjoint equations
    (unknown in the second slot) are solved with the transpose.
    """
    _check_field(mesh, u0, u_eps)
    a, b = _vals(u0), _vals(u_eps)
    tris = active_triangles(mesh, mode) if tris is None else tris
    n = mesh.n_vertices
    elems, ids = [], []
    sym = True
    for tag, sel in _region_groups(mesh, tris):
        beta, rho, _ = material.region(tag)
        sym &= bool(np.allclose(beta, np.transpose(beta), rtol=0, atol=1e-15))
        ke = stiffness_elements(mesh, sel, beta)
        aq = at_quad(mesh, a, sel, quad)
        if _degenerate or np.array_equal(a, b):
            c = rho.deriv(aq)
        else:
            bq = at_quad(mesh, b, sel, quad)
            c = np.zeros_like(aq)
            for s, w in zip(quad.s_points, quad.s_weights):
                c += w * rho.deriv(s * bq + (1.0 - s) * aq)
        if np.any(c):
            ke = ke + mass_elements(mesh, sel, c, quad)
        elems.append(ke)
        ids.append(sel)
    if elems:
        A = _coo(mesh, np.concatenate(ids), np.concatenate(elems), n)
    else:
        A = sp.csr_matrix((n, n))
    return SparseSystem(A, np.zeros(n), symmetric=sym, mesh=mesh)


def apply_dirichlet(system: SparseSystem, marker: int | None = OUTER, value=0.0,
                    vertices=None) -> SparseSystem:
    """Constrain the vertices carrying boundary ``marker`` (or explicit
    ``vertices``) to ``value``, a scalar or one value per vertex.

    Rows and columns are eliminated so a symmetric matrix stays symmetric.
    Constraining already constrained vertices again is a no-op.
    """
    if vertices is None:
        if system.mesh is None:
            raise ArgumentError("system carries no mesh; pass vertices explicitly")
        vertices = system.mesh.marked_vertices(marker)
    idx = np.asarray(vertices, dtype=np.int64)
    vals = np.broadcast_to(np.asarray(value, dtype=float), idx.shape).copy()
    A = system.matrix.tocsr()
    n = A.shape[0]
    rhs = np.array(system.rhs, dtype=float, copy=True)
    xfix = np.zeros((n,) + rhs.shape[1:])
    if rhs.ndim == 2:
        xfix[idx] = vals[:, None]
    else:
        xfix[idx] = vals
    rhs = rhs - A @ xfix
    keep = np.ones(n)
    keep[idx] = 0.0
    D = sp.diags(keep)
    A = (D @ A @ D + sp.diags(1.0 - keep)).tocsr()
    A.eliminate_zeros()
    rhs[idx] = xfix[idx]
    # merge with earlier constraints (later values win)
    old = dict(zip(system.constrained.tolist(), system.values.tolist()))
    old.update(zip(idx.tolist(), vals.tolist()))
    c = np.array(sorted(old), dtype=np.int64)
    return SparseSystem(A, rhs, c, np.array([old[i] for i in c]), system.symmetric, system.mesh)


def _is_spd_candidate(system: SparseSystem) -> bool:
    A = system.matrix
    if not system.symmetric:
        return False
    if abs(A - A.T).max() > 1e-13 * max(1.0, abs(A).max()):
        return False
    return bool(np.all(A.diagonal() > 0))


def solve_linear(system: SparseSystem, tol: float = LIN_TOL, method: str = "auto",
                 transpose: bool = False) -> np.ndarray:
    """Solve ``A x = b`` (or ``A^T x = b``) to relative residual ``tol``.

    ``method='auto'`` uses diagonally preconditioned CG for symmetric positive
    diagonal systems and sparse LU otherwise.  ``b`` may have several columns.
    """
    A = system.matrix.T.tocsr() if transpose else system.matrix.tocsr()
    b = np.asarray(system.rhs, dtype=float)
    if method == "auto":
        method = "cg" if _is_spd_candidate(system) else "lu"
    cols = b.reshape(len(b), -1)
    X = np.zeros_like(cols)
    if method == "lu":
        try:
            lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"sparse LU failed: {exc}") from exc
        X = lu.solve(cols)
        # one step of iterative refinement
        X += lu.solve(cols - A @ X)
    elif method == "cg":
        d = A.diagonal()
        M = sp.diags(1.0 / d)
        for k in range(cols.shape[1]):
            bk = cols[:, k]
            nb = np.linalg.norm(bk)
            if nb == 0:
                continue
            hist = []
            x = None
            # the recursive CG residual drifts from the true one; restart until
            # the true relative residual meets tol
            for _ in range(4):
                x, info = spla.cg(A, bk, x0=x, rtol=tol, atol=0.0, M=M, maxiter=20 * len(bk),
                                  callback=lambda xk: hist.append(1))
                if info != 0:
                    raise SolverError(f"CG did not converge (info={info}, iterations={len(hist)})",
                                      history=[len(hist)])
                if np.linalg.norm(bk - A @ x) <= tol * nb:
                    break
            X[:, k] = x
    else:
        raise ArgumentError(f"unknown linear solver {method!r}")
    res = np.linalg.norm(cols - A @ X, axis=0)
    nb = np.linalg.norm(cols, axis=0)
    bad = res > 10 * tol * np.maximum(nb, 1e-300)
    if np.any(bad & (nb > 0)):
        raise SolverError(f"linear solve residual {res.max():.3e} above tolerance")
    return X.reshape(b.shape)


def integrate(mesh: Mesh2D, integrand, regions=None, fields=(), quad: Quadrature = QUAD) -> float:
    """Quadrature of ``integrand(x, *field_values)`` over triangles in ``regions``.

    ``x`` has shape (m, nq, 2); each field is passed at the quadrature points.
    ``regions=None`` means every non-HOLE triangle.
    """
    if regions is None:
        tris = np.flatnonzero(mesh.region != HOLE)
    else:
        tris = np.flatnonzero(np.isin(mesh.region, np.atleast_1d(regions)))
    if len(tris) == 0:
        return 0.0
    x = quad_points(mesh, tris, quad)
    fv = [at_quad(mesh, f, tris, quad) for f in fields]
    vals = np.broadcast_to(integrand(x, *fv), x.shape[:2])
    return float(np.sum(vals * quad.tri_weights[None, :] * 2.0 * mesh.areas[tris, None]))


def h1_norm(mesh: Mesh2D, values, tris=None) -> float:
    """Discrete H1(D) norm of a P1 field (exact gradients, quadrature mass)."""
    v = _vals(values)
    tris = np.arange(mesh.n_triangles) if tris is None else tris
    g = np.einsum("mia,mi->ma", mesh.basis_gradients[tris], v[mesh.triangles[tris]])
    grad2 = float((mesh.areas[tris] * (g**2).sum(1)).sum())
    vq = at_quad(mesh, v, tris)
    l2 = float(np.sum(vq**2 * QUAD.tri_weights * 2.0 * mesh.areas[tris, None]))
    return float(np.sqrt(grad2 + l2))


def gradient_l2(mesh: Mesh2D, values, tris=None) -> float:
    v = _vals(values)
    tris = np.arange(mesh.n_triangles) if tris is None else tris
    g = np.einsum("mia,mi->ma", mesh.basis_gradients[tris], v[mesh.triangles[tris]])
    return float(np.sqrt((mesh.areas[tris] * (g**2).sum(1)).sum()))


def l2_norm(mesh: Mesh2D, values, tris=None) -> float:
    v = _vals(values)
    tris = np.arange(mesh.n_triangles) if tris is None else tris
    vq = at_quad(mesh, v, tris)
    return float(np.sqrt(np.sum(vq**2 * QUAD.tri_weights * 2.0 * mesh.areas[tris, None])))


def recover_gradient(mesh: Mesh2D, field, z, r: float | None = None,
                     min_vertices: int = 6) -> np.ndarray:
    """Gradient at ``z`` from a least-squares quadratic fit of nodal values.

    The patch is the set of vertices within distance ``r`` of ``z`` (default
    four times the longest edge of the triangle containing ``z``).  Raises
    LocalityError when triangles of different regions touch the patch.
    """
    z = np.asarray(z, dtype=float)
    v = _vals(field)
    if r is None:
        k, _ = locate_point(mesh, z)
        r = 4.0 * mesh.local_h(k)
    d = mesh.vertices - z
    inside = np.flatnonzero((d**2).sum(1) <= r * r)
    if len(inside) < min_vertices:
        raise PatchError(f"only {len(inside)} vertices in recovery patch of radius {r:g}")
    touching = np.isin(mesh.triangles, inside).any(axis=1)
    if len(np.unique(mesh.region[touching])) > 1 or len(np.unique(mesh.shape_id[touching])) > 1:
        raise LocalityError(f"recovery patch around {z.tolist()} crosses an interface")
    s = d[inside] / r
    X = np.column_stack([np.ones(len(s)), s[:, 0], s[:, 1], s[:, 0] ** 2, s[:, 0] * s[:, 1],
                         s[:, 1] ** 2])
    coef, _, rank, _ = np.linalg.lstsq(X, v[inside], rcond=None)
    if rank < 6:
        raise PatchError("degenerate recovery patch")
    return np.array([coef[1], coef[2]]) / r
