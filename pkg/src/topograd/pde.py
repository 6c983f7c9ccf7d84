"""Semilinear transmission states, adjoints, cost and Lagrangian.

The state solves  -div(beta grad u) + rho(u) = f  in D with u = 0 on the
outer boundary, where (beta, rho, f) take the inclusion values on INCLUSION
triangles and the matrix values elsewhere.  In extremal mode HOLE triangles
are cut out, which leaves a natural (Neumann) condition on the hole.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import assembly as asm
from .assembly import NodalField, SparseSystem
from .errors import ArgumentError, MaterialError, SolverError
from .mesh import HOLE, INCLUSION, MATRIX, OUTER, Mesh2D

log = logging.getLogger(__name__)

MODES = ("transmission", "extremal")


def _check_mode(mode):
    if mode not in MODES:
        raise ArgumentError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class Nonlinearity:
    """Monotone nonlinearity rho with rho(0) = 0."""

    kind: str = "zero"
    lam: float = 0.0

    KINDS = ("zero", "linear", "cubic", "linear_plus_cubic", "atan")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise MaterialError(f"unknown nonlinearity {self.kind!r}")
        if self.kind == "linear" and self.lam < 0:
            raise MaterialError("linear nonlinearity needs lambda >= 0")
        if self.kind == "linear_plus_cubic" and self.lam <= 0:
            raise MaterialError("linear_plus_cubic needs lambda > 0")

    def value(self, u):
        u = np.asarray(u, dtype=float)
        k = self.kind
        if k == "zero":
            return np.zeros_like(u)
        if k == "linear":
            return self.lam * u
        if k == "cubic":
            return u**3
        if k == "linear_plus_cubic":
            return self.lam * u + u**3
        return np.arctan(u)

    def deriv(self, u):
        u = np.asarray(u, dtype=float)
        k = self.kind
        if k == "zero":
            return np.zeros_like(u)
        if k == "linear":
            return np.full_like(u, self.lam)
        if k == "cubic":
            return 3.0 * u**2
        if k == "linear_plus_cubic":
            return self.lam + 3.0 * u**2
        return 1.0 / (1.0 + u**2)

    @property
    def polynomial(self) -> bool:
        return self.kind != "atan"

    @property
    def bounded(self) -> bool:
        return self.kind in ("zero", "atan")

    @property
    def min_slope(self) -> float:
        """A lower bound for rho' on the whole real line."""
        return self.lam if self.kind in ("linear", "linear_plus_cubic") else 0.0

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind in ("linear", "linear_plus_cubic"):
            d["lambda"] = self.lam
        return d

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return cls(d, 1.0 if d in ("linear", "linear_plus_cubic") else 0.0)
        return cls(d["kind"], float(d.get("lambda", 1.0 if d["kind"] in ("linear", "linear_plus_cubic") else 0.0)))


@dataclass(frozen=True)
class Source:
    """Source term f(x): constant, polynomial sum c x^i y^j, or bilinear table."""

    kind: str = "constant"
    value: float = 0.0
    terms: tuple = ()
    grid_x: tuple = ()
    grid_y: tuple = ()
    table: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial", "tabulated"):
            raise MaterialError(f"unknown source kind {self.kind!r}")
        if self.kind == "tabulated":
            t = np.asarray(self.table, dtype=float)
            if t.shape != (len(self.grid_x), len(self.grid_y)):
                raise MaterialError("tabulated source shape does not match its grid")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full(x.shape[:-1], float(self.value))
        if self.kind == "polynomial":
            out = np.zeros(x.shape[:-1])
            for i, j, c in self.terms:
                out += c * x[..., 0] ** i * x[..., 1] ** j
            return out
        interp = RegularGridInterpolator((np.asarray(self.grid_x), np.asarray(self.grid_y)),
                                         np.asarray(self.table, dtype=float),
                                         bounds_error=False, fill_value=None)
        return interp(x.reshape(-1, 2)).reshape(x.shape[:-1])

    @property
    def is_zero(self) -> bool:
        if self.kind == "constant":
            return self.value == 0
        if self.kind == "polynomial":
            return all(c == 0 for _, _, c in self.terms)
        return not np.any(self.table)

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "polynomial":
            return {"kind": "polynomial", "terms": [list(t) for t in self.terms]}
        return {"kind": "tabulated", "grid_x": list(self.grid_x), "grid_y": list(self.grid_y),
                "table": [list(r) for r in self.table]}

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, (int, float)):
            return cls("constant", float(d))
        kind = d.get("kind", "constant")
        if kind == "constant":
            return cls("constant", float(d.get("value", 0.0)))
        if kind == "polynomial":
            return cls("polynomial", terms=tuple((int(i), int(j), float(c)) for i, j, c in d["terms"]))
        return cls("tabulated", grid_x=tuple(map(float, d["grid_x"])),
                   grid_y=tuple(map(float, d["grid_y"])),
                   table=tuple(tuple(map(float, r)) for r in d["table"]))


def as_matrix(beta) -> np.ndarray:
    b = np.asarray(beta, dtype=float)
    if b.ndim == 0:
        return float(b) * np.eye(2)
    if b.shape != (2, 2):
        raise MaterialError(f"coefficient must be a scalar or a 2x2 matrix, got shape {b.shape}")
    return b


def coercivity_bounds(beta) -> tuple[float, float]:
    """(beta_m, beta_M) with beta_m |v|^2 <= beta v.v <= beta_M |v|^2."""
    b = as_matrix(beta)
    ev = np.linalg.eigvalsh(0.5 * (b + b.T))
    return float(ev[0]), float(np.linalg.norm(b, 2))


@dataclass(frozen=True, eq=False)
class MaterialSpec:
    """Coefficients of the inclusion phase (index 1) and of the matrix (index 2)."""

    beta1: Any = 1.0
    beta2: Any = 1.0
    rho1: Nonlinearity = Nonlinearity()
    rho2: Nonlinearity = Nonlinearity()
    f1: Source = Source()
    f2: Source = Source()

    def __post_init__(self):
        object.__setattr__(self, "beta1", as_matrix(self.beta1))
        object.__setattr__(self, "beta2", as_matrix(self.beta2))

    @classmethod
    def extremal(cls, beta2=1.0, rho2=Nonlinearity(), f2=Source()):
        return cls(np.zeros((2, 2)), beta2, Nonlinearity(), rho2, Source(), f2)

    def region(self, tag: int):
        if tag == INCLUSION:
            return self.beta1, self.rho1, self.f1
        if tag in (MATRIX, HOLE):
            return self.beta2, self.rho2, self.f2
        raise ArgumentError(f"no material for region tag {tag}")

    @property
    def zero_contrast(self) -> bool:
        return (np.array_equal(self.beta1, self.beta2) and self.rho1 == self.rho2
                and self.f1 == self.f2)

    @property
    def symmetric(self) -> bool:
        return bool(np.allclose(self.beta1, self.beta1.T) and np.allclose(self.beta2, self.beta2.T))

    def validate(self, mode: str = "transmission", sample=np.linspace(-10.0, 10.0, 201)) -> None:
        """Raise MaterialError unless the coercivity and monotonicity
        assumptions hold for the given mode."""
        _check_mode(mode)
        phases = [(self.beta2, self.rho2, "2")]
        if mode == "transmission":
            phases.append((self.beta1, self.rho1, "1"))
        for beta, rho, name in phases:
            bm, _ = coercivity_bounds(beta)
            if bm <= 0:
                raise MaterialError(f"beta{name} is not uniformly elliptic (beta_m = {bm:.3g})")
            if rho.value(np.zeros(1))[0] != 0:
                raise MaterialError(f"rho{name}(0) must vanish")
            if np.any(rho.deriv(sample) < 0):
                raise MaterialError(f"rho{name} is not monotone")
        if mode == "extremal":
            spd = np.allclose(self.beta2, self.beta2.T) and coercivity_bounds(self.beta2)[0] > 0
            if not ((spd and self.rho2.bounded) or self.rho2.min_slope > 0):
                raise MaterialError(
                    "extremal mode needs a symmetric positive definite beta2 with bounded rho2, "
                    "or rho2' >= lambda > 0")

    def to_dict(self):
        return {"beta1": self.beta1.tolist(), "beta2": self.beta2.tolist(),
                "rho1": self.rho1.to_dict(), "rho2": self.rho2.to_dict(),
                "f1": self.f1.to_dict(), "f2": self.f2.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("beta1", 1.0), d.get("beta2", 1.0),
                   Nonlinearity.from_dict(d.get("rho1", "zero")),
                   Nonlinearity.from_dict(d.get("rho2", "zero")),
                   Source.from_dict(d.get("f1", 0.0)), Source.from_dict(d.get("f2", 0.0)))


@dataclass(frozen=True)
class NewtonSettings:
    newton_tol: float = 1e-10
    max_iter: int = 50
    armijo: float = 0.5
    max_backtracks: int = 20
    lin_tol: float = asm.LIN_TOL

    def __post_init__(self):
        if self.newton_tol <= 0:
            raise ArgumentError("newton_tol must be positive")
        if self.max_iter < 1:
            raise ArgumentError("max_iter must be at least 1")


def _newton(residual, jacobian, u, fixed, settings: NewtonSettings, what="state"):
    """Damped Newton for ``residual(u) = 0`` on the free vertices.

    ``fixed`` holds vertex ids whose values in ``u`` are kept.  Returns the
    solution and the residual-norm history.
    """
    u = np.array(u, dtype=float)
    free = np.ones(len(u), dtype=bool)
    free[fixed] = False

    def fnorm(v):
        r = residual(v)
        r[~free] = 0.0
        return r, float(np.linalg.norm(r))

    r, nr = fnorm(u)
    _, r0 = fnorm(np.where(free, 0.0, u))
    scale = max(r0, nr)
    history = [nr]
    if nr == 0.0 or nr <= settings.newton_tol * scale:
        return u, history
    for it in range(settings.max_iter):
        sys_ = jacobian(u)
        sys_ = SparseSystem(sys_.matrix, -r, symmetric=sys_.symmetric)
        sys_ = asm.apply_dirichlet(sys_, None, 0.0, vertices=np.flatnonzero(~free))
        du = asm.solve_linear(sys_, settings.lin_tol)
        t = 1.0
        for _ in range(settings.max_backtracks + 1):
            r_new, n_new = fnorm(u + t * du)
            if n_new <= (1.0 - 1e-4 * t) * nr:
                break
            t *= settings.armijo
        else:
            raise SolverError(f"{what}: line search failed at iteration {it + 1}", history=history)
        u = u + t * du
        r, nr = r_new, n_new
        history.append(nr)
        log.debug("%s newton it=%d |F|=%.3e step=%.3g", what, it + 1, nr, t)
        if nr <= settings.newton_tol * scale:
            return u, history
    raise SolverError(f"{what}: Newton did not converge in {settings.max_iter} iterations "
                      f"(|F| = {history[-1]:.3e})", history=history)


def _dead_vertices(mesh: Mesh2D, tris) -> np.ndarray:
    """Vertices not touched by any triangle in ``tris``."""
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.triangles[tris].ravel()] = True
    return np.flatnonzero(~used)


def _hole_parts(mesh: Mesh2D):
    """HOLE triangle ids and the vertices held fixed by an extension solve
    (everything except vertices strictly inside the hole)."""
    hole = np.flatnonzero(mesh.region == HOLE)
    inner = np.zeros(mesh.n_vertices, dtype=bool)
    inner[mesh.triangles[hole].ravel()] = True
    inner[mesh.triangles[asm.active_triangles(mesh)].ravel()] = False
    return hole, np.flatnonzero(~inner)


def solve_state(mesh: Mesh2D, material: MaterialSpec, settings: NewtonSettings = NewtonSettings(),
                mode: str = "transmission", u_init=None) -> NodalField:
    """Unperturbed or perturbed state on ``mesh`` (the inclusion is whatever
    the region tags say).  Extremal meshes with HOLE triangles are routed to
    :func:`solve_state_extremal`."""
    _check_mode(mode)
    material.validate(mode)
    if np.any(mesh.region == HOLE):
        return solve_state_extremal(mesh, material, settings)
    if mode == "extremal" and np.any(mesh.region == INCLUSION):
        raise ArgumentError("extremal mode expects HOLE tags, not INCLUSION tags")
    tris = asm.active_triangles(mesh)
    fixed = mesh.marked_vertices(OUTER)
    u0 = np.zeros(mesh.n_vertices) if u_init is None else np.array(asm._vals(u_init), dtype=float)
    u0[fixed] = 0.0
    u, hist = _newton(lambda v: asm.assemble_residual(mesh, material, v, zero_dirichlet=False, tris=tris),
                      lambda v: asm.assemble_jacobian(mesh, material, v, tris=tris),
                      u0, fixed, settings)
    return NodalField(mesh, u, "u", {"newton_history": hist, "iterations": len(hist) - 1})


def solve_state_extremal(mesh: Mesh2D, material: MaterialSpec,
                         settings: NewtonSettings = NewtonSettings(), background=None) -> NodalField:
    """State on D minus the HOLE triangles, extended into the hole.

    The extension solves  -div(beta2 grad u+) + rho2(w) = f2  in the hole with
    u+ = u on its boundary, where ``w`` is ``background`` (the unperturbed
    state) when given and u+ itself otherwise.
    """
    material.validate("extremal")
    tris = asm.active_triangles(mesh)
    fixed = np.union1d(mesh.marked_vertices(OUTER), _dead_vertices(mesh, tris))
    u, hist = _newton(lambda v: asm.assemble_residual(mesh, material, v, zero_dirichlet=False, tris=tris),
                      lambda v: asm.assemble_jacobian(mesh, material, v, tris=tris),
                      np.zeros(mesh.n_vertices), fixed, settings, "extremal state")
    hole, keep = _hole_parts(mesh)
    if len(hole):
        if background is None:
            u, _ = _newton(lambda v: asm.assemble_residual(mesh, material, v, zero_dirichlet=False, tris=hole),
                           lambda v: asm.assemble_jacobian(mesh, material, v, tris=hole),
                           u, keep, settings, "state extension")
        else:
            w = asm._vals(background)
            _, rho2, _ = material.region(MATRIX)
            extra = asm.load_vector(mesh, hole, rho2.value(asm.at_quad(mesh, w, hole)))
            lin = MaterialSpec.extremal(material.beta2, Nonlinearity(), material.f2)
            u, _ = _newton(lambda v: asm.assemble_residual(mesh, lin, v, zero_dirichlet=False, tris=hole) + extra,
                           lambda v: asm.assemble_jacobian(mesh, lin, v, tris=hole),
                           u, keep, settings, "state extension")
    return NodalField(mesh, u, "u", {"newton_history": hist, "iterations": len(hist) - 1})


def _adjoint_solve(mesh, A: SparseSystem, rhs, fixed, settings):
    # b(psi, q) tests in the first slot, so the unknown multiplies the transpose
    sys_ = SparseSystem(A.matrix.T.tocsr(), rhs, symmetric=A.symmetric)
    sys_ = asm.apply_dirichlet(sys_, None, 0.0, vertices=fixed)
    return asm.solve_linear(sys_, settings.lin_tol)


def _extend_adjoint(mesh, material, q, u0, settings, cost_weight=1.0):
    """Extend q into the hole: -div(beta2^T grad q+) + rho2'(u0) q+ = -2 u0."""
    hole, keep = _hole_parts(mesh)
    if not len(hole):
        return q
    A = asm.assemble_jacobian(mesh, material, u0, tris=hole)
    rhs = asm.load_vector(mesh, hole, -2.0 * cost_weight * asm.at_quad(mesh, u0, hole))
    sys_ = SparseSystem(A.matrix.T.tocsr(), rhs, symmetric=A.symmetric)
    sys_ = asm.apply_dirichlet(sys_, None, q[keep], vertices=keep)
    return asm.solve_linear(sys_, settings.lin_tol)


def solve_adjoint(mesh: Mesh2D, material: MaterialSpec, u: NodalField,
                  settings: NewtonSettings = NewtonSettings(), mode: str = "transmission",
                  cost_weight: float = 1.0) -> NodalField:
    """Adjoint q with  b0(psi, q) = -int 2 u psi  for all psi."""
    return solve_averaged_adjoint(mesh, material, u, u, settings, mode, name="q",
                                  cost_weight=cost_weight)


def solve_averaged_adjoint(mesh: Mesh2D, material: MaterialSpec, u0, u_eps,
                           settings: NewtonSettings = NewtonSettings(), mode: str = "transmission",
                           name: str = "q_eps", cost_weight: float = 1.0,
                           quad: asm.Quadrature = asm.QUAD) -> NodalField:
    """Averaged adjoint with  b_eps(psi, q) = -int (u0 + u_eps) psi  for all psi.

    In extremal mode the integrals run over D minus the hole and the result
    is extended into the hole by a Dirichlet problem.
    """
    _check_mode(mode)
    asm._check_field(mesh, u0, u_eps)
    a, b = asm._vals(u0), asm._vals(u_eps)
    tris = asm.active_triangles(mesh)
    A = asm.assemble_averaged_bilinear(mesh, material, a, b, quad=quad, tris=tris)
    rhs = asm.load_vector(mesh, tris, -cost_weight * asm.at_quad(mesh, a + b, tris))
    fixed = np.union1d(mesh.marked_vertices(OUTER), _dead_vertices(mesh, tris))
    q = _adjoint_solve(mesh, A, rhs, fixed, settings)
    if np.any(mesh.region == HOLE):
        q = _extend_adjoint(mesh, material, q, a, settings, cost_weight)
    return NodalField(mesh, q, name)


def evaluate_cost(mesh: Mesh2D, u, mode: str = "transmission") -> float:
    """J = int u^2 over the material (HOLE triangles excluded)."""
    _check_mode(mode)
    asm._check_field(mesh, u)
    return asm.integrate(mesh, lambda x, uq: uq**2, regions=(MATRIX, INCLUSION), fields=(u,))


def evaluate_lagrangian(mesh: Mesh2D, material: MaterialSpec, u, q, mode: str = "transmission") -> float:
    """G = int u^2 + int beta grad u . grad q + rho(u) q - f q."""
    asm._check_field(mesh, u, q)
    r = asm.assemble_residual(mesh, material, u, zero_dirichlet=False)
    return evaluate_cost(mesh, u, mode) + float(r @ asm._vals(q))
