import numpy as np
import pytest

from topograd import assembly as asm
from topograd.assembly import NodalField, SparseSystem
from topograd.errors import ArgumentError, MaterialError
from topograd.mesh import HOLE, HOLE_BOUNDARY, InclusionShape, build_rect_mesh, refine_uniform
from topograd.pde import (MaterialSpec, NewtonSettings, Nonlinearity, Source, evaluate_cost,
                          evaluate_lagrangian, solve_adjoint, solve_averaged_adjoint, solve_state,
                          solve_state_extremal)

POISSON_CENTRE = 0.0736713512666702
ONE = Source("constant", 1.0)
BENCH = MaterialSpec(2.0, 1.0, Nonlinearity("cubic"), Nonlinearity("linear", 1.0), ONE, ONE)
ATAN = MaterialSpec.extremal(1.0, Nonlinearity("atan"), ONE)
BG = InclusionShape.disk(0.15, center=(0.3, 0.3))


@pytest.fixture(scope="module")
def bench_mesh():
    return build_rect_mesh((0, 1, 0, 1), 0.04, [BG])


def holed(h, r=0.1, c=(0.5, 0.5)):
    m = build_rect_mesh((0, 1, 0, 1), h, [InclusionShape.disk(r, center=c)])
    return m.toggle_shape(0, HOLE)


def test_zero_source_zero_state(bench_mesh):
    mat = MaterialSpec(2.0, 1.0, Nonlinearity("cubic"), Nonlinearity("linear", 1.0))
    u = solve_state(bench_mesh, mat)
    assert np.all(u.values == 0)


def test_linear_poisson_one_iteration(square_fine):
    u = solve_state(square_fine, MaterialSpec(1.0, 1.0, f1=ONE, f2=ONE))
    assert u.meta["iterations"] == 1
    assert u.values.max() == pytest.approx(POISSON_CENTRE, rel=0.02)


def test_semilinear_benchmark_newton(bench_mesh):
    u = solve_state(bench_mesh, BENCH)
    assert u.meta["iterations"] <= 10
    h = u.meta["newton_history"]
    assert all(b < a for a, b in zip(h, h[1:]))
    r = asm.assemble_residual(bench_mesh, BENCH, u)
    assert np.abs(r).max() < NewtonSettings().newton_tol


def test_sup_norm_stable_under_refinement():
    sups = [np.abs(solve_state(build_rect_mesh((0, 1, 0, 1), h, [BG]), BENCH).values).max()
            for h in (0.06, 0.04, 0.02)]
    for a, b in zip(sups, sups[1:]):
        assert b <= 1.05 * a


def test_extremal_without_hole_equals_state(bench_mesh):
    m = build_rect_mesh((0, 1, 0, 1), 0.04)
    a = solve_state_extremal(m, ATAN)
    b = solve_state(m, ATAN, mode="extremal")
    assert np.array_equal(a.values, b.values)


def test_extremal_zero_source():
    m = holed(0.05)
    u = solve_state_extremal(m, MaterialSpec.extremal(1.0, Nonlinearity("atan")))
    assert np.all(u.values == 0)


def _hole_flux(m, u):
    """Net flux of beta2 d_nu u through the hole boundary, from the matrix side."""
    edges, markers = m.boundary_edges
    he = edges[markers == HOLE_BOUNDARY]
    g = NodalField(m, u.values).triangle_gradients()
    total = 0.0
    for a, b in he:
        tris = np.flatnonzero(np.isin(m.triangles, [a, b]).sum(axis=1) == 2)
        k = [t for t in tris if m.region[t] != HOLE][0]
        t = m.vertices[b] - m.vertices[a]
        length = np.linalg.norm(t)
        nu = np.array([t[1], -t[0]]) / length
        total += (g[k] @ nu) * length
    return abs(total)


def test_extremal_neumann_consistency():
    m = holed(0.05)
    fluxes = []
    for _ in range(3):
        fluxes.append(_hole_flux(m, solve_state_extremal(m, ATAN)))
        m = refine_uniform(m)
    assert fluxes[0] / fluxes[1] >= 2.0
    assert fluxes[1] / fluxes[2] >= 2.0


def test_extremal_rejects_unbounded_rho():
    with pytest.raises(MaterialError):
        MaterialSpec.extremal(1.0, Nonlinearity("cubic"), ONE).validate("extremal")
    MaterialSpec.extremal(1.0, Nonlinearity("linear_plus_cubic", 0.5), ONE).validate("extremal")


def test_material_contracts():
    with pytest.raises(MaterialError):
        MaterialSpec(-1.0, 1.0).validate()
    with pytest.raises(MaterialError):
        Nonlinearity("linear", -1.0)
    with pytest.raises(MaterialError):
        MaterialSpec(np.ones((3, 3)), 1.0)
    with pytest.raises(ArgumentError):
        solve_state(build_rect_mesh((0, 1, 0, 1), 0.1), BENCH, mode="bogus")


def test_adjoint_of_zero_state(bench_mesh):
    u = NodalField(bench_mesh, np.zeros(bench_mesh.n_vertices))
    q = solve_adjoint(bench_mesh, BENCH, u)
    assert np.all(q.values == 0)


def test_linear_adjoint_operator_composition(square):
    mat = MaterialSpec(1.0, 1.0, f1=ONE, f2=ONE)
    u = solve_state(square, mat)
    q = solve_adjoint(square, mat, u)
    # two chained Poisson solves: -lap w = u, then q = -2 w
    A = asm.assemble_jacobian(square, mat, u).matrix
    tris = np.arange(square.n_triangles)
    rhs = asm.load_vector(square, tris, asm.at_quad(square, u.values, tris))
    w = asm.solve_linear(asm.apply_dirichlet(SparseSystem(A, rhs, symmetric=True, mesh=square)))
    assert np.abs(q.values + 2 * w).max() <= 1e-12 * np.abs(w).max() * 10


def test_averaged_adjoint_degenerate(bench_mesh):
    u = solve_state(bench_mesh, BENCH)
    q = solve_adjoint(bench_mesh, BENCH, u)
    q2 = solve_averaged_adjoint(bench_mesh, BENCH, u, u)
    assert np.array_equal(q.values, q2.values)


def test_averaged_adjoint_linear_rho_sum_only(bench_mesh, rng):
    mat = MaterialSpec(2.0, 1.0, Nonlinearity("linear", 2.0), Nonlinearity("linear", 1.0), ONE, ONE)
    u = solve_state(bench_mesh, mat).values
    d = 0.1 * rng.normal(size=len(u))
    d[bench_mesh.marked_vertices(1)] = 0
    a = solve_averaged_adjoint(bench_mesh, mat, u, u)
    b = solve_averaged_adjoint(bench_mesh, mat, u + d, u - d)
    assert np.abs(a.values - b.values).max() <= 1e-11 * np.abs(a.values).max()


def test_cost_values(square):
    n = square.n_vertices
    assert evaluate_cost(square, np.zeros(n)) == 0.0
    assert evaluate_cost(square, np.ones(n)) == pytest.approx(1.0, abs=1e-12)
    m = holed(0.05)
    a = InclusionShape.disk(0.1).area()
    assert evaluate_cost(m, np.ones(m.n_vertices), "extremal") == pytest.approx(1.0 - a, abs=1e-12)


def test_lagrangian_structure(bench_mesh, rng):
    u = solve_state(bench_mesh, BENCH)
    n = bench_mesh.n_vertices
    J = evaluate_cost(bench_mesh, u)
    assert evaluate_lagrangian(bench_mesh, BENCH, u, np.zeros(n)) == J
    q = rng.normal(size=n)
    q[bench_mesh.marked_vertices(1)] = 0
    G = evaluate_lagrangian(bench_mesh, BENCH, u, q)
    assert abs(G - J) <= NewtonSettings().newton_tol * np.linalg.norm(q)
    v = rng.normal(size=n)
    q1, q2 = rng.normal(size=n), rng.normal(size=n)
    L = lambda q: evaluate_lagrangian(bench_mesh, BENCH, v, q)  # noqa: E731
    assert abs(L(q1 + q2) - L(q1) - L(q2) + L(np.zeros(n))) <= 1e-12 * max(1.0, abs(L(q1)))
