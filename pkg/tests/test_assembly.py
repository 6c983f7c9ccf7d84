import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from topograd import assembly as asm
from topograd.assembly import NodalField, SparseSystem
from topograd.errors import LocalityError, PatchError
from topograd.mesh import INCLUSION, MATRIX, OUTER, InclusionShape, Mesh2D, build_rect_mesh
from topograd.pde import MaterialSpec, Nonlinearity, Source

# P1 stiffness of the reference triangle with beta = I, by hand
K_REF = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])


@pytest.fixture(scope="module")
def ref_tri():
    return Mesh2D(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                  np.array([MATRIX]), np.array([-1]))


@pytest.fixture(scope="module")
def two_phase():
    return build_rect_mesh((0, 1, 0, 1), 0.08, [InclusionShape.disk(0.2, center=(0.5, 0.5))])


CUBIC = MaterialSpec(2.0, 1.0, Nonlinearity("cubic"), Nonlinearity("linear", 1.0),
                     Source("constant", 1.0), Source("constant", 1.0))


def test_residual_zero_data(two_phase):
    r = asm.assemble_residual(two_phase, MaterialSpec(2.0, 1.0, Nonlinearity("cubic")),
                              np.zeros(two_phase.n_vertices))
    assert np.all(r == 0)


def test_residual_reference_triangle(ref_tri):
    u = ref_tri.vertices[:, 0]
    r = asm.assemble_residual(ref_tri, MaterialSpec(), u, zero_dirichlet=False)
    assert np.allclose(r, K_REF @ np.array([0.0, 1.0, 0.0]), atol=1e-15)


def test_jacobian_reference_triangle(ref_tri):
    A = asm.assemble_jacobian(ref_tri, MaterialSpec(), np.zeros(3)).matrix.toarray()
    assert np.allclose(A, K_REF, atol=1e-15)


def test_quadrature_degree4_exact():
    q = asm.QUAD
    # int_T x^a y^b over the reference triangle = a! b! / (a + b + 2)!
    from math import factorial
    for a in range(5):
        for b in range(5 - a):
            x = q.tri_points[:, 1]
            y = q.tri_points[:, 2]
            num = float(q.tri_weights @ (x**a * y**b))
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            assert num == pytest.approx(exact, abs=1e-14)


def test_jacobian_symmetric(two_phase, rng):
    u = rng.normal(size=two_phase.n_vertices)
    A = asm.assemble_jacobian(two_phase, CUBIC, u).matrix
    assert abs(A - A.T).max() < 1e-13


def test_jacobian_fd_slope(two_phase, rng):
    u = 0.5 * rng.normal(size=two_phase.n_vertices)
    d = rng.normal(size=two_phase.n_vertices)
    F = lambda v: asm.assemble_residual(two_phase, CUBIC, v, zero_dirichlet=False)  # noqa: E731
    Jd = asm.assemble_jacobian(two_phase, CUBIC, u).matrix @ d
    ts = np.array([1e-3, 1e-4, 1e-5])
    errs = [np.linalg.norm((F(u + t * d) - F(u)) / t - Jd) for t in ts]
    slope = np.polyfit(np.log(ts), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_averaged_degenerate_equals_jacobian(two_phase, rng):
    u = rng.normal(size=two_phase.n_vertices)
    A = asm.assemble_jacobian(two_phase, CUBIC, u).matrix
    B = asm.assemble_averaged_bilinear(two_phase, CUBIC, u, u.copy()).matrix
    assert abs(A - B).max() <= 1e-14


def test_averaged_linear_rho_independent(two_phase, rng):
    mat = MaterialSpec(2.0, 1.0, Nonlinearity("linear", 3.0), Nonlinearity("linear", 1.0))
    n = two_phase.n_vertices
    A = asm.assemble_averaged_bilinear(two_phase, mat, rng.normal(size=n), rng.normal(size=n)).matrix
    B = asm.assemble_averaged_bilinear(two_phase, mat, np.zeros(n), np.zeros(n)).matrix
    assert abs(A - B).max() <= 1e-13


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_s_quadrature_cubic_exact(a, b):
    # int_0^1 3 (s b + (1 - s) a)^2 ds = a^2 + a b + b^2
    q = asm.QUAD
    rho = Nonlinearity("cubic")
    val = sum(w * rho.deriv(s * b + (1 - s) * a) for s, w in zip(q.s_points, q.s_weights))
    assert float(val) == pytest.approx(a * a + a * b + b * b, abs=1e-14 * max(1.0, a * a + b * b))


def test_averaged_cubic_matches_closed_form(two_phase, rng):
    n = two_phase.n_vertices
    a, b = rng.normal(size=n), rng.normal(size=n)
    mat = MaterialSpec(1.0, 1.0, Nonlinearity("cubic"), Nonlinearity("cubic"))
    A = asm.assemble_averaged_bilinear(two_phase, mat, a, b).matrix
    tris = np.arange(two_phase.n_triangles)
    aq, bq = asm.at_quad(two_phase, a, tris), asm.at_quad(two_phase, b, tris)
    c = aq**2 + aq * bq + bq**2
    K = asm.stiffness_elements(two_phase, tris, np.eye(2)) + asm.mass_elements(two_phase, tris, c)
    B = asm._coo(two_phase, tris, K, n)
    assert abs(A - B).max() <= 1e-14 * max(1.0, abs(B).max())


def test_dirichlet_all_boundary_zero():
    A = sp.identity(4, format="csr") * 2.0
    s = SparseSystem(A, np.zeros(4))
    s = asm.apply_dirichlet(s, None, 0.0, vertices=np.arange(4))
    assert np.all(asm.solve_linear(s) == 0)


def test_dirichlet_idempotent(square):
    sys_ = asm.assemble_jacobian(square, MaterialSpec(), np.zeros(square.n_vertices))
    sys_ = SparseSystem(sys_.matrix, np.ones(square.n_vertices), symmetric=True, mesh=square)
    once = asm.apply_dirichlet(sys_, OUTER, 0.0)
    twice = asm.apply_dirichlet(once, OUTER, 0.0)
    assert abs(once.matrix - twice.matrix).max() == 0
    assert np.array_equal(once.rhs, twice.rhs)
    assert np.array_equal(once.constrained, twice.constrained)


# centre value of -lap u = 1 on the unit square from the double sine series
POISSON_CENTRE = 0.0736713512666702


def poisson(mesh):
    n = mesh.n_vertices
    sys_ = asm.assemble_jacobian(mesh, MaterialSpec(), np.zeros(n))
    rhs = asm.load_vector(mesh, np.arange(mesh.n_triangles), np.ones((mesh.n_triangles, 6)))
    return asm.apply_dirichlet(SparseSystem(sys_.matrix, rhs, symmetric=True, mesh=mesh))


def test_poisson_benchmark(square_fine):
    s = poisson(square_fine)
    u = asm.solve_linear(s)
    assert u.max() == pytest.approx(POISSON_CENTRE, rel=0.02)
    res = np.linalg.norm(s.matrix @ u - s.rhs) / np.linalg.norm(s.rhs)
    assert res <= 1e-12


def test_solve_identity():
    b = np.arange(5.0)
    assert np.array_equal(asm.solve_linear(SparseSystem(sp.identity(5, format="csr"), b, symmetric=True)), b)


def test_solve_nonsymmetric_lu(two_phase, rng):
    beta1 = np.array([[2.0, 0.5], [-0.3, 1.5]])
    mat = MaterialSpec(beta1, 1.0, Nonlinearity("cubic"), Nonlinearity("linear", 1.0))
    n = two_phase.n_vertices
    A = asm.assemble_averaged_bilinear(two_phase, mat, rng.normal(size=n), rng.normal(size=n))
    assert not A.symmetric
    s = asm.apply_dirichlet(SparseSystem(A.matrix, rng.normal(size=n), mesh=two_phase))
    x = asm.solve_linear(s, method="lu")
    assert np.linalg.norm(s.matrix @ x - s.rhs) <= 1e-12 * np.linalg.norm(s.rhs)
    xt = asm.solve_linear(s, transpose=True)
    assert np.linalg.norm(s.matrix.T @ xt - s.rhs) <= 1e-12 * np.linalg.norm(s.rhs)


def test_integrate(square, disk_square):
    assert asm.integrate(square, lambda x: 1.0) == pytest.approx(1.0, abs=1e-12)
    u = NodalField.interpolate(square, lambda x, y: x)
    assert asm.integrate(square, lambda x, v: v**2, fields=(u,)) == pytest.approx(1 / 3, abs=1e-12)
    a = asm.integrate(disk_square, lambda x: 1.0, regions=INCLUSION)
    assert a == pytest.approx(InclusionShape.disk(0.1).area(), abs=1e-13)


def test_recover_gradient_linear_and_quadratic(square_fine):
    lin = NodalField.interpolate(square_fine, lambda x, y: 3 * x + 2 * y)
    assert np.allclose(asm.recover_gradient(square_fine, lin, (0.41, 0.57)), [3, 2], atol=1e-10)
    quad = NodalField.interpolate(square_fine, lambda x, y: x**2)
    assert np.allclose(asm.recover_gradient(square_fine, quad, (0.3, 0.3)), [0.6, 0.0], atol=1e-9)


def test_recover_gradient_locality(disk_square):
    f = NodalField.interpolate(disk_square, lambda x, y: x)
    with pytest.raises(LocalityError):
        asm.recover_gradient(disk_square, f, (0.6, 0.5), r=0.1)
    with pytest.raises(PatchError):
        asm.recover_gradient(disk_square, f, (0.25, 0.25), r=1e-4)
