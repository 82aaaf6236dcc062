import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fine_roof_load, neumann_cos_1d
from thinhomog.errors import ConvergenceError, MeshQualityError
from thinhomog.fem2d import (
    FemSolution,
    apply_periodic,
    assemble_mass,
    assemble_stiffness,
    conjugate_gradient,
    fem_norms,
    load_vector,
    lumped_mass,
    neumann_rhs_cell,
    solve_cell,
    solve_full,
)
from thinhomog.geometry import cell_at, thin_domain
from thinhomog.mesh import TriMesh, mesh_cell, mesh_thin
from thinhomog.profile import ProfileSpec

# Fourier x Legendre Ritz value for G = 2 + 0.5 sin(2 pi y), converged to ~1e-8
# (tests/oracles.py: spectral_r with 28 modes, degree 16).
R_SPECTRAL = 1.6408149

FLAT = ProfileSpec.from_text("0", "1", 1.0)
MILD = ProfileSpec.from_text("0", "2+0.5*sin(2*pi*y)", 1.0)
SINE = ProfileSpec.from_text("0", "2+sin(2*pi*y)", 1.0)


def _one_triangle(pts):
    return TriMesh(np.array(pts, float), np.array([[0, 1, 2]]), np.array([[0, 1], [1, 2], [2, 0]]),
                   np.array(["BOTTOM", "TOP", "LEFT"]))


def _square():
    return mesh_cell(cell_at(FLAT, 0.0), 2, 2)


# assembly


def test_right_triangle_stiffness():
    A = assemble_stiffness(_one_triangle([[0, 0], [1, 0], [0, 1]])).toarray()
    np.testing.assert_allclose(A, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)


def test_right_triangle_mass():
    M = assemble_mass(_one_triangle([[0, 0], [1, 0], [0, 1]])).toarray()
    np.testing.assert_allclose(M, (np.ones((3, 3)) + np.eye(3)) / 24, atol=1e-16)


def test_degenerate_triangle_rejected():
    flat = _one_triangle([[0, 0], [1, 0], [2, 0]])
    with pytest.raises(MeshQualityError):
        assemble_stiffness(flat)
    with pytest.raises(MeshQualityError):
        assemble_mass(flat)


@pytest.mark.parametrize("G", ["1", "2+sin(2*pi*y)", "1.5+0.5*cos(2*pi*y)+0.3*x"])
def test_stiffness_structure(G):
    mesh, _ = mesh_cell(cell_at(ProfileSpec.from_text("0.5", G), 0.7), 12, 6)
    A = assemble_stiffness(mesh)
    assert abs(A - A.T).max() <= 1e-12
    np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), 0, atol=1e-12)
    assert np.all(A.data != 0)
    M = assemble_mass(mesh)
    assert abs(M - M.T).max() <= 1e-15
    assert M.sum() == pytest.approx(mesh.areas().sum(), rel=1e-13)


def test_square_stiffness_kernel_is_constants():
    mesh, _ = _square()
    w = np.linalg.eigvalsh(assemble_stiffness(mesh).toarray())
    assert w[0] == pytest.approx(0, abs=1e-13)
    assert w[1] > 1e-3


def test_two_triangle_mass_positive_definite():
    # unit square split along one diagonal; the reference spectrum comes from
    # the closed-form element matrices, independent of the assembly code
    mesh = TriMesh(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float), np.array([[0, 1, 2], [0, 2, 3]]),
                   np.array([[0, 1], [1, 2], [2, 3], [3, 0]]), np.array(["BOTTOM", "RIGHT", "TOP", "LEFT"]))
    M = assemble_mass(mesh).toarray()
    ref = np.zeros((4, 4))
    loc = (np.ones((3, 3)) + np.eye(3)) / 24
    for t in ([0, 1, 2], [0, 2, 3]):
        ref[np.ix_(t, t)] += loc
    np.testing.assert_allclose(M, ref, atol=1e-16)
    assert np.linalg.eigvalsh(ref).min() > 0
    assert np.linalg.eigvalsh(M).min() > 0


# cell load vector


def test_flat_roof_load_is_zero():
    mesh, _ = mesh_cell(cell_at(FLAT, 0.0), 8, 4)
    assert not np.any(neumann_rhs_cell(mesh))


@pytest.mark.parametrize("G", ["2+sin(2*pi*y)", "1.2+0.3*sin(2*pi*y)^3"])
def test_roof_load_telescopes(G):
    mesh, _ = mesh_cell(cell_at(ProfileSpec.from_text("0", G), 0.0), 32, 4)
    assert abs(neumann_rhs_cell(mesh).sum()) <= 1e-14


def test_roof_load_matches_fine_quadrature():
    G = lambda y: 2 + np.sin(2 * np.pi * y)  # noqa: E731
    Gp = lambda y: 2 * np.pi * np.cos(2 * np.pi * y)  # noqa: E731
    scaled = []
    for ny in (16, 32, 64):
        mesh, _ = mesh_cell(cell_at(SINE, 0.0), ny, 2, min_angle=0)
        top = mesh.top_vertices()
        F = neumann_rhs_cell(mesh)[top]
        ys = mesh.vertices[top, 0]
        ref = fine_roof_load(G, Gp, ys, 32)
        scaled.append(np.max(np.abs(F - ref)) / (1.0 / ny))  # per-unit-length error
    assert scaled[1] <= scaled[0] / 3.5 and scaled[2] <= scaled[1] / 3.5


# periodic merge


def test_apply_periodic_square():
    mesh, pairing = _square()
    red = apply_periodic(assemble_stiffness(mesh), np.ones(9), pairing, mesh)
    assert red.matrix.shape == (6, 6)
    np.testing.assert_allclose(np.asarray(red.matrix.sum(axis=1)).ravel(), 0, atol=1e-14)
    assert red.rhs.sum() == pytest.approx(9)
    u = np.arange(6.0)
    np.testing.assert_array_equal(red.restrict(red.expand(u)), u)


def test_apply_periodic_rejects_mismatch():
    mesh, pairing = _square()
    bad = type(pairing)(np.array([[0, 7], [1, 6], [2, 8]]))
    with pytest.raises(ValueError):
        apply_periodic(assemble_stiffness(mesh), np.zeros(9), bad, mesh)


# cell solves


def test_flat_cell_has_zero_corrector():
    mesh, pairing = mesh_cell(cell_at(ProfileSpec.from_text("0.5", "1"), 0.0), 8, 4)
    cell = solve_cell(mesh, pairing)
    assert not np.any(cell.values)
    assert cell.r * cell.L == pytest.approx(1.5, rel=1e-14)
    assert cell.r == pytest.approx(cell.p, rel=1e-14)


def test_solve_cell_rejects_bad_tolerance():
    mesh, pairing = _square()
    with pytest.raises(ValueError):
        solve_cell(mesh, pairing, tol=-1)


def test_solve_cell_reports_history_on_failure():
    mesh, pairing = mesh_cell(cell_at(SINE, 0.0), 32, 16)
    with pytest.raises(ConvergenceError) as info:
        solve_cell(mesh, pairing, tol=1e-12, maxiter=3)
    assert len(info.value.history) >= 3


def test_mild_cell_against_spectral_oracle():
    errs = []
    for ny in (32, 64, 128):
        mesh, pairing = mesh_cell(cell_at(MILD, 0.0), ny, ny // 2)
        cell = solve_cell(mesh, pairing, tol=1e-10)
        assert cell.r < cell.p
        assert cell.p == pytest.approx(2.0, abs=1e-12)
        errs.append(cell.r - R_SPECTRAL)
        last = cell.r
    assert all(e > 0 for e in errs)  # P1 Ritz values sit above the limit
    assert errs[1] < errs[0] / 3 and errs[2] < errs[1] / 3
    # one Richardson step with the observed second order
    prev = R_SPECTRAL + errs[1]
    assert abs(last + (last - prev) / 3 - R_SPECTRAL) < 1e-4


def test_cell_solution_invariants():
    mesh, pairing = mesh_cell(cell_at(ProfileSpec.from_text("0.3", "2+(1+0.5*x)*sin(2*pi*y)"), 0.4), 32, 16)
    cell = solve_cell(mesh, pairing)
    area = mesh.areas().sum()
    assert abs(lumped_mass(mesh) @ cell.values) <= 1e-9 * area
    pv = np.asarray(pairing.pairs)
    np.testing.assert_array_equal(cell.values[pv[:, 0]], cell.values[pv[:, 1]])
    assert 0 < cell.r <= cell.p


@settings(max_examples=10, deadline=None)
@given(st.floats(-50, 50))
def test_initial_guess_shift_invariance(c):
    mesh, pairing = mesh_cell(cell_at(SINE, 0.0), 16, 8)
    base = solve_cell(mesh, pairing, tol=1e-12)
    shifted = solve_cell(mesh, pairing, tol=1e-12, x0=np.full(mesh.n_vertices, c))
    np.testing.assert_allclose(shifted.values, base.values, atol=1e-9, rtol=0)


def test_energy_identity_on_two_levels():
    res = []
    for ny in (32, 64):
        mesh, pairing = mesh_cell(cell_at(SINE, 0.0), ny, ny // 2)
        cell = solve_cell(mesh, pairing, tol=1e-12)
        a = mesh.areas()
        g = cell.grad
        res.append(abs(a @ (g**2).sum(axis=1) - a @ g[:, 0]) / a.sum())
    # the polygonal flux makes the identity hold up to the solver tolerance
    assert max(res) <= 1e-9


# full thin-domain solves


def test_conjugate_gradient_on_spd_system():
    rng = np.random.default_rng(3)
    B = rng.normal(size=(30, 30))
    A = sp.csr_matrix(B @ B.T + 30 * np.eye(30))
    b = rng.normal(size=30)
    x, hist = conjugate_gradient(A, b, tol=1e-12)
    assert np.linalg.norm(A @ x - b) <= 1e-11 * np.linalg.norm(b)
    assert hist[-1] <= 1e-12


def _thin_mesh(G="2+sin(2*pi*y)", eps=0.125, cpp=8, nz=4):
    return mesh_thin(thin_domain(ProfileSpec.from_text("0", G), eps), cpp, nz)


def test_constant_source_gives_constant_solution():
    mesh = _thin_mesh()
    one = solve_full(mesh, lambda x1, x2: np.ones_like(x1), tol=1e-12)
    np.testing.assert_allclose(one.dofs, 1.0, atol=1e-10)
    zero = solve_full(mesh, lambda x1, x2: np.zeros_like(x1))
    assert not np.any(zero.dofs)


def test_flat_strip_matches_1d_solution():
    errs = []
    for cpp, nz in ((8, 2), (16, 4)):
        mesh = mesh_thin(thin_domain(FLAT, 0.1), cpp, nz)
        w = solve_full(mesh, lambda x1, x2: np.cos(np.pi * x1), tol=1e-11)
        e = w.dofs - neumann_cos_1d(mesh.vertices[:, 0])
        assert np.max(np.abs(e)) < 1e-3
        errs.append(np.sqrt(e @ (assemble_mass(mesh) @ e)))
    assert errs[1] < errs[0] / 3.5


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.5, 4))
def test_a_priori_estimate(a, b, k):
    mesh = _thin_mesh(cpp=8, nz=2)

    def f(x1, x2):
        return a + b * np.cos(k * np.pi * x1) + 5 * x2

    u = solve_full(mesh, f, tol=1e-12)
    n = fem_norms(u)
    fh = f(mesh.vertices[:, 0], mesh.vertices[:, 1])
    f_norm = np.sqrt(fh @ (assemble_mass(mesh) @ fh))
    lhs = n["h1_semi"] ** 2 + n["l2"] ** 2
    # F differs from M f_h by the quadrature error of the interpolant, O(h^2)
    assert lhs <= f_norm * n["l2"] * (1 + 1e-3) + 1e-12


def test_fem_norm_examples():
    mesh, _ = mesh_cell(cell_at(FLAT, 0.0), 4, 4)
    one = FemSolution(mesh, np.ones(mesh.n_vertices))
    n = fem_norms(one)
    assert n["l2"] == pytest.approx(1.0, rel=1e-14)
    assert n["h1_semi"] == pytest.approx(0.0, abs=1e-7)
    lin = FemSolution(mesh, mesh.vertices[:, 0].copy())
    assert fem_norms(lin)["h1_semi"] == pytest.approx(1.0, rel=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_energy_positive_for_random_vectors(seed):
    mesh, _ = mesh_cell(cell_at(SINE, 0.0), 8, 4)
    u = np.random.default_rng(seed).normal(size=mesh.n_vertices)
    A = assemble_stiffness(mesh) + assemble_mass(mesh)
    assert u @ (A @ u) > 0


def test_load_vector_exact_for_quadratics():
    mesh, _ = mesh_cell(cell_at(FLAT, 0.0), 4, 4)
    F = load_vector(mesh, lambda y, z: y**2 + y * z)
    assert F.sum() == pytest.approx(1 / 3 + 1 / 4, rel=1e-13)
