import math

import numpy as np
import pytest
import scipy.sparse as sp

from cardioem.fem import (
    FeSpace,
    NonSpdCoefficientError,
    assemble_boundary_mass,
    assemble_divergence,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    edge_rule,
    l2_error,
    solve_cg,
    solve_saddle,
    triangle_rule,
)
from cardioem.mesh import TriMesh, structured_unit_square


def reference_triangle():
    return TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [[0, 1, 2]])


# ---------------------------------------------------------------------------
# quadrature


def test_triangle_rule_weights_sum_to_reference_measure():
    r = triangle_rule()
    assert abs(r.weights.sum() - 0.5) < 1e-15


def test_edge_rule_weights_sum_to_one():
    r = edge_rule()
    assert abs(r.weights.sum() - 1.0) < 1e-15


@pytest.mark.parametrize("i,j", [(i, j) for i in range(5) for j in range(5 - i)])
def test_triangle_rule_exact_for_monomials(i, j):
    # oracle: int_T x^i y^j dA = i! j! / (i + j + 2)! on the reference triangle
    r = triangle_rule()
    x, y = r.points[:, 1], r.points[:, 2]
    got = float(np.sum(r.weights * x**i * y**j))
    exact = math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)
    assert abs(got - exact) < 1e-15


@pytest.mark.parametrize("k", range(6))
def test_edge_rule_exact_for_monomials(k):
    r = edge_rule()
    got = float(np.sum(r.weights * r.points[:, 0] ** k))
    assert abs(got - 1.0 / (k + 1)) < 1e-15


# ---------------------------------------------------------------------------
# spaces


def test_dof_counts():
    m = structured_unit_square(3, 3)
    ne = len(m.edges())
    assert FeSpace(m, 1).n_scalar == m.num_vertices
    assert FeSpace(m, 2).n_scalar == m.num_vertices + ne
    assert FeSpace(m, 2, rank=1).ndof == 2 * (m.num_vertices + ne)


def test_p2_interpolates_quadratics_exactly():
    m = structured_unit_square(2, 3)
    s = FeSpace(m, 2)
    f = lambda x, y: 1.0 + 2 * x - y + x * y + 3 * x**2 - 0.5 * y**2
    coeffs = s.interpolate(f)
    assert l2_error(s, coeffs, f) < 1e-13


# ---------------------------------------------------------------------------
# mass


def test_p1_local_mass_reference_triangle():
    s = FeSpace(reference_triangle(), 1)
    M = assemble_mass(s).toarray()
    expect = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0
    assert np.allclose(M, expect, atol=1e-15)


def test_mass_entry_sum_is_domain_area():
    s = FeSpace(structured_unit_square(5, 4), 1)
    assert abs(assemble_mass(s).sum() - 1.0) < 1e-12


def test_mass_pairing_with_ones():
    s = FeSpace(structured_unit_square(4, 4), 2)
    M = assemble_mass(s)
    one = np.ones(s.n_scalar)
    assert abs(one @ M.dot(one) - 1.0) < 1e-12


def test_mass_spd():
    s = FeSpace(structured_unit_square(3, 3), 1)
    M = assemble_mass(s).toarray()
    assert np.allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() > 0


# ---------------------------------------------------------------------------
# stiffness


def test_p1_local_stiffness_reference_triangle():
    s = FeSpace(reference_triangle(), 1)
    K = assemble_stiffness(s).toarray()
    expect = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    assert np.allclose(K, expect, atol=1e-15)


def test_constants_in_kernel():
    s = FeSpace(structured_unit_square(6, 5), 2)
    rng = np.random.default_rng(0)
    t = rng.uniform(-0.3, 0.3)
    coeff = np.array([[1.0 + t, t], [t, 1.2]])
    A = assemble_stiffness(s, coeff)
    one = np.ones(s.n_scalar)
    Amax = abs(A).max()
    assert np.abs(A.dot(one)).max() <= 1e-12 * Amax


def test_stiffness_linear_in_coefficient():
    s = FeSpace(structured_unit_square(3, 3), 1)
    A1 = assemble_stiffness(s, np.eye(2)).toarray()
    A2 = assemble_stiffness(s, 2 * np.eye(2)).toarray()
    assert np.allclose(A2, 2 * A1, atol=1e-14)


def test_stiffness_rejects_non_spd_with_element_id():
    s = FeSpace(structured_unit_square(2, 2), 1)
    ne, nq = len(s.conn), len(s.quad.weights)
    coeff = np.broadcast_to(np.eye(2), (ne, nq, 2, 2)).copy()
    coeff[3] = -np.eye(2)
    with pytest.raises(NonSpdCoefficientError, match="element 3"):
        assemble_stiffness(s, coeff)


def test_assembled_forms_symmetric():
    s = FeSpace(structured_unit_square(4, 4), 2)
    for A in (assemble_mass(s), assemble_stiffness(s), assemble_boundary_mass(s, 1.0)):
        d = abs(A - A.T).max()
        assert d <= 1e-14 * max(abs(A).max(), 1.0)


def test_stiffness_kernel_dimension_dense_oracle():
    s = FeSpace(structured_unit_square(2, 2), 1)
    K = assemble_stiffness(s).toarray()
    evals = np.linalg.eigvalsh(K)
    assert evals[0] < 1e-12
    assert evals[1] > 1e-8


def test_csr_invariants():
    s = FeSpace(structured_unit_square(3, 3), 2)
    A = assemble_stiffness(s)
    assert isinstance(A, sp.csr_matrix)
    assert A.has_sorted_indices
    # no duplicate (row, col) pairs
    for r in range(A.shape[0]):
        cols = A.indices[A.indptr[r] : A.indptr[r + 1]]
        assert len(np.unique(cols)) == len(cols)


# ---------------------------------------------------------------------------
# boundary mass


def test_boundary_mass_zero_alpha():
    s = FeSpace(structured_unit_square(3, 3), 1)
    assert abs(assemble_boundary_mass(s, 0.0)).max() == 0.0


def test_boundary_mass_perimeter():
    s = FeSpace(structured_unit_square(4, 4), 1)
    B = assemble_boundary_mass(s, 1.0)
    one = np.ones(s.n_scalar)
    assert abs(one @ B.dot(one) - 4.0) < 1e-12


def test_boundary_mass_scales_with_alpha():
    s = FeSpace(structured_unit_square(3, 3), 2)
    B1 = assemble_boundary_mass(s, 1.0)
    B3 = assemble_boundary_mass(s, 3.0)
    assert abs(B3 - 3 * B1).max() < 1e-14


def test_boundary_mass_rows_only_on_boundary():
    m = structured_unit_square(4, 4)
    s = FeSpace(m, 1)
    B = assemble_boundary_mass(s, 1.0)
    bverts = set(m.boundary_edges[:, 0]) | set(m.boundary_edges[:, 1])
    nonzero_rows = set(np.flatnonzero(np.asarray(abs(B).sum(axis=1)).ravel()))
    assert nonzero_rows <= bverts


# ---------------------------------------------------------------------------
# divergence


def build_th(n):
    m = structured_unit_square(n, n)
    return FeSpace(m, 2, rank=1), FeSpace(m, 1)


def test_divergence_constant_field():
    u_space, p_space = build_th(3)
    D = assemble_divergence(u_space, p_space)
    u = u_space.interpolate(lambda x, y: (1.0, 0.0))
    assert np.abs(D.dot(u)).max() < 1e-13


def test_divergence_free_linear_field():
    u_space, p_space = build_th(3)
    D = assemble_divergence(u_space, p_space)
    u = u_space.interpolate(lambda x, y: (x, -y))
    assert np.abs(D.dot(u)).max() < 1e-12


def test_divergence_partition_of_unity():
    u_space, p_space = build_th(4)
    D = assemble_divergence(u_space, p_space)
    u = u_space.interpolate(lambda x, y: (x, 0.0))
    total = np.ones(p_space.n_scalar) @ D.dot(u)
    assert abs(total - 1.0) < 1e-12


def test_divergence_applied_to_interpolated_divfree_polynomial():
    u_space, p_space = build_th(4)
    D = assemble_divergence(u_space, p_space)
    u = u_space.interpolate(lambda x, y: (x * y, -0.5 * y**2))
    assert np.linalg.norm(D.dot(u)) < 1e-10


# ---------------------------------------------------------------------------
# load


def test_load_constant_sums_to_area():
    s = FeSpace(structured_unit_square(4, 4), 1)
    F = assemble_load(s, lambda x, y: 1.0)
    assert abs(F.sum() - 1.0) < 1e-12


def test_load_zero():
    s = FeSpace(structured_unit_square(2, 2), 1)
    assert np.all(assemble_load(s, lambda x, y: 0.0) == 0.0)


def test_load_linear_integrand():
    s = FeSpace(structured_unit_square(5, 5), 1)
    F = assemble_load(s, lambda x, y: x)
    assert abs(F.sum() - 0.5) < 1e-12


def test_load_pairing_equals_integral():
    s = FeSpace(structured_unit_square(4, 4), 2)
    F = assemble_load(s, lambda x, y: np.exp(x) * y)
    one = np.ones(s.n_scalar)
    exact = (np.e - 1.0) * 0.5
    assert abs(one @ F - exact) < 1e-5  # quadrature-limited


# ---------------------------------------------------------------------------
# conjugate gradients


def test_cg_identity_one_iteration():
    A = sp.eye(5, format="csr")
    b = np.arange(1.0, 6.0)
    res = solve_cg(A, b)
    assert res.converged
    assert res.iterations == 1
    assert np.allclose(res.x, b)


def test_cg_diagonal():
    A = sp.diags([2.0, 1.0]).tocsr()
    res = solve_cg(A, np.array([2.0, 1.0]))
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-12)


def test_cg_nonconvergence_flag():
    s = FeSpace(structured_unit_square(8, 8), 1)
    K = assemble_stiffness(s) + 1e-8 * assemble_mass(s)
    b = np.random.default_rng(1).standard_normal(s.n_scalar)
    res = solve_cg(K, b, tol=1e-14, maxit=2)
    assert not res.converged
    assert res.iterations == 2
    assert np.all(np.isfinite(res.x))


def test_cg_poisson_mms_second_order():
    # oracle: u = cos(pi x) cos(pi y), f = 2 pi^2 u, pure Neumann
    errs = []
    for n in (8, 16, 32):
        m = structured_unit_square(n, n)
        s = FeSpace(m, 1)
        K = assemble_stiffness(s)
        M = assemble_mass(s)
        b = assemble_load(s, lambda x, y: 2 * np.pi**2 * np.cos(np.pi * x) * np.cos(np.pi * y))
        ones = np.ones(s.n_scalar)
        proj = lambda v: v - ones * (float(ones @ v) / len(ones))
        r = solve_cg(K, b, tol=1e-12, constraint=proj, jacobi=True)
        assert r.converged
        mvec = np.asarray(M.sum(axis=1)).ravel()
        u = r.x - float(mvec @ r.x) / float(mvec.sum())
        errs.append(l2_error(s, u, lambda x, y: np.cos(np.pi * x) * np.cos(np.pi * y)))
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    assert all(r > 3.5 for r in ratios)  # ~4x per halving


def test_cg_projected_iterates_stay_mean_zero():
    s = FeSpace(structured_unit_square(6, 6), 1)
    K = assemble_stiffness(s)
    M = assemble_mass(s)
    m = np.asarray(M.sum(axis=1)).ravel()
    proj = lambda v: v - m * (float(m @ v) / float(m @ m))
    b = assemble_load(s, lambda x, y: np.cos(np.pi * x))
    means = []
    res = solve_cg(
        K, b, tol=1e-12, constraint=proj,
        callback=lambda x: means.append(abs(float(m @ x))),
    )
    assert res.converged
    assert max(means) < 1e-12


# ---------------------------------------------------------------------------
# saddle solver


def test_saddle_zero_data():
    u_space, p_space = build_th(2)
    A = (assemble_stiffness(u_space) + assemble_boundary_mass(u_space, 1.0)).tocsr()
    B = (-assemble_divergence(u_space, p_space)).tocsr()
    res = solve_saddle(A, B, np.zeros(u_space.ndof))
    assert res.converged
    assert np.linalg.norm(res.u) == 0.0
    assert np.linalg.norm(res.p) == 0.0


def test_saddle_decoupled_block():
    A = sp.eye(4, format="csr")
    B = sp.csr_matrix((2, 4))
    f = np.array([1.0, -2.0, 3.0, 0.5])
    res = solve_saddle(A, B, f)
    assert np.allclose(res.u, f, atol=1e-12)
    assert np.allclose(res.p, 0.0)


def test_saddle_matches_dense_lu_oracle():
    u_space, p_space = build_th(3)
    A = (assemble_stiffness(u_space) + assemble_boundary_mass(u_space, 1.0)).tocsr()
    B = (-assemble_divergence(u_space, p_space)).tocsr()
    rng = np.random.default_rng(3)
    f = rng.standard_normal(u_space.ndof)
    res = solve_saddle(A, B, f, tol=1e-12)
    assert res.converged

    n, k = u_space.ndof, p_space.n_scalar
    block = np.zeros((n + k, n + k))
    block[:n, :n] = A.toarray()
    block[:n, n:] = B.T.toarray()
    block[n:, :n] = B.toarray()
    sol = np.linalg.solve(block, np.concatenate([f, np.zeros(k)]))
    assert np.linalg.norm(res.u - sol[:n]) < 1e-8 * max(1, np.linalg.norm(sol[:n]))
    assert np.linalg.norm(res.p - sol[n:]) < 1e-8 * max(1, np.linalg.norm(sol[n:]))


def test_saddle_residual_contracts():
    u_space, p_space = build_th(3)
    A = (assemble_stiffness(u_space) + assemble_boundary_mass(u_space, 2.0)).tocsr()
    B = (-assemble_divergence(u_space, p_space)).tocsr()
    f = assemble_load(u_space, lambda x, y: (np.sin(np.pi * x), np.cos(np.pi * y)))
    res = solve_saddle(A, B, f, tol=1e-10)
    assert res.converged
    assert res.res_primal <= 1e-9
    assert res.res_constraint <= 1e-9
