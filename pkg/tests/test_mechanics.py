import numpy as np
import pytest

from cardioem import physics
from cardioem.fem import FeSpace, assemble_mass
from cardioem.mechanics import (
    MechParams,
    MechState,
    assemble_mechanics,
    pressure_integral,
    pressure_offset,
    solve_mechanics,
    step_mechanics_regularized,
)
from cardioem.mesh import FiberField, TriMesh, structured_unit_square

ACT = physics.ActivationParams(mu=4.0)


def setup(n=4, alpha=1.0, gamma_fn=None):
    mesh = structured_unit_square(n, n)
    u_space = FeSpace(mesh, 2, rank=1)
    p_space = FeSpace(mesh, 1)
    fibers = FiberField.axis_aligned(mesh)
    if gamma_fn is None:
        gamma = np.zeros(mesh.num_vertices)
    else:
        gamma = np.array([gamma_fn(x, y) for x, y in mesh.vertices])
    params = MechParams(alpha=alpha)
    system = assemble_mechanics(u_space, p_space, gamma, fibers, params, ACT)
    return mesh, u_space, p_space, system


def bump(x, y):
    return 0.8 * np.exp(-20 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))


# ---------------------------------------------------------------------------
# assembly


def test_constant_sigma_gives_zero_rhs():
    *_, system = setup(4, gamma_fn=None)
    assert np.abs(system.f).max() < 1e-13


def test_rhs_nonzero_for_bump_activation():
    *_, system = setup(4, gamma_fn=bump)
    assert np.abs(system.f).max() > 1e-6


def test_a_block_spd_dense_oracle():
    *_, system = setup(3)
    evals = np.linalg.eigvalsh(system.A.toarray())
    assert evals[0] > 0


def test_alpha_scaling_boundary_only():
    mesh = structured_unit_square(3, 3)
    u_space = FeSpace(mesh, 2, rank=1)
    p_space = FeSpace(mesh, 1)
    fibers = FiberField.axis_aligned(mesh)
    gamma = np.zeros(mesh.num_vertices)
    s1 = assemble_mechanics(u_space, p_space, gamma, fibers, MechParams(alpha=1.0), ACT)
    s2 = assemble_mechanics(u_space, p_space, gamma, fibers, MechParams(alpha=2.0), ACT)
    from cardioem.fem import assemble_boundary_mass

    bm = assemble_boundary_mass(u_space, 1.0)
    assert abs((s2.A - s1.A) - bm).max() < 1e-12


def test_params_validation():
    with pytest.raises(ValueError):
        MechParams(alpha=0.0)
    with pytest.raises(ValueError):
        MechParams(epsilon=-1.0)


# ---------------------------------------------------------------------------
# saddle solve


def test_zero_activation_zero_solution():
    *_, system = setup(4)
    state, res = solve_mechanics(system, tol=1e-10)
    assert res.converged
    assert np.linalg.norm(state.u) < 1e-8
    assert np.linalg.norm(state.p) < 1e-8


def test_constant_activation_zero_solution():
    # gamma constant and positive: sigma is constant but not mu*I
    *_, system = setup(4, gamma_fn=lambda x, y: 0.4)
    state, res = solve_mechanics(system, tol=1e-10)
    assert res.converged
    assert np.linalg.norm(state.u) < 1e-8
    assert np.linalg.norm(state.p) < 1e-8


def test_bump_matches_dense_lu_oracle():
    _, u_space, p_space, system = setup(3, gamma_fn=bump)
    state, res = solve_mechanics(system, tol=1e-12)
    assert res.converged
    n, k = u_space.ndof, p_space.n_scalar
    block = np.zeros((n + k, n + k))
    block[:n, :n] = system.A.toarray()
    block[:n, n:] = system.B.T.toarray()
    block[n:, :n] = system.B.toarray()
    sol = np.linalg.solve(block, np.concatenate([system.f, np.zeros(k)]))
    scale = max(1.0, np.linalg.norm(sol))
    assert np.linalg.norm(np.concatenate([state.u, state.p]) - sol) < 1e-8 * scale


def test_incompressibility_residual():
    *_, system = setup(5, gamma_fn=bump)
    state, res = solve_mechanics(system, tol=1e-10)
    assert res.converged
    bu = np.linalg.norm(system.B.dot(state.u))
    assert bu <= 1e-8 * max(1.0, np.linalg.norm(state.u))


def test_robin_uniqueness_dense_nullspace_probe():
    *_, system = setup(2)
    n, k = system.A.shape[0], system.B.shape[0]
    block = np.zeros((n + k, n + k))
    block[:n, :n] = system.A.toarray()
    block[:n, n:] = system.B.T.toarray()
    block[n:, :n] = system.B.toarray()
    smin = np.linalg.svd(block, compute_uv=False)[-1]
    assert smin > 1e-10


def test_frame_invariance():
    # rotating mesh and fibers together leaves solution norms unchanged
    theta = 0.31
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])

    mesh = structured_unit_square(4, 4)
    gamma = np.array([bump(x, y) for x, y in mesh.vertices])

    u_space = FeSpace(mesh, 2, rank=1)
    p_space = FeSpace(mesh, 1)
    sys0 = assemble_mechanics(
        u_space, p_space, gamma, FiberField.axis_aligned(mesh),
        MechParams(alpha=1.0), ACT,
    )
    st0, _ = solve_mechanics(sys0, tol=1e-11)

    mesh_r = TriMesh(mesh.vertices @ R.T, mesh.triangles)
    ur_space = FeSpace(mesh_r, 2, rank=1)
    pr_space = FeSpace(mesh_r, 1)
    nt = mesh.num_triangles
    fib_r = FiberField(np.tile(R[:, 0], (nt, 1)), np.tile(R[:, 1], (nt, 1)))
    sys1 = assemble_mechanics(
        ur_space, pr_space, gamma, fib_r, MechParams(alpha=1.0), ACT
    )
    st1, _ = solve_mechanics(sys1, tol=1e-11)

    Mu0, Mp0 = sys0.masses()
    Mu1, Mp1 = sys1.masses()
    nu0 = np.sqrt(st0.u @ Mu0.dot(st0.u))
    nu1 = np.sqrt(st1.u @ Mu1.dot(st1.u))
    np0 = np.sqrt(st0.p @ Mp0.dot(st0.p))
    np1 = np.sqrt(st1.p @ Mp1.dot(st1.p))
    assert nu0 == pytest.approx(nu1, abs=1e-8, rel=1e-6)
    assert np0 == pytest.approx(np1, abs=1e-8, rel=1e-6)


# ---------------------------------------------------------------------------
# pseudo-compressible mode


def test_regularized_stationary_at_saddle():
    *_, system = setup(3, gamma_fn=bump)
    state, res = solve_mechanics(system, tol=1e-12)
    new, res2 = step_mechanics_regularized(state, system, dt=0.01, epsilon=0.1, tol=1e-12)
    assert res2.converged
    assert np.linalg.norm(new.u - state.u) < 1e-7
    assert np.linalg.norm(new.p - state.p) < 1e-7


def test_regularized_stiff_limit_stays_near_start():
    _, u_space, p_space, system = setup(3, gamma_fn=bump)
    saddle, _ = solve_mechanics(system, tol=1e-12)
    zero = MechState(np.zeros(u_space.ndof), np.zeros(p_space.n_scalar))
    dt = 0.01
    s4, r4 = step_mechanics_regularized(zero, system, dt=dt, epsilon=1e4, tol=1e-13)
    s5, r5 = step_mechanics_regularized(zero, system, dt=dt, epsilon=1e5, tol=1e-13)
    assert r4.converged and r5.converged
    # one implicit step moves O(dt/eps): tiny against the saddle solution
    # and shrinking proportionally with 1/eps
    assert np.linalg.norm(s4.u) <= 1e-3 * np.linalg.norm(saddle.u)
    ratio = np.linalg.norm(s4.u) / np.linalg.norm(s5.u)
    assert ratio == pytest.approx(10.0, rel=0.2)


def test_regularized_pseudo_time_converges_to_saddle():
    _, u_space, p_space, system = setup(3, gamma_fn=bump)
    saddle, _ = solve_mechanics(system, tol=1e-12)
    state = MechState(np.zeros(u_space.ndof), np.zeros(p_space.n_scalar))
    for _ in range(200):
        state, res = step_mechanics_regularized(
            state, system, dt=0.05, epsilon=0.01, tol=1e-12
        )
        assert res.converged
    assert np.linalg.norm(state.u - saddle.u) < 1e-6
    assert np.linalg.norm(state.p - saddle.p) < 1e-6


def test_regularized_rejects_bad_args():
    *_, system = setup(2)
    state = MechState(np.zeros(system.A.shape[0]), np.zeros(system.B.shape[0]))
    with pytest.raises(ValueError):
        step_mechanics_regularized(state, system, dt=0.1, epsilon=0.0)


# ---------------------------------------------------------------------------
# pressure functional


def test_pressure_offset_zero_state():
    *_, system = setup(3)
    state = MechState(np.zeros(system.A.shape[0]), np.zeros(system.B.shape[0]))
    assert abs(pressure_offset(state, system)) < 1e-12


def test_pressure_offset_constant_activation():
    *_, system = setup(3, gamma_fn=lambda x, y: 0.25)
    state, res = solve_mechanics(system, tol=1e-11)
    assert abs(pressure_offset(state, system)) < 1e-8
    assert abs(pressure_integral(state, system)) < 1e-8


def test_pressure_offset_matches_integral_for_bump():
    *_, system = setup(4, gamma_fn=bump)
    state, res = solve_mechanics(system, tol=1e-11)
    assert res.converged
    off = pressure_offset(state, system)
    integral = pressure_integral(state, system)
    assert off == pytest.approx(integral, abs=1e-6)
