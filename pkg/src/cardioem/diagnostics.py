"""Runtime verification: energies, coercivity, residuals, limit studies.

These routines re-examine finished (or running) simulations: quadratic-form
energies per step, boundedness across noise ensembles, dense-matrix
coercivity and inf-sup probes on small meshes, per-step residuals of the
discrete identities, the pseudo-compressible pressure limit, and
manufactured-solution convergence studies for the two solver stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import mechanics, physics
from .fem import (
    FeSpace,
    assemble_boundary_load,
    assemble_boundary_mass,
    assemble_divergence,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    edge_quad_geometry,
    l2_error,
    l4_norm,
    solve_cg,
    solve_saddle,
)
from .mesh import FiberField, TriMesh, structured_unit_square


# ---------------------------------------------------------------------------
# energies


class EnergyEntry(NamedTuple):
    v_l2sq: float
    w_l2sq: float
    grad_vi_sq: float
    grad_ve_sq: float


def discrete_energy(state, mass, stiffness) -> EnergyEntry:
    """Instantaneous quadratic forms of the electric unknowns."""
    return EnergyEntry(
        v_l2sq=float(state.v @ mass.dot(state.v)),
        w_l2sq=float(state.w @ mass.dot(state.w)),
        grad_vi_sq=float(state.v_i @ stiffness.dot(state.v_i)),
        grad_ve_sq=float(state.v_e @ stiffness.dot(state.v_e)),
    )


@dataclass
class EnergyRecord:
    """Per-step energy history of one path.

    v_l2sq, w_l2sq, gamma_l2sq, u_h1sq, p_l2sq are instantaneous;
    cum_grad accumulates dt * (|grad v_i|^2 + |grad v_e|^2) and cum_v4
    accumulates dt * |v|^4_{L4}.
    """

    v_l2sq: list = field(default_factory=list)
    w_l2sq: list = field(default_factory=list)
    gamma_l2sq: list = field(default_factory=list)
    cum_grad: list = field(default_factory=list)
    cum_v4: list = field(default_factory=list)
    u_h1sq: list = field(default_factory=list)
    p_l2sq: list = field(default_factory=list)

    FIELDS = ("v_l2sq", "w_l2sq", "gamma_l2sq", "cum_grad", "cum_v4",
              "u_h1sq", "p_l2sq")

    @classmethod
    def empty(cls) -> "EnergyRecord":
        return cls()

    def arrays(self) -> dict:
        return {name: np.asarray(getattr(self, name)) for name in self.FIELDS}

    def suprema(self) -> dict:
        return {
            name: (float(np.max(vals)) if len(vals) else 0.0)
            for name, vals in self.arrays().items()
        }

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


_H1_CACHE: dict = {}


def _h1_gram(u_space: FeSpace):
    key = id(u_space)
    if key not in _H1_CACHE:
        _H1_CACHE[key] = (
            assemble_mass(u_space) + assemble_stiffness(u_space)
        ).tocsr()
    return _H1_CACHE[key]


def append_energy(
    record: EnergyRecord,
    state,
    gamma: np.ndarray,
    mech_state,
    mass,
    stiff_unit,
    u_space: FeSpace,
    p_space: FeSpace,
    scalar_space: FeSpace,
    dt: float,
):
    entry = discrete_energy(state, mass, stiff_unit)
    record.v_l2sq.append(entry.v_l2sq)
    record.w_l2sq.append(entry.w_l2sq)
    record.gamma_l2sq.append(float(gamma @ mass.dot(gamma)))
    prev_grad = record.cum_grad[-1] if record.cum_grad else 0.0
    record.cum_grad.append(
        prev_grad + dt * (entry.grad_vi_sq + entry.grad_ve_sq)
    )
    prev_v4 = record.cum_v4[-1] if record.cum_v4 else 0.0
    record.cum_v4.append(prev_v4 + dt * l4_norm(scalar_space, state.v) ** 4)
    G = _h1_gram(u_space)
    record.u_h1sq.append(float(mech_state.u @ G.dot(mech_state.u)))
    record.p_l2sq.append(float(mech_state.p @ mass.dot(mech_state.p)))


@dataclass
class BoundednessReport:
    finite: bool
    max_ratios: dict
    within_factor: bool
    grad_slope_ratio: float
    factor: float


def energy_boundedness_report(
    path_records: list,
    deterministic: EnergyRecord,
    factor: float = 10.0,
) -> BoundednessReport:
    """Compare per-path energy suprema against a deterministic baseline.

    Also estimates whether the cumulative gradient integral grows at most
    linearly late in the run: the fitted slope over the last quarter must
    not exceed 1.5x the slope over the preceding quarter.
    """
    det_sup = deterministic.suprema()
    ratios = {name: 0.0 for name in EnergyRecord.FIELDS}
    finite = True
    slope_ratios = []
    for rec in path_records:
        finite &= rec.is_finite()
        sup = rec.suprema()
        for name in ratios:
            base = max(det_sup[name], 1e-12)
            ratios[name] = max(ratios[name], sup[name] / base)
        cg = np.asarray(rec.cum_grad)
        n = len(cg)
        if n >= 8:
            q3 = cg[n // 2 : 3 * n // 4]
            q4 = cg[3 * n // 4 :]
            s3 = np.polyfit(np.arange(len(q3)), q3, 1)[0]
            s4 = np.polyfit(np.arange(len(q4)), q4, 1)[0]
            slope_ratios.append(s4 / max(s3, 1e-300))
    slope_ratio = max(slope_ratios) if slope_ratios else 0.0
    return BoundednessReport(
        finite=finite,
        max_ratios=ratios,
        within_factor=finite and all(r <= factor for r in ratios.values()),
        grad_slope_ratio=float(slope_ratio),
        factor=factor,
    )


# ---------------------------------------------------------------------------
# dense structural probes (small meshes only)


_DENSE_LIMIT = 6000


def coercivity_estimate(
    mesh: TriMesh,
    gamma: np.ndarray,
    alpha: float,
    act: physics.ActivationParams | None = None,
) -> float:
    """Smallest generalized eigenvalue of the elastic form vs the H1 Gram.

    Dense eigensolve; raises on meshes too large for dense work.
    """
    act = act or physics.ActivationParams()
    u_space = FeSpace(mesh, degree=2, rank=1)
    if u_space.ndof > _DENSE_LIMIT:
        raise ValueError(
            f"mesh too large for dense coercivity probe ({u_space.ndof} dofs)"
        )
    fibers = FiberField.axis_aligned(mesh)
    sigma = mechanics.sigma_at_quad(u_space, gamma, fibers, act)
    A = assemble_stiffness(u_space, sigma)
    if alpha > 0:
        A = A + assemble_boundary_mass(u_space, alpha)
    G = assemble_mass(u_space) + assemble_stiffness(u_space)
    vals = scipy.linalg.eigh(
        A.toarray(), G.toarray(), eigvals_only=True, subset_by_index=[0, 0]
    )
    return float(vals[0])


def infsup_estimate(mesh: TriMesh, alpha: float = 1.0) -> float:
    """Discrete inf-sup constant of the velocity/pressure pair.

    Smallest singular value of Mp^{-1/2} B H^{-1/2}, all dense.
    """
    u_space = FeSpace(mesh, degree=2, rank=1)
    p_space = FeSpace(mesh, degree=1)
    if u_space.ndof > _DENSE_LIMIT:
        raise ValueError("mesh too large for dense inf-sup probe")
    B = assemble_divergence(u_space, p_space).toarray()
    H = (assemble_mass(u_space) + assemble_stiffness(u_space)).toarray()
    Mp = assemble_mass(p_space).toarray()
    Lh = scipy.linalg.cholesky(H, lower=True)
    Lp = scipy.linalg.cholesky(Mp, lower=True)
    S = scipy.linalg.solve_triangular(Lp, B, lower=True)
    S = scipy.linalg.solve_triangular(Lh, S.T, lower=True).T
    return float(np.linalg.svd(S, compute_uv=False)[-1])


# ---------------------------------------------------------------------------
# residuals of the discrete identities


@dataclass
class ResidualReport:
    i_row: float
    e_row: float
    w_row: float
    gamma_row: float
    compat: float


def weak_residual(record, ionic: physics.IonicParams, dt: float) -> ResidualReport:
    """Re-evaluate one stored step against its discrete identities.

    The e-row residual is measured orthogonally to the constant direction
    (the component along it is the stimulus imbalance absorbed by the
    zero-mean test space); `compat` is the defect of that absorbed part
    against twice the integrated stimulus.
    """
    sys_ = record.system
    M, dt_ = sys_.mass, sys_.dt
    before, after = record.before, record.after
    n = sys_.space.n_scalar

    x = np.concatenate([after.v_i, after.v_e])
    rhs = np.concatenate([record.rhs_i, record.rhs_e])
    r = sys_.block.dot(x) - rhs
    r_i, r_e = r[:n], r[n:]

    m = sys_.lumped
    r_e_perp = r_e - m * (float(m @ r_e) / float(m @ m))

    scale_i = max(np.linalg.norm(record.rhs_i), 1.0)
    scale_e = max(np.linalg.norm(record.rhs_e), 1.0)

    w_res = after.w - (
        before.w + dt_ * physics.h_kin(before.v, before.w, ionic) + record.noise_w
    )
    if record.gamma_after is not None:
        g_res = record.gamma_after - (
            record.gamma_before + dt_ * record.gamma_rate
        )
        g_norm = float(np.linalg.norm(g_res))
    else:
        g_norm = 0.0

    stim = float(np.sum(record.i_app))
    compat = abs(float(np.sum(r_i) + np.sum(r_e)) + 2.0 * stim)

    return ResidualReport(
        i_row=float(np.linalg.norm(r_i)) / scale_i,
        e_row=float(np.linalg.norm(r_e_perp)) / scale_e,
        w_row=float(np.linalg.norm(w_res)),
        gamma_row=g_norm,
        compat=compat,
    )


def step_energy_identity(record) -> float:
    """Defect of the per-step energy inequality for the forcing-free step.

    For a step with no reaction, stimulus, or noise the scheme dissipates:
    |v+|_M^2 - |v|_M^2 + 2 dt (a_i(v_i+, v_i+) + a_e(v_e+, v_e+)) <= 0 up
    to solver tolerance.  Returns the (signed) left-hand side.
    """
    sys_ = record.system
    M = sys_.mass
    before, after = record.before, record.after
    lhs = float(after.v @ M.dot(after.v)) - float(before.v @ M.dot(before.v))
    lhs += 2.0 * sys_.dt * float(after.v_i @ sys_.A_i.dot(after.v_i))
    lhs += 2.0 * sys_.dt * float(after.v_e @ sys_.A_e.dot(after.v_e))
    return lhs


# ---------------------------------------------------------------------------
# pseudo-compressible pressure limit


def eps_pressure_study(config, eps_list, mesh: TriMesh | None = None):
    """Distance of the regularized pressure to the saddle pressure per eps.

    Runs the coupled simulation once with per-step mechanics and snapshots,
    then replays the stored activation history through the pseudo-
    compressible stepper for each epsilon, accumulating the L2-in-time
    discrepancy of the pressures (and displacements).
    """
    from dataclasses import replace as _replace

    from .driver import run_simulation

    if any(e <= 0 for e in eps_list):
        raise ValueError("eps values must be positive")
    if sorted(eps_list, reverse=True) != list(eps_list):
        raise ValueError("eps_list must be decreasing")

    mesh = mesh if mesh is not None else config.build_mesh()
    n_steps = int(round(config.T / config.dt))
    cfg = _replace(
        config,
        mech_refresh=1,
        snapshot_iters=tuple(range(n_steps + 1)),
        track_energy=False,
    )
    base = run_simulation(cfg, mesh=mesh)

    u_space = FeSpace(mesh, degree=2, rank=1)
    p_space = FeSpace(mesh, degree=1)
    fibers = FiberField.axis_aligned(mesh)
    systems = []
    for it in range(1, n_steps + 1):
        snap = base.snapshots[it]
        systems.append(
            mechanics.assemble_mechanics(
                u_space, p_space, snap.gamma, fibers, cfg.mech, cfg.activation
            )
        )
    Mp = assemble_mass(p_space)

    rows = []
    for eps in eps_list:
        state = mechanics.MechState(
            np.zeros(u_space.ndof), np.zeros(p_space.n_scalar)
        )
        disc2 = 0.0
        for it in range(1, n_steps + 1):
            state, res = mechanics.step_mechanics_regularized(
                state, systems[it - 1], cfg.dt, eps, tol=cfg.mech_tol
            )
            dp = state.p - base.snapshots[it].p
            disc2 += cfg.dt * float(dp @ Mp.dot(dp))
        rows.append((float(eps), float(np.sqrt(disc2))))
    return rows


# ---------------------------------------------------------------------------
# manufactured-solution convergence studies


@dataclass
class ConvergenceStudy:
    ns: list
    errors: dict
    orders: dict

    def order(self, name: str) -> float:
        e = np.asarray(self.errors[name])
        h = 1.0 / np.asarray(self.ns, dtype=float)
        return float(np.polyfit(np.log(h), np.log(e), 1)[0])


def mms_poisson_study(ns=(8, 16, 32, 64)) -> ConvergenceStudy:
    """P1 pure-Neumann Poisson against u = cos(pi x) cos(pi y)."""
    exact = lambda x, y: np.cos(np.pi * x) * np.cos(np.pi * y)
    rhs_fn = lambda x, y: 2.0 * np.pi**2 * exact(x, y)
    errs = []
    for n in ns:
        mesh = structured_unit_square(n, n)
        space = FeSpace(mesh, degree=1)
        K = assemble_stiffness(space)
        M = assemble_mass(space)
        b = assemble_load(space, rhs_fn)
        ones = np.ones(space.n_scalar)

        def proj(x, ones=ones):
            return x - ones * (float(ones @ x) / len(ones))

        res = solve_cg(K, b, tol=1e-12, constraint=proj, jacobi=True)
        m = np.asarray(M.sum(axis=1)).ravel()
        uh = res.x - float(m @ res.x) / float(m.sum())
        errs.append(l2_error(space, uh, exact))
    study = ConvergenceStudy(list(ns), {"u": errs}, {})
    study.orders["u"] = study.order("u")
    return study


def mms_stokes_study(ns=(4, 8, 16), mu: float = 1.0, alpha: float = 1.0) -> ConvergenceStudy:
    """Taylor-Hood solve of the Robin Stokes-like block against smooth fields.

    Velocity is a divergence-free trig field, pressure a trig scalar; the
    mismatch of the Robin condition is absorbed into a boundary load.
    """
    pi = np.pi
    u_ex = lambda x, y: (np.sin(pi * x) * np.cos(pi * y),
                         -np.cos(pi * x) * np.sin(pi * y))
    p_ex = lambda x, y: np.cos(pi * x) * np.cos(pi * y)

    def grad_u(x, y):
        return np.array(
            [
                [pi * np.cos(pi * x) * np.cos(pi * y),
                 -pi * np.sin(pi * x) * np.sin(pi * y)],
                [pi * np.sin(pi * x) * np.sin(pi * y),
                 -pi * np.cos(pi * x) * np.cos(pi * y)],
            ]
        )

    def f_ex(x, y):
        u1, u2 = u_ex(x, y)
        return (
            2.0 * mu * pi**2 * u1 - pi * np.sin(pi * x) * np.cos(pi * y),
            2.0 * mu * pi**2 * u2 - pi * np.cos(pi * x) * np.sin(pi * y),
        )

    errs_u, errs_p = [], []
    for n in ns:
        mesh = structured_unit_square(n, n)
        u_space = FeSpace(mesh, degree=2, rank=1)
        p_space = FeSpace(mesh, degree=1)
        A = (
            assemble_stiffness(u_space, mu * np.eye(2))
            + assemble_boundary_mass(u_space, alpha)
        ).tocsr()
        B = (-assemble_divergence(u_space, p_space)).tocsr()
        f = assemble_load(u_space, f_ex)

        pts, normals, _ = edge_quad_geometry(mesh)
        gN = np.empty_like(pts)
        for k in range(pts.shape[0]):
            for q in range(pts.shape[1]):
                x, y = pts[k, q]
                tr = mu * grad_u(x, y) @ normals[k]
                tr -= p_ex(x, y) * normals[k]
                tr += alpha * np.asarray(u_ex(x, y))
                gN[k, q] = tr
        f += assemble_boundary_load(u_space, gN)

        res = solve_saddle(A, B, f, tol=1e-11)
        errs_u.append(l2_error(u_space, res.u, u_ex))
        errs_p.append(l2_error(p_space, res.p, p_ex))
    study = ConvergenceStudy(list(ns), {"u": errs_u, "p": errs_p}, {})
    study.orders["u"] = study.order("u")
    study.orders["p"] = study.order("p")
    return study
