"""Semi-implicit time step for the degenerate bidomain pair.

Each step solves the symmetric 2x2 block system

    [[M/dt + A_i, -M/dt  ], [v_i]   [rhs_i]
     [-M/dt,      M/dt+A_e]] [v_e] = [rhs_e]

whose kernel is the constant pair (c, c).  The kernel is removed by keeping
v_e inside the zero-integral subspace: the conjugate-gradient solve runs on
the orthogonally projected operator, which is the algebraic counterpart of
testing the extracellular row against zero-mean functions only.  Diffusion
is implicit; reaction, stimulus, and noise are explicit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import physics
from .fem import FeSpace, assemble_stiffness, solve_cg
from .noise import NoiseCoeff, eval_coeff


def initial_stimulus(x, y):
    """Half-circle stimulus profile centered at (0, 0.5); values in (0, 1)."""
    r = np.sqrt(np.asarray(x, dtype=float) ** 2 + (np.asarray(y, dtype=float) - 0.5) ** 2)
    return 1.0 - 1.0 / (1.0 + np.exp(-50.0 * (r - 0.18)))


def applied_current(t, x, y, duration: float = 0.01):
    """Stimulus current: the initial profile for 0 <= t < duration, else 0."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t < duration:
        return initial_stimulus(x, y)
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass
class ElectricState:
    """Nodal P1 coefficient vectors of the electric unknowns."""

    v_i: np.ndarray
    v_e: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def copy(self) -> "ElectricState":
        return ElectricState(
            self.v_i.copy(), self.v_e.copy(), self.v.copy(), self.w.copy()
        )


@dataclass
class BidomainSystem:
    """Assembled operators for one conductivity configuration."""

    space: FeSpace
    mass: sp.csr_matrix
    A_i: sp.csr_matrix
    A_e: sp.csr_matrix
    dt: float
    block: sp.csr_matrix
    lumped: np.ndarray  # row sums of the mass matrix (integrals of phi_j)

    def projector(self):
        """Orthogonal projector removing the weighted-mean of the e-half."""
        n = self.space.n_scalar
        m = self.lumped
        mm = float(m @ m)

        def proj(x):
            out = x.copy()
            xe = out[n:]
            xe -= m * (float(m @ xe) / mm)
            return out

        return proj


def assemble_bidomain(
    space: FeSpace,
    cond_i,
    cond_e,
    dt: float,
    mass: sp.csr_matrix,
) -> BidomainSystem:
    """Build the block operator from per-quad-point conductivity tensors."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A_i = assemble_stiffness(space, cond_i)
    A_e = assemble_stiffness(space, cond_e)
    Mdt = (mass / dt).tocsr()
    block = sp.bmat(
        [[Mdt + A_i, -Mdt], [-Mdt, Mdt + A_e]], format="csr"
    )
    lumped = np.asarray(mass.sum(axis=1)).ravel()
    return BidomainSystem(space, mass, A_i, A_e, dt, block, lumped)


def conductivities_from_gradient(
    space: FeSpace, grad_u: np.ndarray | None, params: physics.ConductivityParams
):
    """Per-quad-point pulled-back tensors (M_i, M_e) for a P1 space.

    grad_u is a (ne, nq, 2, 2) displacement gradient or None for the
    undeformed configuration.
    """
    ne, nq = len(space.conn), len(space.quad.weights)
    if grad_u is None:
        grad_u = np.zeros((ne, nq, 2, 2))
    Mi = physics.conductivity(grad_u, params.K_i, params)
    Me = physics.conductivity(grad_u, params.K_e, params)
    return Mi, Me


def enforce_zero_mean(v_e: np.ndarray, mass: sp.csr_matrix) -> np.ndarray:
    """Shift by a constant so the mass-weighted mean vanishes."""
    m = np.asarray(mass.sum(axis=1)).ravel()
    total = float(m.sum())
    return v_e - (float(m @ v_e) / total)


@dataclass
class StepInfo:
    converged: bool
    iterations: int
    relres: float


@dataclass
class StepRecord:
    """Everything needed to re-evaluate one step's discrete identities."""

    before: ElectricState
    after: ElectricState
    rhs_i: np.ndarray
    rhs_e: np.ndarray
    i_app: np.ndarray
    noise_v: np.ndarray
    noise_w: np.ndarray
    system: "BidomainSystem" = None
    gamma_before: np.ndarray | None = None
    gamma_after: np.ndarray | None = None
    gamma_rate: np.ndarray | None = None


def step_bidomain(
    system: BidomainSystem,
    state: ElectricState,
    ionic: physics.IonicParams,
    i_app: np.ndarray,
    dW_v: np.ndarray,
    dW_w: np.ndarray,
    coeff_v: NoiseCoeff,
    coeff_w: NoiseCoeff,
    tol: float = 1e-10,
    maxit: int | None = None,
    record: bool = False,
):
    """Advance (v_i, v_e, v, w) by one semi-implicit step.

    dW_v / dW_w hold one increment per noise mode.  Returns
    (new_state, StepInfo) and, when record=True, a StepRecord as third item.
    On solver failure the state is returned unchanged with converged=False.
    """
    M, dt = system.mass, system.dt
    v, w = state.v, state.w

    ion = physics.i_ion(v, w, ionic)
    noise_v = np.zeros_like(v)
    for m, dw in enumerate(np.atleast_1d(dW_v)):
        noise_v += eval_coeff(coeff_v, v, mode=m) * dw
    noise_w = np.zeros_like(w)
    for m, dw in enumerate(np.atleast_1d(dW_w)):
        noise_w += eval_coeff(coeff_w, v, mode=m) * dw

    base = M.dot(v / dt - ion + noise_v / dt)
    rhs_i = base + i_app
    rhs_e = -base + i_app
    rhs = np.concatenate([rhs_i, rhs_e])

    proj = system.projector()
    x0 = np.concatenate([state.v_i, state.v_e])
    res = solve_cg(
        system.block,
        rhs,
        tol=tol,
        maxit=maxit,
        constraint=proj,
        x0=x0,
        jacobi=True,
    )
    info = StepInfo(res.converged, res.iterations, res.relres)
    if not res.converged:
        out = (state, info)
        return out + (None,) if record else out

    n = system.space.n_scalar
    v_i_new = res.x[:n]
    v_e_new = enforce_zero_mean(res.x[n:], M)
    v_new = v_i_new - v_e_new
    w_new = w + dt * physics.h_kin(v, w, ionic) + noise_w
    new_state = ElectricState(v_i_new, v_e_new, v_new, w_new)

    if record:
        rec = StepRecord(
            before=state.copy(),
            after=new_state.copy(),
            rhs_i=rhs_i,
            rhs_e=rhs_e,
            i_app=i_app.copy(),
            noise_v=noise_v,
            noise_w=noise_w,
            system=system,
        )
        return new_state, info, rec
    return new_state, info


def initial_split(v0: np.ndarray, mass: sp.csr_matrix):
    """Split v0 into (v_i, v_e) with v_i - v_e = v0 and zero-mean v_e."""
    v_e = enforce_zero_mean(-0.5 * v0, mass)
    v_i = v0 + v_e
    return v_i, v_e
