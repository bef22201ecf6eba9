"""Pointwise constitutive laws and parameter validators.

Covers the cubic ionic current and linear gating kinetics, the activation
ODE right-hand side, the arctan contraction map, the active tensor entering
the elastic coefficient, and the deformation-dependent conductivity pullback
with its safety clamps.  Everything here is a pure function of its arguments
and vectorizes over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IonicParams:
    """Cubic/linear reaction constants (dimensionless).

    i_ion(v, w) = k (w + v (v - a)(v - 1)); h_kin(v, w) = d1 v - d2 w.
    """

    k: float = 80.0
    a: float = 0.25
    d1: float = 0.17
    d2: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.a < 1.0:
            raise ValueError("a must lie in (0, 1)")
        if self.d2 <= 0.0:
            raise ValueError("d2 must be positive for bounded gating")


@dataclass(frozen=True)
class ActivationParams:
    """Activation ODE constants, contraction magnitudes, elastic modulus.

    Gamma_t defaults to zero: in two dimensions an isotropic contraction
    (Gamma_l = Gamma_t) drops out of det(Fa) Fa^-1 Fa^-T exactly, leaving
    the mechanics inert, so only the along-fiber magnitude is active.
    """

    eta1: float = 1.0
    eta2: float = 1.0
    beta_act: float = 1.0
    Gamma_l: float = 0.3
    Gamma_t: float = 0.0
    gamma_R: float = 0.3
    mu: float = 4.0

    def __post_init__(self):
        if min(self.eta1, self.eta2, self.beta_act) < 0.0:
            raise ValueError("eta1, eta2, beta_act must be nonnegative")
        for g in (self.Gamma_l, self.Gamma_t):
            if not 0.0 <= g < 1.0:
                raise ValueError("contraction magnitudes must lie in [0, 1)")
        if self.gamma_R <= 0.0:
            raise ValueError("gamma_R must be positive")
        if self.mu <= 0.0:
            raise ValueError("mu must be positive")


@dataclass(frozen=True)
class ConductivityParams:
    """Base conductivity tensors and the pullback clamps.

    clamp_delta bounds the Frobenius norm of the displacement gradient that
    enters F = I + grad(u); clamp_tau floors det(F).  Together they induce
    uniform two-sided eigenvalue bounds on the pulled-back tensors.
    """

    K_i: np.ndarray = None
    K_e: np.ndarray = None
    clamp_delta: float = 0.5
    clamp_tau: float = 0.25

    def __post_init__(self):
        Ki = np.array([[0.02, 0.0], [0.0, 0.01]]) if self.K_i is None else np.asarray(self.K_i, float)
        Ke = np.array([[0.04, 0.0], [0.0, 0.02]]) if self.K_e is None else np.asarray(self.K_e, float)
        for name, K in (("K_i", Ki), ("K_e", Ke)):
            if K.shape != (2, 2) or abs(K[0, 1] - K[1, 0]) > 1e-12:
                raise ValueError(f"{name} must be a symmetric 2x2 tensor")
            if np.trace(K) <= 0 or np.linalg.det(K) <= 0:
                raise ValueError(f"{name} must be positive definite")
        if not 0.0 < self.clamp_delta < 1.0:
            raise ValueError("clamp_delta must lie in (0, 1)")
        if not 0.0 < self.clamp_tau < 1.0:
            raise ValueError("clamp_tau must lie in (0, 1)")
        object.__setattr__(self, "K_i", Ki)
        object.__setattr__(self, "K_e", Ke)


# ---------------------------------------------------------------------------
# kinetics


def i_ion(v, w, p: IonicParams):
    """Ionic current k (w + v (v - a)(v - 1))."""
    v = np.asarray(v, dtype=float)
    return p.k * (w + v * (v - p.a) * (v - 1.0))


def h_kin(v, w, p: IonicParams):
    """Gating rate d1 v - d2 w."""
    return p.d1 * np.asarray(v, dtype=float) - p.d2 * w


def g_act(gamma, w, p: ActivationParams):
    """Activation rate eta1 (beta w - eta2 gamma)."""
    return p.eta1 * (p.beta_act * w - p.eta2 * np.asarray(gamma, dtype=float))


def gamma_kappa(gamma, Gamma_k: float, gamma_R: float):
    """Contraction scalar -Gamma_k (2/pi) arctan(max(gamma,0)/gamma_R).

    Monotone non-increasing in gamma with range [-Gamma_k, 0].
    """
    gplus = np.maximum(np.asarray(gamma, dtype=float), 0.0)
    return -Gamma_k * (2.0 / np.pi) * np.arctan(gplus / gamma_R)


# ---------------------------------------------------------------------------
# active strain tensors


def active_tensor_inv(gamma, d_l, d_t, p: ActivationParams) -> np.ndarray:
    """det(Fa) Fa^-1 Fa^-T for Fa = I + g_l d_l(x)d_l + g_t d_t(x)d_t.

    Broadcasts over leading axes: gamma (...,), d_l/d_t (..., 2).
    In the fiber frame the result is diag((1+g_t)/(1+g_l), (1+g_l)/(1+g_t)).
    """
    gl = 1.0 + gamma_kappa(gamma, p.Gamma_l, p.gamma_R)
    gt = 1.0 + gamma_kappa(gamma, p.Gamma_t, p.gamma_R)
    cl = gt / gl
    ct = gl / gt
    dl = np.asarray(d_l, dtype=float)
    dt = np.asarray(d_t, dtype=float)
    out = cl[..., None, None] * dl[..., :, None] * dl[..., None, :]
    out += ct[..., None, None] * dt[..., :, None] * dt[..., None, :]
    return out


def sigma_tensor(gamma, d_l, d_t, p: ActivationParams) -> np.ndarray:
    """Elastic coefficient mu * active_tensor_inv; SPD with ratio bounds.

    Eigenvalues lie in [mu (1 - G), mu / (1 - G)] for
    G = max(Gamma_l, Gamma_t).
    """
    return p.mu * active_tensor_inv(gamma, d_l, d_t, p)


def sigma_bounds(p: ActivationParams) -> tuple[float, float]:
    G = max(p.Gamma_l, p.Gamma_t)
    return p.mu * (1.0 - G), p.mu / (1.0 - G)


# ---------------------------------------------------------------------------
# deformation-dependent conductivities


def clamp_gradient(grad_u: np.ndarray, p: ConductivityParams) -> np.ndarray:
    """Scale the displacement gradient into the admissible set.

    First rescales so the Frobenius norm is at most clamp_delta, then (if the
    determinant of I + G still falls below clamp_tau) shrinks further by
    bisection until det(I + s G) >= clamp_tau.  Total: every input maps to an
    admissible gradient; the zero gradient is a fixed point.
    """
    G = np.array(grad_u, dtype=float, copy=True)
    fro = np.sqrt(np.sum(G * G, axis=(-2, -1), keepdims=True))
    scale = np.where(fro > p.clamp_delta, p.clamp_delta / np.maximum(fro, 1e-300), 1.0)
    G *= scale

    def detF(s):
        trG = G[..., 0, 0] + G[..., 1, 1]
        dG = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
        return 1.0 + s * trG + s * s * dG

    bad = detF(1.0) < p.clamp_tau
    if np.any(bad):
        lo = np.zeros(bad.shape)
        hi = np.ones(bad.shape)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            ok = detF(mid) >= p.clamp_tau
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
        s = np.where(bad, lo, 1.0)
        G *= s[..., None, None]
    return G


def conductivity(grad_u: np.ndarray, K: np.ndarray, p: ConductivityParams) -> np.ndarray:
    """Pulled-back conductivity F^-1 K F^-T with F = I + clamped gradient.

    Broadcasts over leading axes of grad_u.  The output is symmetrized
    exactly; eigenvalues obey `conductivity_bounds(K, p)` for every input.
    """
    G = clamp_gradient(grad_u, p)
    F = G.copy()
    F[..., 0, 0] += 1.0
    F[..., 1, 1] += 1.0
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    Finv = np.empty_like(F)
    Finv[..., 0, 0] = F[..., 1, 1]
    Finv[..., 0, 1] = -F[..., 0, 1]
    Finv[..., 1, 0] = -F[..., 1, 0]
    Finv[..., 1, 1] = F[..., 0, 0]
    Finv /= det[..., None, None]
    K = np.asarray(K, dtype=float)
    M = Finv @ K @ np.swapaxes(Finv, -2, -1)
    return 0.5 * (M + np.swapaxes(M, -2, -1))


def conductivity_bounds(K: np.ndarray, p: ConductivityParams) -> tuple[float, float]:
    """Uniform eigenvalue bounds induced by the clamps."""
    evals = np.linalg.eigvalsh(np.asarray(K, dtype=float))
    smax = 1.0 + p.clamp_delta
    lo = evals[0] / smax**2
    hi = evals[-1] * (smax / p.clamp_tau) ** 2
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# kinetics dissipativity witness


@dataclass(frozen=True)
class DissipativityReport:
    holds: bool
    worst_margin: float
    worst_sample: tuple
    n_samples: int


def check_dissipativity(
    p: IonicParams,
    mu_test: float,
    C_test: float,
    sample_box: tuple = (-2.0, 2.0),
    n_samples: int = 9,
    rng: np.random.Generator | None = None,
) -> DissipativityReport:
    """Sampled one-sided Lipschitz check on the reaction pair.

    Evaluates, over quadruples (v1, w1, v2, w2) from a uniform grid on
    sample_box^4 (plus optional random samples when rng is given),

        mu (I(v2,w2) - I(v1,w1)) (v2 - v1) - (H(v2,w2) - H(v1,w1)) (w2 - w1)
            + C min(1, 1/mu) (mu |dv|^2 + |dw|^2)

    and reports whether the expression stays nonnegative and its minimum.
    """
    lo, hi = sample_box
    axis = np.linspace(lo, hi, n_samples)
    V1, W1, V2, W2 = np.meshgrid(axis, axis, axis, axis, indexing="ij")
    v1, w1, v2, w2 = (z.ravel() for z in (V1, W1, V2, W2))
    if rng is not None:
        extra = rng.uniform(lo, hi, size=(4, len(v1)))
        v1 = np.concatenate([v1, extra[0]])
        w1 = np.concatenate([w1, extra[1]])
        v2 = np.concatenate([v2, extra[2]])
        w2 = np.concatenate([w2, extra[3]])

    dv = v2 - v1
    dw = w2 - w1
    lhs = mu_test * (i_ion(v2, w2, p) - i_ion(v1, w1, p)) * dv
    lhs -= (h_kin(v2, w2, p) - h_kin(v1, w1, p)) * dw
    margin = lhs + C_test * min(1.0, 1.0 / mu_test) * (mu_test * dv**2 + dw**2)
    worst = int(np.argmin(margin))
    return DissipativityReport(
        holds=bool(margin[worst] >= -1e-9),
        worst_margin=float(margin[worst]),
        worst_sample=(v1[worst], w1[worst], v2[worst], w2[worst]),
        n_samples=len(margin),
    )
