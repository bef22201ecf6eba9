"""Reference elements, quadrature, operator assembly, and Krylov solvers.

Scalar and 2-vector Lagrange spaces of degree 1 and 2 over a TriMesh.
Vector spaces use a component-major dof layout: dof(c, s) = c * n_scalar + s.
All bilinear forms are assembled with the same degree-4 symmetric triangle
rule (exact for every product appearing in the P2/P1 pair with affine
coefficients); boundary terms use a 3-point Gauss rule on edges.

Matrices are scipy CSR with sorted, duplicate-free structure.  The solvers
are a preconditioned conjugate gradient with an optional subspace projector
and a Schur-complement (Uzawa-type) iteration for saddle-point blocks; no
direct sparse factorization is used anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .mesh import TriMesh


class NonSpdCoefficientError(ValueError):
    """Coefficient tensor not symmetric positive definite on some element."""


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Points (barycentric) and weights on the reference triangle or edge."""

    points: np.ndarray
    weights: np.ndarray
    degree: int


def triangle_rule(degree: int = 4) -> QuadratureRule:
    """Symmetric 6-point rule, exact for polynomials up to degree 4.

    Weights sum to 1/2, the reference-triangle measure.
    """
    if degree > 4:
        raise ValueError("only the degree-4 rule is shipped")
    a1, w1 = 0.445948490915965, 0.223381589678011
    a2, w2 = 0.091576213509771, 0.109951743655322
    pts = np.array(
        [
            [1 - 2 * a1, a1, a1],
            [a1, 1 - 2 * a1, a1],
            [a1, a1, 1 - 2 * a1],
            [1 - 2 * a2, a2, a2],
            [a2, 1 - 2 * a2, a2],
            [a2, a2, 1 - 2 * a2],
        ]
    )
    wts = 0.5 * np.array([w1, w1, w1, w2, w2, w2])
    return QuadratureRule(pts, wts, 4)


def edge_rule() -> QuadratureRule:
    """3-point Gauss rule on the unit interval (exact to degree 5)."""
    s = np.sqrt(0.6)
    pts = 0.5 * (1.0 + np.array([-s, 0.0, s]))
    wts = np.array([5.0, 8.0, 5.0]) / 18.0
    return QuadratureRule(pts.reshape(-1, 1), wts, 5)


# ---------------------------------------------------------------------------
# reference bases


def _p1_values(lam: np.ndarray) -> np.ndarray:
    return lam.copy()


_P1_REF_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def _p2_values(lam: np.ndarray) -> np.ndarray:
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    return np.column_stack(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l0 * l1,
            4 * l1 * l2,
            4 * l2 * l0,
        ]
    )


def _p2_ref_grads(lam: np.ndarray) -> np.ndarray:
    # gradients w.r.t. (xi, eta) with lam = (1 - xi - eta, xi, eta)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    g = np.zeros((len(lam), 6, 2))
    d0 = np.array([-1.0, -1.0])
    d1 = np.array([1.0, 0.0])
    d2 = np.array([0.0, 1.0])
    g[:, 0] = (4 * l0 - 1)[:, None] * d0
    g[:, 1] = (4 * l1 - 1)[:, None] * d1
    g[:, 2] = (4 * l2 - 1)[:, None] * d2
    g[:, 3] = 4 * (l1[:, None] * d0 + l0[:, None] * d1)
    g[:, 4] = 4 * (l2[:, None] * d1 + l1[:, None] * d2)
    g[:, 5] = 4 * (l0[:, None] * d2 + l2[:, None] * d0)
    return g


# local edge order inside a triangle: (0,1), (1,2), (2,0)
_LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


# ---------------------------------------------------------------------------
# finite element spaces


class FeSpace:
    """Lagrange space of degree 1 or 2, scalar or 2-vector valued.

    P1 scalar dofs are the vertices; P2 adds one dof per undirected edge,
    numbered after the vertices.  Vector spaces stack two scalar copies
    component-major.  Element geometry (Jacobians, physical quadrature
    points, physical basis gradients) is precomputed once.
    """

    def __init__(self, mesh: TriMesh, degree: int = 1, rank: int = 0):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        if rank not in (0, 1):
            raise ValueError("rank 0 (scalar) or 1 (2-vector)")
        self.mesh = mesh
        self.degree = degree
        self.rank = rank
        self.ncomp = 1 if rank == 0 else 2
        self.quad = triangle_rule()

        tris = mesh.triangles
        nv = mesh.num_vertices
        if degree == 1:
            self.n_scalar = nv
            self.conn = tris.copy()
        else:
            edges = mesh.edges()
            self.edge_index = {
                (int(i), int(j)): k for k, (i, j) in enumerate(edges)
            }
            mids = np.empty((len(tris), 3), dtype=np.int64)
            for k, (a, b, c) in enumerate(tris):
                for loc, (p, q) in enumerate(_LOCAL_EDGES):
                    vi, vj = sorted((int(tris[k][p]), int(tris[k][q])))
                    mids[k, loc] = nv + self.edge_index[(vi, vj)]
            self.n_scalar = nv + len(edges)
            self.conn = np.hstack([tris, mids])
        self.ndof = self.ncomp * self.n_scalar
        self.nloc = self.conn.shape[1]

        lam = self.quad.points
        if degree == 1:
            self.basis_vals = _p1_values(lam)
            ref_grads = np.broadcast_to(
                _P1_REF_GRADS, (len(lam), 3, 2)
            ).copy()
        else:
            self.basis_vals = _p2_values(lam)
            ref_grads = _p2_ref_grads(lam)

        p = mesh.vertices[tris]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        invJ = np.empty_like(J)
        invJ[:, 0, 0] = J[:, 1, 1]
        invJ[:, 0, 1] = -J[:, 0, 1]
        invJ[:, 1, 0] = -J[:, 1, 0]
        invJ[:, 1, 1] = J[:, 0, 0]
        invJ /= self.detJ[:, None, None]
        self.invJT = np.transpose(invJ, (0, 2, 1))
        # physical gradients: (ne, nq, nloc, 2)
        self.grads = np.einsum("eij,qlj->eqli", self.invJT, ref_grads)
        # physical quadrature points: (ne, nq, 2)
        self.qpoints = np.einsum("qv,evx->eqx", lam, p)

    # --- field evaluation helpers -------------------------------------

    def scalar_at_qp(self, coeffs: np.ndarray) -> np.ndarray:
        """Values of a scalar field at the quadrature points, (ne, nq)."""
        return np.einsum("ql,el->eq", self.basis_vals, coeffs[self.conn])

    def scalar_grad_at_qp(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("eqli,el->eqi", self.grads, coeffs[self.conn])

    def vector_grad_at_qp(self, coeffs: np.ndarray) -> np.ndarray:
        """Displacement gradient (du_a/dx_b) at quad points, (ne, nq, 2, 2)."""
        assert self.rank == 1
        out = np.empty((len(self.conn), len(self.quad.weights), 2, 2))
        for c in range(2):
            comp = coeffs[c * self.n_scalar : (c + 1) * self.n_scalar]
            out[:, :, c, :] = self.scalar_grad_at_qp(comp)
        return out

    def interpolate(self, fn: Callable) -> np.ndarray:
        """Nodal interpolant of fn(x, y) (scalar or length-2 for vectors)."""
        pts = self.mesh.vertices
        if self.degree == 2:
            edges = self.mesh.edges()
            mids = 0.5 * (pts[edges[:, 0]] + pts[edges[:, 1]])
            pts = np.vstack([pts, mids])
        vals = np.array([fn(x, y) for x, y in pts])
        if self.rank == 0:
            return vals.astype(float)
        return np.concatenate([vals[:, 0], vals[:, 1]]).astype(float)

    def component(self, coeffs: np.ndarray, c: int) -> np.ndarray:
        return coeffs[c * self.n_scalar : (c + 1) * self.n_scalar]


# ---------------------------------------------------------------------------
# assembly


def _accumulate(space_rows, space_cols, rows, cols, data) -> sp.csr_matrix:
    mat = sp.coo_matrix(
        (data.ravel(), (rows.ravel(), cols.ravel())),
        shape=(space_rows, space_cols),
    ).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def _scatter_scalar(space: FeSpace, local: np.ndarray) -> sp.csr_matrix:
    conn = space.conn
    rows = np.repeat(conn, space.nloc, axis=1)
    cols = np.tile(conn, (1, space.nloc))
    return _accumulate(space.n_scalar, space.n_scalar, rows, cols, local)


def assemble_mass(space: FeSpace) -> sp.csr_matrix:
    """L2 mass matrix; symmetric positive definite, entries sum to |O|."""
    w = space.quad.weights
    vals = space.basis_vals
    base = np.einsum("q,ql,qm->lm", w, vals, vals)
    local = space.detJ[:, None, None] * base[None]
    M = _scatter_scalar(space, local)
    if space.rank == 0:
        return M
    return sp.block_diag([M, M], format="csr")


def _coeff_array(space: FeSpace, coeff) -> np.ndarray:
    ne, nq = len(space.conn), len(space.quad.weights)
    if coeff is None:
        c = np.broadcast_to(np.eye(2), (ne, nq, 2, 2)).copy()
    elif callable(coeff):
        c = np.empty((ne, nq, 2, 2))
        for e in range(ne):
            for q in range(nq):
                c[e, q] = coeff(*space.qpoints[e, q])
    else:
        c = np.asarray(coeff, dtype=float)
        if c.shape == (2, 2):
            c = np.broadcast_to(c, (ne, nq, 2, 2)).copy()
        elif c.shape == (ne, 2, 2):
            c = np.broadcast_to(c[:, None], (ne, nq, 2, 2)).copy()
        elif c.shape != (ne, nq, 2, 2):
            raise ValueError(f"bad coefficient shape {c.shape}")
    return c


def _check_spd(space: FeSpace, c: np.ndarray):
    asym = np.abs(c[..., 0, 1] - c[..., 1, 0])
    scale = np.abs(c).max() + 1e-300
    tr = c[..., 0, 0] + c[..., 1, 1]
    det = c[..., 0, 0] * c[..., 1, 1] - c[..., 0, 1] * c[..., 1, 0]
    bad = (asym > 1e-10 * scale) | (tr <= 0) | (det <= 0)
    if np.any(bad):
        e = int(np.argwhere(bad.any(axis=1))[0][0])
        raise NonSpdCoefficientError(
            f"coefficient tensor not SPD on element {e}"
        )


def assemble_stiffness(space: FeSpace, coeff=None) -> sp.csr_matrix:
    """Weighted stiffness matrix for the form grad(u) . C grad(v).

    `coeff` may be None (identity), a single 2x2 tensor, a per-element
    (ne, 2, 2) array, or a per-quad-point (ne, nq, 2, 2) array; it must be
    symmetric positive definite wherever evaluated.  For vector spaces this
    realizes the form (grad u) C : (grad v), which decouples per component
    into two copies of the scalar operator.
    """
    c = _coeff_array(space, coeff)
    _check_spd(space, c)
    w = space.quad.weights
    cw = c * w[None, :, None, None]
    local = np.einsum("eqli,eqij,eqmj->elm", space.grads, cw, space.grads)
    local *= space.detJ[:, None, None]
    K = _scatter_scalar(space, local)
    if space.rank == 0:
        return K
    return sp.block_diag([K, K], format="csr")


def _edge_basis(space: FeSpace, s: np.ndarray):
    """Trace of the element basis on an edge param by s in [0, 1].

    Returns (local dof slots within the edge, values (nq, n_edge_dofs)).
    For P1 the edge carries its two endpoints; for P2 also the midside node.
    """
    if space.degree == 1:
        return np.column_stack([1 - s, s])
    return np.column_stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)])


def _edge_dofs(space: FeSpace, i: int, j: int) -> list[int]:
    if space.degree == 1:
        return [i, j]
    key = (min(i, j), max(i, j))
    return [i, j, space.mesh.num_vertices + space.edge_index[key]]


def assemble_boundary_mass(space: FeSpace, alpha: float = 1.0) -> sp.csr_matrix:
    """Robin boundary form alpha * int_{dO} u v dS (per component)."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    er = edge_rule()
    s = er.points[:, 0]
    vals = _edge_basis(space, s)
    base = np.einsum("q,ql,qm->lm", er.weights, vals, vals)

    verts = space.mesh.vertices
    rows, cols, data = [], [], []
    for i, j, _owner in space.mesh.boundary_edges:
        dofs = _edge_dofs(space, int(i), int(j))
        length = float(np.linalg.norm(verts[j] - verts[i]))
        loc = alpha * length * base
        for a, da in enumerate(dofs):
            for b, db in enumerate(dofs):
                rows.append(da)
                cols.append(db)
                data.append(loc[a, b])
    B = sp.coo_matrix(
        (data, (rows, cols)), shape=(space.n_scalar, space.n_scalar)
    ).tocsr()
    B.sum_duplicates()
    B.sort_indices()
    if space.rank == 0:
        return B
    return sp.block_diag([B, B], format="csr")


def assemble_divergence(vel_space: FeSpace, p_space: FeSpace) -> sp.csr_matrix:
    """Matrix D with (D u)_r = int psi_r (div u) dx.

    Rows are pressure dofs, columns velocity dofs in component-major layout.
    """
    if vel_space.mesh is not p_space.mesh:
        raise ValueError("spaces must share a mesh")
    if vel_space.rank != 1 or p_space.rank != 0:
        raise ValueError("need a vector velocity space and scalar pressure")
    w = vel_space.quad.weights
    pvals = p_space.basis_vals
    # (e, r, l, c) = detJ * sum_q w_q psi_r(q) dphi_l/dx_c (q)
    local = np.einsum("q,qr,eqlc->erlc", w, pvals, vel_space.grads)
    local *= vel_space.detJ[:, None, None, None]

    ne = len(vel_space.conn)
    nr, nl = p_space.nloc, vel_space.nloc
    rows = np.broadcast_to(
        p_space.conn[:, :, None, None], (ne, nr, nl, 2)
    )
    cols = np.empty((ne, nr, nl, 2), dtype=np.int64)
    for c in range(2):
        cols[:, :, :, c] = c * vel_space.n_scalar + vel_space.conn[:, None, :]
    return _accumulate(p_space.n_scalar, vel_space.ndof, rows, cols, local)


def assemble_load(space: FeSpace, integrand) -> np.ndarray:
    """Load vector F_i = int f phi_i dx.

    `integrand` is a callable f(x, y) or a per-quad-point array of shape
    (ne, nq) for scalar spaces / (ne, nq, 2) for vector spaces.
    """
    ne, nq = len(space.conn), len(space.quad.weights)
    if callable(integrand):
        pts = space.qpoints.reshape(-1, 2)
        vals = np.array([integrand(x, y) for x, y in pts])
        if space.rank == 0:
            f = vals.reshape(ne, nq)
        else:
            f = vals.reshape(ne, nq, 2)
    else:
        f = np.asarray(integrand, dtype=float)

    w = space.quad.weights
    out = np.zeros(space.ndof)
    if space.rank == 0:
        local = np.einsum("q,eq,ql->el", w, f, space.basis_vals)
        local *= space.detJ[:, None]
        np.add.at(out, space.conn, local)
    else:
        for c in range(2):
            local = np.einsum("q,eq,ql->el", w, f[:, :, c], space.basis_vals)
            local *= space.detJ[:, None]
            np.add.at(out, c * space.n_scalar + space.conn, local)
    return out


def assemble_boundary_load(space: FeSpace, values) -> np.ndarray:
    """Boundary load int_{dO} g . v dS for per-edge-quad-point values.

    `values` is (n_boundary_edges, nq_edge) for scalar spaces or
    (n_boundary_edges, nq_edge, 2) for vector spaces, ordered like
    mesh.boundary_edges and the edge rule.
    """
    er = edge_rule()
    s = er.points[:, 0]
    vals = _edge_basis(space, s)
    verts = space.mesh.vertices
    g = np.asarray(values, dtype=float)
    out = np.zeros(space.ndof)
    for k, (i, j, _owner) in enumerate(space.mesh.boundary_edges):
        dofs = _edge_dofs(space, int(i), int(j))
        length = float(np.linalg.norm(verts[j] - verts[i]))
        if space.rank == 0:
            loc = length * np.einsum("q,q,ql->l", er.weights, g[k], vals)
            out[list(dofs)] += loc
        else:
            for c in range(2):
                loc = length * np.einsum(
                    "q,q,ql->l", er.weights, g[k, :, c], vals
                )
                idx = [c * space.n_scalar + d for d in dofs]
                out[idx] += loc
    return out


def edge_quad_geometry(mesh: TriMesh):
    """Physical quad points, outward normals, lengths per boundary edge."""
    er = edge_rule()
    s = er.points[:, 0]
    be = mesh.boundary_edges
    pi = mesh.vertices[be[:, 0]]
    pj = mesh.vertices[be[:, 1]]
    tangent = pj - pi
    lengths = np.linalg.norm(tangent, axis=1)
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / lengths[:, None]
    pts = pi[:, None, :] + s[None, :, None] * tangent[:, None, :]
    return pts, normals, lengths


# ---------------------------------------------------------------------------
# error norms


def l2_error(space: FeSpace, coeffs: np.ndarray, exact: Callable) -> float:
    """Quadrature L2 distance between a discrete field and exact(x, y)."""
    w = space.quad.weights
    if space.rank == 0:
        uh = space.scalar_at_qp(coeffs)
        ue = np.array(
            [exact(x, y) for x, y in space.qpoints.reshape(-1, 2)]
        ).reshape(uh.shape)
        err2 = np.einsum("q,eq->", w, (uh - ue) ** 2 * space.detJ[:, None])
    else:
        err2 = 0.0
        ex = np.array(
            [exact(x, y) for x, y in space.qpoints.reshape(-1, 2)]
        ).reshape(len(space.conn), len(w), 2)
        for c in range(2):
            uh = space.scalar_at_qp(space.component(coeffs, c))
            err2 += np.einsum(
                "q,eq->", w, (uh - ex[:, :, c]) ** 2 * space.detJ[:, None]
            )
    return np.sqrt(err2)


def l4_norm(space: FeSpace, coeffs: np.ndarray) -> float:
    w = space.quad.weights
    uh = space.scalar_at_qp(coeffs)
    return np.einsum("q,eq->", w, uh**4 * space.detJ[:, None]) ** 0.25


# ---------------------------------------------------------------------------
# solvers


class CgResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int
    relres: float


def solve_cg(
    A,
    b: np.ndarray,
    tol: float = 1e-10,
    maxit: int | None = None,
    constraint: Callable[[np.ndarray], np.ndarray] | None = None,
    x0: np.ndarray | None = None,
    jacobi: bool = False,
    callback: Callable[[np.ndarray], None] | None = None,
) -> CgResult:
    """Conjugate gradients for SPD (or projected semidefinite) systems.

    With `constraint` (an orthogonal projector P onto a subspace) the method
    solves P A P x = P b with all iterates kept inside the subspace, which
    removes a known semidefinite kernel.  Non-convergence after `maxit`
    returns the best iterate with converged=False.
    """
    import math

    n = len(b)
    if maxit is None:
        maxit = 10 * n
    identity = constraint is None
    P = (lambda v: v) if identity else constraint
    matvec = A.dot if hasattr(A, "dot") else A

    if jacobi:
        diag = np.asarray(A.diagonal(), dtype=float)
        diag = np.where(np.abs(diag) > 1e-300, diag, 1.0)
        if identity:
            prec = lambda v: v / diag
        else:
            prec = lambda v: P(v / diag)
    else:
        prec = P

    x = P(x0.copy()) if x0 is not None else np.zeros(n)
    pb = P(np.asarray(b, dtype=float))
    bnorm = math.sqrt(float(pb @ pb))
    if bnorm == 0.0:
        return CgResult(np.zeros(n), True, 0, 0.0)

    r = P(pb - matvec(x))
    relres = math.sqrt(float(r @ r)) / bnorm
    if relres <= tol:
        return CgResult(x, True, 0, relres)
    z = prec(r)
    d = z.copy()
    rz = float(r @ z)
    for it in range(1, maxit + 1):
        q = P(matvec(d))
        dq = float(d @ q)
        if dq <= 0.0:
            # indefinite or fully converged direction; stop with best iterate
            return CgResult(x, relres <= tol, it - 1, relres)
        a = rz / dq
        x += a * d
        r -= a * q
        if callback is not None:
            callback(x)
        relres = math.sqrt(float(r @ r)) / bnorm
        if relres <= tol:
            return CgResult(x, True, it, relres)
        z = prec(r)
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    return CgResult(x, False, maxit, relres)


class SaddleResult(NamedTuple):
    u: np.ndarray
    p: np.ndarray
    converged: bool
    iterations: int
    res_primal: float
    res_constraint: float


def solve_saddle(
    A,
    B,
    f: np.ndarray,
    g: np.ndarray | None = None,
    tol: float = 1e-10,
    C=None,
    maxit: int | None = None,
    u0: np.ndarray | None = None,
    p0: np.ndarray | None = None,
    inner_tol: float | None = None,
    prec_diag: np.ndarray | None = None,
) -> SaddleResult:
    """Solve the block system [[A, B^T], [B, -C]] (u, p) = (f, g).

    A must be SPD; C (optional) symmetric positive semidefinite.  Pressure is
    found by conjugate gradients on the Schur complement S = B A^-1 B^T + C,
    each application performing one inner CG solve with A.  With C = None
    this is the classical Uzawa iteration for the incompressible block.
    `prec_diag` (typically the pressure mass diagonal, to which the Schur
    complement is spectrally equivalent) preconditions the outer iteration.
    """
    np_, nu = B.shape
    if g is None:
        g = np.zeros(np_)
    if maxit is None:
        maxit = 10 * np_
    if inner_tol is None:
        inner_tol = max(1e-14, tol * 1e-2)
    Cdot = (lambda q: C.dot(q)) if C is not None else (lambda q: np.zeros(np_))
    if prec_diag is None:
        precond = lambda r: r
    else:
        dinv = 1.0 / np.asarray(prec_diag, dtype=float)
        precond = lambda r: dinv * r

    inner_iters = 0
    u_guess = u0.copy() if u0 is not None else np.zeros(nu)

    def asolve(rhs, guess):
        nonlocal inner_iters
        res = solve_cg(A, rhs, tol=inner_tol, x0=guess, jacobi=True)
        inner_iters += res.iterations
        return res.x

    uf = asolve(f, u_guess)
    rhs_s = B.dot(uf) - g

    p = p0.copy() if p0 is not None else np.zeros(np_)
    w_cache = [uf]

    def smatvec(q):
        w = asolve(B.T.dot(q), np.zeros(nu))
        w_cache[0] = w
        return B.dot(w) + Cdot(q)

    snorm = np.linalg.norm(rhs_s)
    if snorm == 0.0 and np.linalg.norm(p) == 0.0:
        u = uf
        rp = np.linalg.norm(A.dot(u) + B.T.dot(p) - f)
        fscale = np.linalg.norm(f) + 1e-300
        return SaddleResult(u, p, True, 0, rp / fscale, 0.0)

    r = rhs_s - smatvec(p)
    z = precond(r)
    d = z.copy()
    rz = float(r @ z)
    rr = float(r @ r)
    it = 0
    target = max(tol * snorm, 1e-300)
    while np.sqrt(rr) > target and it < maxit:
        q = smatvec(d)
        dq = float(d @ q)
        if dq <= 0:
            break
        a = rz / dq
        p += a * d
        r -= a * q
        rr = float(r @ r)
        z = precond(r)
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
        it += 1

    u = asolve(f - B.T.dot(p), w_cache[0] if it else uf)
    fscale = max(np.linalg.norm(f), 1e-300)
    res_primal = np.linalg.norm(A.dot(u) + B.T.dot(p) - f) / fscale
    cres = np.linalg.norm(B.dot(u) - Cdot(p) - g)
    cscale = max(np.linalg.norm(g), np.linalg.norm(u), 1e-300)
    converged = np.sqrt(rr) <= target and res_primal <= 10 * tol
    return SaddleResult(u, p, converged, it, res_primal, cres / cscale)
