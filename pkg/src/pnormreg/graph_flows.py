"""p-norm flows and p-Lipschitz labellings on graphs.

Both problems run through the same outer iteration as the dense solver;
only the least-norm kernel changes.  Systems in the Laplacian
``A^T diag(c) A`` are factored sparsely after grounding one vertex per
connected component, and the few dense rows (gradient, normalisation)
are handled by low-rank corrections.

Incidence convention: ``A[e, head] = +1``, ``A[e, tail] = -1``, so
``(A^T x)_v`` is the net flow into ``v``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .audit import Audit
from .gamma_core import power_gradient, safe_pow
from .quadratic_solver import ConstraintStack, InfeasibleError, enhanced_solve
from .refinement import (DenseModel, SolveReport, _orth_rows, kkt_residual, refine)
from .scaling_search import SearchConfig

log = logging.getLogger(__name__)


def incidence_matrix(n_vertices: int, edges) -> sp.csr_matrix:
    """Sparse ``m x n`` edge-vertex incidence matrix (+1 head, -1 tail)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    m = edges.shape[0]
    if m and (edges.min() < 0 or edges.max() >= n_vertices):
        raise ValueError("edge endpoint out of range")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise ValueError("self loops are not allowed")
    rows = np.repeat(np.arange(m), 2)
    cols = edges.ravel()
    vals = np.tile([1.0, -1.0], m)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, n_vertices))


@dataclass
class GraphInstance:
    """Graph with either demands ``b`` (flows) or labels ``s`` on ``labelled`` (labellings)."""

    n_vertices: int
    edges: np.ndarray
    p: float
    eps: float = 1e-4
    b: np.ndarray | None = None
    labelled: np.ndarray | None = None
    s: np.ndarray | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if not (1 < self.p < math.inf):
            raise ValueError("p must lie in (1, inf)")
        self.A = incidence_matrix(self.n_vertices, self.edges)
        self.n_comp, self.comp = connected_components(
            sp.csr_matrix((np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])),
                          shape=(self.n_vertices, self.n_vertices)), directed=False)

    @property
    def m(self) -> int:
        return self.edges.shape[0]


def factor_spd(L):
    """Sparse LU of a symmetric positive definite matrix; returns a solve callable."""
    L = sp.csc_matrix(L)
    if L.shape[0] == 0:
        return lambda v: np.zeros((0,) + np.shape(v)[1:])
    lu = splu(L, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
              options={"SymmetricMode": True})
    return lambda v: lu.solve(np.asarray(v, dtype=float))


def laplacian_lowrank_solve(L, U, S, rhs, base_solve=None):
    """Solve ``(L + U S U^T) x = rhs`` with a sparse SPD base ``L``.

    Parameters
    ----------
    L : sparse matrix
        Grounded Laplacian (a principal minor of a graph Laplacian).
    U : ndarray or None
        ``n x k`` dense correction vectors.
    S : ndarray or None
        ``k x k`` symmetric core, possibly singular.
    rhs : ndarray
        One or more right-hand sides.
    base_solve : callable, optional
        Reuse an existing factorization of ``L``.

    Uses ``(L + U S U^T)^-1 = L^-1 - L^-1 U S (I + U^T L^-1 U S)^-1 U^T L^-1``.
    """
    solve = factor_spd(L) if base_solve is None else base_solve
    rhs = np.asarray(rhs, dtype=float)
    x = solve(rhs)
    if U is None or np.size(U) == 0:
        return x
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    S = np.atleast_2d(np.asarray(S, dtype=float))
    LU_ = solve(U)
    if LU_.ndim == 1:
        LU_ = LU_[:, None]
    k = U.shape[1]
    inner = np.eye(k) + U.T @ LU_ @ S
    corr = LU_ @ (S @ np.linalg.solve(inner, U.T @ x))
    return x - corr


def _grounds(comp, n_comp, keep_mask=None):
    """One vertex per component not touched by ``keep_mask`` (first vertex of each)."""
    out = []
    for c in range(n_comp):
        verts = np.flatnonzero(comp == c)
        if keep_mask is not None and np.any(keep_mask[verts]):
            continue
        out.append(verts[0])
    return np.array(out, dtype=np.int64)


def edge_solve(B, H, r, rhs_B, rhs_H, solve_M=None):
    """``min sum r f^2`` s.t. ``B^T f = rhs_B``, ``H f = rhs_H`` with sparse ``B``.

    ``B^T R^-1 B`` must be positive definite (grounded); ``H`` has a few dense
    rows handled through a Schur complement.
    """
    Ri = 1.0 / np.asarray(r, dtype=float)
    if solve_M is None:
        solve_M = factor_spd((B.T @ sp.diags(Ri) @ B))
    H = np.atleast_2d(np.asarray(H, dtype=float)) if H is not None and np.size(H) else None
    lam0 = solve_M(rhs_B) if B.shape[1] else np.zeros(0)
    if H is None:
        return Ri * (B @ lam0)
    G = np.asarray(B.T @ (Ri[:, None] * H.T))  # n x k
    MG = solve_M(G) if B.shape[1] else np.zeros((0, H.shape[0]))
    if MG.ndim == 1:
        MG = MG[:, None]
    S = (H * Ri) @ H.T - G.T @ MG
    rhs = np.atleast_1d(rhs_H) - (H * Ri) @ (B @ lam0)
    mu = np.linalg.solve(S, rhs)
    lam = lam0 - MG @ mu
    return Ri * (B @ lam + H.T @ mu)


class EdgeKernel:
    """Least-norm kernel on edges: ``B^T f = 0`` plus dense rows ``H`` and the gradient row."""

    def __init__(self, B, H=None, project=None):
        self.B = B
        self.H = H
        self.project = project
        self.n_solves = 0
        self.n_degenerate = 0

    def begin(self, stack: ConstraintStack) -> None:
        self.stack = stack
        # only the component of g in the feasible subspace matters; dropping
        # the rest keeps the rank-one correction away from cancellation
        g = stack.A_hat[-1]
        self.g = g if self.project is None else self.project(g)
        self.c = float(stack.d[-1])

    def solve(self, r):
        self.n_solves += 1
        r = np.asarray(r, dtype=float)
        B = self.B
        solve_M = factor_spd(B.T @ sp.diags(1.0 / r) @ B)
        if self.H is None:
            f, degenerate = enhanced_solve(B, r, self.g, self.c, solve_M=solve_M)
            self.n_degenerate += degenerate
        else:
            H = np.vstack([self.H, self.g])
            rhs_H = np.r_[np.zeros(self.H.shape[0]), self.c]
            f = edge_solve(B, H, r, np.zeros(B.shape[1]), rhs_H, solve_M=solve_M)
        resid = np.linalg.norm(self.stack.A_hat @ f - self.stack.d)
        if resid > 1e-9 * np.linalg.norm(self.stack.d):
            raise InfeasibleError(f"constraint residual {resid:.3e} in edge solve")
        return f, float(np.sum(r * f * f))

    def end(self) -> None:
        pass


class EdgeModel:
    """Edge flows ``f`` with ``B^T f = b_B`` and ``H f = b_H``."""

    def __init__(self, B, b_B, H=None, b_H=None):
        self.B = sp.csr_matrix(B)
        self.m = self.B.shape[0]
        self.H = None if H is None else np.atleast_2d(np.asarray(H, dtype=float))
        self.b_B = np.asarray(b_B, dtype=float)
        self.b_H = None if H is None else np.atleast_1d(np.asarray(b_H, dtype=float))
        ones = np.ones(self.m)
        self._unit = factor_spd(self.B.T @ self.B)
        if self.H is None:
            self.x0 = edge_solve(self.B, None, ones, self.b_B, None, self._unit)
        else:
            self.x0 = edge_solve(self.B, self.H, ones, self.b_B, self.b_H, self._unit)
        dense = self.B.T.toarray() if self.H is None else np.vstack([self.B.T.toarray(), self.H])
        self.Q = _orth_rows(dense)
        self.kernels = []

    def project(self, v):
        v = np.asarray(v, dtype=float)
        ones = np.ones(self.m)
        if self.H is None:
            w = edge_solve(self.B, None, ones, self.B.T @ v, None, self._unit)
        else:
            w = edge_solve(self.B, self.H, ones, self.B.T @ v, self.H @ v, self._unit)
        return v - w

    def residual_stack(self, g, c):
        gn = np.linalg.norm(g)
        return ConstraintStack(np.vstack([self.Q.T, g / gn]), np.r_[np.zeros(self.Q.shape[1]), c / gn])

    def make_kernel(self):
        k = EdgeKernel(self.B, self.H, self.project)
        self.kernels.append(k)
        return k


def _eliminate(K, e):
    """Pick pivot variables for ``K u = e`` (largest coefficients, via pivoted QR).

    Returns ``(E, F, M, h)`` with ``u_E = h - M u_F``.
    """
    k, n = K.shape
    _, R, piv = sla.qr(K, pivoting=True)
    E = np.sort(piv[:k])
    F = np.setdiff1d(np.arange(n), E)
    KE = K[:, E]
    M = np.linalg.solve(KE, K[:, F])
    h = np.linalg.solve(KE, e)
    return E, F, M, h


def constrained_laplacian_solve(L, K, e, rhs):
    """``min u^T L u / 2 - rhs.u`` subject to ``K u = e`` by substitution.

    ``L`` is a sparse grounded Laplacian.  The ``k`` rows of ``K`` are
    eliminated by solving for ``k`` variables in terms of the rest; the
    reduced matrix is a Laplacian minor plus a rank ``2k`` correction.
    """
    L = sp.csr_matrix(L)
    n = L.shape[0]
    if K is None or np.size(K) == 0:
        return factor_spd(L)(rhs)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    E, F, M, h = _eliminate(K, np.atleast_1d(e))
    LFF = L[F][:, F]
    LFE = L[F][:, E].toarray()
    LEE = L[E][:, E].toarray()
    k = len(E)
    U = np.hstack([LFE, M.T])
    S = np.block([[np.zeros((k, k)), -np.eye(k)], [-np.eye(k), LEE]])
    # right-hand side P^T (rhs - L h_hat) with h_hat = 0 on F and h on E
    Lh = L[:, E] @ h
    v = rhs - Lh
    red = v[F] - M.T @ v[E]
    uF = laplacian_lowrank_solve(LFF, U, S, red)
    u = np.zeros(n)
    u[F] = uF
    u[E] = h - M @ uF
    return u


class PotentialKernel:
    """Least-norm kernel over ``z = A_F u``: ``min sum r (A_F u)^2`` with linear rows on ``u``."""

    def __init__(self, AF, K0):
        self.AF = AF
        self.K0 = K0
        self.n_solves = 0

    def begin(self, stack: ConstraintStack) -> None:
        self.stack = stack
        self.g = stack.A_hat[-1]
        self.c = float(stack.d[-1])

    def solve(self, r):
        self.n_solves += 1
        r = np.asarray(r, dtype=float)
        AF = self.AF
        L = AF.T @ sp.diags(r) @ AF
        grow = AF.T @ self.g
        if self.K0 is None:
            K, e = grow[None, :], np.array([self.c])
        else:
            K = np.vstack([self.K0, grow])
            e = np.r_[np.zeros(self.K0.shape[0]), self.c]
        try:
            u = constrained_laplacian_solve(L, K, e, np.zeros(AF.shape[1]))
        except np.linalg.LinAlgError as exc:
            raise InfeasibleError(f"singular reduced system: {exc}") from exc
        z = AF @ u
        resid = np.linalg.norm(self.stack.A_hat @ z - self.stack.d)
        if resid > 1e-9 * np.linalg.norm(self.stack.d):
            raise InfeasibleError(f"constraint residual {resid:.3e} in potential solve")
        return z, float(np.sum(r * z * z))

    def end(self) -> None:
        pass


class PotentialModel:
    """Edge differences ``z = A u`` with ``u`` fixed on some vertices and ``K0 u = e0``.

    ``fixed`` lists vertices with prescribed values ``u_fixed`` (including one
    grounded vertex per otherwise free component); ``K0`` (rows over all
    vertices) adds linear constraints on the remaining ones.
    """

    def __init__(self, A, fixed, u_fixed, K0=None, e0=None):
        A = sp.csr_matrix(A)
        self.A = A
        self.m, n = A.shape
        self.fixed = np.asarray(fixed, dtype=np.int64)
        self.u_fixed = np.asarray(u_fixed, dtype=float)
        self.free = np.setdiff1d(np.arange(n), self.fixed)
        self.AF = sp.csr_matrix(A[:, self.free])
        self.z_fixed = A[:, self.fixed] @ self.u_fixed if self.fixed.size else np.zeros(self.m)
        if K0 is not None:
            K0 = np.atleast_2d(np.asarray(K0, dtype=float))
            e0 = np.atleast_1d(np.asarray(e0, dtype=float)) - K0[:, self.fixed] @ self.u_fixed
            self.K0 = K0[:, self.free]
        else:
            self.K0 = None
            e0 = None
        self.e0 = e0
        L1 = self.AF.T @ self.AF
        self._L1 = L1
        rhs = -(self.AF.T @ self.z_fixed)
        if self.K0 is None:
            uF = factor_spd(L1)(rhs)
        else:
            uF = constrained_laplacian_solve(L1, self.K0, e0, rhs)
        self.uF0 = uF
        self.x0 = self.AF @ uF + self.z_fixed
        # dense description of the tangent subspace, used for audits and checks
        basis = self.AF.toarray()
        if self.K0 is not None:
            basis = basis @ sla.null_space(self.K0)
        Qs = _orth_rows(basis.T)
        W = sla.null_space(Qs.T) if Qs.shape[1] else np.eye(self.m)
        self.W = W
        self.kernels = []

    def project(self, v):
        v = np.asarray(v, dtype=float)
        rhs = self.AF.T @ v
        if self.K0 is None:
            u = factor_spd(self._L1)(rhs)
        else:
            u = constrained_laplacian_solve(self._L1, self.K0, np.zeros(self.K0.shape[0]), rhs)
        return self.AF @ u

    def residual_stack(self, g, c):
        gn = np.linalg.norm(g)
        return ConstraintStack(np.vstack([self.W.T, g / gn]), np.r_[np.zeros(self.W.shape[1]), c / gn])

    def make_kernel(self):
        k = PotentialKernel(self.AF, self.K0)
        self.kernels.append(k)
        return k

    def potentials(self, z):
        """Vertex values ``u`` with ``A u`` closest to ``z`` on the feasible set."""
        rhs = self.AF.T @ (z - self.z_fixed)
        if self.K0 is None:
            uF = factor_spd(self._L1)(rhs)
        else:
            uF = constrained_laplacian_solve(self._L1, self.K0, self.e0, rhs)
        u = np.zeros(self.A.shape[1])
        u[self.free] = uF
        u[self.fixed] = self.u_fixed
        return u


def _check_demands(g: GraphInstance):
    b = np.asarray(g.b, dtype=float)
    if b.shape != (g.n_vertices,):
        raise ValueError("demand vector length must equal the number of vertices")
    for c in range(g.n_comp):
        tot = b[g.comp == c].sum()
        if abs(tot) > 1e-10 * max(1.0, np.abs(b).sum()):
            raise ValueError(f"unbalanced demands in component {c} (sum {tot:.3g})")
    return b


def flow_primal_model(g: GraphInstance) -> EdgeModel:
    """Edge model for ``A^T x = b`` with one grounded vertex per component."""
    b = _check_demands(g)
    ground = _grounds(g.comp, g.n_comp)
    keep = np.setdiff1d(np.arange(g.n_vertices), ground)
    return EdgeModel(g.A[:, keep], b[keep])


def _report(x, p, model, inner, eps, audit):
    kkt = kkt_residual(model, p, x)
    rep = SolveReport(x, float(np.sum(safe_pow(np.abs(x), p))), inner.outer_iters, inner.oracle_calls,
                      kkt, kkt <= eps, p, trace=inner.trace, audit=audit, inner=inner,
                      stop_reason=inner.stop_reason)
    return rep


def solve_pnorm_flow(g: GraphInstance, cfg: SearchConfig | None = None, audit: Audit | None = None,
                     c_d: float = 100.0) -> SolveReport:
    """Minimum p-norm flow with net inflow ``b`` at every vertex."""
    if g.b is None:
        raise ValueError("flow problems need demands")
    b = _check_demands(g)
    p = g.p
    primal = flow_primal_model(g)
    if not np.any(b):
        return SolveReport(np.zeros(g.m), 0.0, 0, 0, 0.0, True, p, audit=audit, stop_reason="zero")
    if p >= 2:
        rep = refine(primal, p, g.eps, cfg=cfg, audit=audit)
        return rep
    # dual over vertex potentials: min ||A y||_q  s.t.  b.y = 1
    q = p / (p - 1)
    ground = _grounds(g.comp, g.n_comp)
    dual = PotentialModel(g.A, ground, np.zeros(ground.size), K0=b[None, :], e0=[1.0])
    inner = refine(dual, q, g.eps / (c_d * g.m**2), cfg=cfg, audit=audit)
    z = inner.x
    xh = np.sign(z) * safe_pow(np.abs(z), q - 1)
    Bt = primal.B.T
    Axh = Bt @ xh
    s = float(Axh @ primal.b_B) / float(Axh @ Axh)
    x = s * xh
    x = x + edge_solve(primal.B, None, np.ones(g.m), primal.b_B - Bt @ x, None, primal._unit)
    return _report(x, p, primal, inner, g.eps, audit)


def _label_setup(g: GraphInstance):
    if g.labelled is None or len(g.labelled) == 0:
        raise ValueError("labelling needs a nonempty labelled set")
    T = np.asarray(g.labelled, dtype=np.int64)
    s = np.asarray(g.s, dtype=float)
    if s.shape != T.shape:
        raise ValueError("one label value per labelled vertex")
    if np.unique(T).size != T.size:
        raise ValueError("duplicate labelled vertex")
    mask = np.zeros(g.n_vertices, dtype=bool)
    mask[T] = True
    extra = _grounds(g.comp, g.n_comp, keep_mask=mask)
    if extra.size:
        warnings.warn("component without labels: values set to zero", stacklevel=3)
    return T, s, mask, extra


def labelling_objective(g: GraphInstance, u) -> float:
    return float(np.sum(safe_pow(np.abs(g.A @ u), g.p)))


def solve_lipschitz_labels(g: GraphInstance, cfg: SearchConfig | None = None, audit: Audit | None = None,
                           c_d: float = 100.0):
    """Minimize ``||A u||_p^p`` over vertex values with ``u = s`` on the labelled set.

    Returns ``(u, report)``.
    """
    T, s, mask, extra = _label_setup(g)
    p = g.p
    fixed = np.r_[T, extra]
    vals = np.r_[s, np.zeros(extra.size)]
    model = PotentialModel(g.A, fixed, vals)
    if model.free.size == 0:
        u = np.zeros(g.n_vertices)
        u[fixed] = vals
        z = g.A @ u
        return u, SolveReport(z, labelling_objective(g, u), 0, 0, 0.0, True, p, audit=audit,
                              stop_reason="all_labelled")
    if p >= 2:
        rep = refine(model, p, g.eps, cfg=cfg, audit=audit)
        return model.potentials(rep.x), rep
    # dual: flows y with no net flow off the labelled set, normalised by s
    q = p / (p - 1)
    h = np.asarray(g.A[:, fixed] @ vals).ravel()
    if not np.any(h):
        u = model.potentials(model.x0)
        return u, SolveReport(model.x0, labelling_objective(g, u), 0, 0, 0.0, True, p, audit=audit,
                              stop_reason="constant")
    keep = np.setdiff1d(np.arange(g.n_vertices), fixed)
    dual = EdgeModel(g.A[:, keep], np.zeros(keep.size), H=h[None, :], b_H=[1.0])
    inner = refine(dual, q, g.eps / (c_d * g.m**2), cfg=cfg, audit=audit)
    y = inner.x
    zh = np.sign(y) * safe_pow(np.abs(y), q - 1)
    # fit u_free and a scale so that A u matches the recovered edge differences
    AF = model.AF.toarray()
    M = np.column_stack([AF, -zh])
    sol = np.linalg.lstsq(M, -model.z_fixed, rcond=None)[0]
    u = np.zeros(g.n_vertices)
    u[model.free] = sol[:-1]
    u[fixed] = vals
    z = g.A @ u
    rep = SolveReport(z, labelling_objective(g, u), inner.outer_iters, inner.oracle_calls,
                      kkt_residual(model, p, z) if np.all(z != 0) else float("nan"), True, p,
                      trace=inner.trace, audit=audit, inner=inner, stop_reason=inner.stop_reason)
    rep.converged = inner.converged or inner.stop_reason == "no_improvement"
    return u, rep


def general_flow_solve(g: GraphInstance, cfg=None, audit=None, maintain=False):
    """The same flow problem through the dense-matrix solver (for cross-checks)."""
    from .refinement import ProblemInstance, solve_pnorm
    b = _check_demands(g)
    At = g.A.T.toarray()
    return solve_pnorm(ProblemInstance(At, b, g.p, g.eps), cfg=cfg, audit=audit, maintain=maintain)
