"""Outer iteration for ``min ||x||_p  s.t.  A x = b``.

Starting from the minimum 2-norm solution, each step solves the residual
problem approximately (``scaling_search.kappa_approx``) and moves against
the returned direction while the objective decreases.  For ``1 < p < 2``
the dual problem over the ``q``-norm, ``q = p/(p-1) > 2``, is solved
instead and the primal solution recovered from its gradient.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .audit import Audit
from .gamma_core import GammaParams, power_gradient, residual_value, safe_pow
from .inverse_maintenance import MaintainedKernel
from .quadratic_solver import ConstraintStack, DirectKernel
from .scaling_search import SearchConfig, bin_range, kappa_approx

log = logging.getLogger(__name__)

RANK_RTOL = 1e-12


def _orth_rows(A):
    """Orthonormal basis (columns) of the row space of ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((A.shape[1], 0))
    Q, R, _ = sla.qr(A.T, mode="economic", pivoting=True)
    dg = np.abs(np.diag(R))
    rank = int(np.sum(dg > RANK_RTOL * dg[0])) if dg.size and dg[0] > 0 else 0
    return Q[:, :rank]


def initial_solution(A, b):
    """Minimum 2-norm solution ``A^T (A A^T)^+ b``.

    Raises
    ------
    ValueError
        If ``b`` is not in the range of ``A``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    x0 = np.linalg.lstsq(A, b, rcond=None)[0]
    if np.linalg.norm(A @ x0 - b) > 1e-8 * max(1.0, np.linalg.norm(b)):
        raise ValueError("b is not in the range of A")
    return x0


class DenseModel:
    """Feasible set ``{x : A x = b}`` for a dense matrix.

    The constraint rows handed to the residual solver are an orthonormal
    basis of the row space of ``A``; this describes the same subspace as
    ``A`` itself and keeps the least-norm solves well conditioned.
    """

    def __init__(self, A, b, maintain: bool = False, audit: Audit | None = None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        self.m = self.A.shape[1]
        self.Q = _orth_rows(self.A)
        self.x0 = initial_solution(self.A, self.b)
        self.maintain = maintain
        self.audit = audit
        self.kernels = []

    def project(self, v):
        """Orthogonal projection onto the null space of ``A``."""
        return v - self.Q @ (self.Q.T @ v)

    def residual_stack(self, g, c: float) -> ConstraintStack:
        gn = np.linalg.norm(g)
        rows = np.vstack([self.Q.T, g / gn])
        return ConstraintStack(rows, np.r_[np.zeros(self.Q.shape[1]), c / gn])

    def make_kernel(self):
        if self.maintain:
            check = self.audit.check if self.audit is not None and self.audit.enabled else None
            k = MaintainedKernel(check=check)
        else:
            k = DirectKernel()
        self.kernels.append(k)
        return k

    def feasibility(self, x) -> float:
        return float(np.linalg.norm(self.A @ x - self.b))


@dataclass
class ProblemInstance:
    """``min ||x||_p  s.t.  A x = b`` with target accuracy ``eps``."""

    A: np.ndarray
    b: np.ndarray
    p: float
    eps: float = 1e-4
    max_outer: int | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        n, m = self.A.shape
        if self.b.shape != (n,):
            raise ValueError("b must have one entry per row of A")
        if not (1 < self.p < math.inf):
            raise ValueError("p must lie in (1, inf)")
        if not (0 < self.eps < 1):
            raise ValueError("eps must lie in (0, 1)")
        if n > m:
            warnings.warn("more constraints than variables", stacklevel=2)
        if 0 < np.linalg.norm(self.b) < 1:
            warnings.warn("||b|| < 1; bin range assumes a normalised right-hand side", stacklevel=2)


@dataclass
class SolveReport:
    """Result of a solve; ``trace`` has one row per outer iteration."""

    x: np.ndarray
    objective: float
    outer_iters: int
    oracle_calls: int
    kkt_residual: float
    converged: bool
    p: float
    trace: list = field(default_factory=list)
    mwu_trace: list = field(default_factory=list)
    audit: Audit | None = None
    inner: "SolveReport | None" = None
    telemetry: list = field(default_factory=list)
    stop_reason: str = ""


def kkt_residual(model, p: float, x) -> float:
    """``||P g|| / ||g||`` with ``g = p |x|^(p-2) x`` and ``P`` the null-space projector."""
    g = power_gradient(p, x)
    gn = np.linalg.norm(g)
    return 0.0 if gn == 0 else float(np.linalg.norm(model.project(g)) / gn)


def refine(model, p: float, eps: float, cfg: SearchConfig | None = None, audit: Audit | None = None,
           max_outer: int | None = None, c_T: float = 64.0, bin_eps: float | None = None,
           keep_trace: bool = False) -> SolveReport:
    """Iterative refinement on an affine feasible set, ``p >= 2``.

    Parameters
    ----------
    model
        Provides ``x0``, ``m``, ``project``, ``residual_stack`` and
        ``make_kernel``.
    p, eps : float
    cfg : SearchConfig
    audit : Audit
    max_outer : int, optional
        Defaults to ``ceil(c_T log(m / eps))``.
    bin_eps : float, optional
        Accuracy used for the lower end of the bin range; ``eps**2`` by
        default so that the stationarity test can be met.
    keep_trace : bool
        Keep the MWU step records of every bin solve.
    """
    gp = GammaParams.from_p(p)
    cfg = SearchConfig() if cfg is None else cfg
    audit = Audit("off") if audit is None else audit
    m = model.m
    x = model.x0.copy()
    f = float(np.sum(safe_pow(np.abs(x), p)))
    T = max_outer if max_outer is not None else int(math.ceil(c_T * math.log(m / eps)))
    rep = SolveReport(x, f, 0, 0, 0.0, False, p, audit=audit)
    if f == 0:
        rep.converged, rep.stop_reason = True, "zero"
        return rep
    lo, hi = bin_range(p, eps * eps if bin_eps is None else bin_eps, f, m, gp.step_scale)
    reason = "budget"
    for it in range(T):
        kkt = kkt_residual(model, p, x)
        if kkt <= eps:
            reason = "stationary"
            break
        g = power_gradient(p, x)
        res = kappa_approx(model, x, gp, lo, hi, cfg, audit=audit, keep_trace=keep_trace)
        rep.oracle_calls += res.oracle_calls
        if keep_trace:
            rep.mwu_trace.extend(dict(row, outer=it) for row in res.mwu_trace)
        if res.step is None:
            reason = "no_improvement"
            break
        x_new = x - res.step
        f_new = float(np.sum(safe_pow(np.abs(x_new), p)))
        if f_new >= f:
            reason = "no_improvement"
            break
        if audit.enabled:
            r_step = residual_value(gp, g, np.abs(x), res.step)
            audit("step_lower", f_new >= (f - r_step) - 1e-12 * f, f"{f_new:.17g} < {f - r_step:.17g}")
        rep.trace.append({"iter": it, "objective": f_new, "kkt": kkt, "bin": res.bin,
                          "res_guaranteed": res.res_guaranteed, "bins_visited": res.bins_visited,
                          "bins_failed": res.bins_failed, "oracle_calls": res.oracle_calls})
        x, f = x_new, f_new
        rep.outer_iters = it + 1
    rep.x, rep.objective = x, f
    rep.kkt_residual = kkt_residual(model, p, x)
    rep.converged = rep.kkt_residual <= eps
    rep.stop_reason = "stationary" if rep.converged else reason
    for k in getattr(model, "kernels", []):
        rep.telemetry.extend(getattr(k, "telemetry", []))
    return rep


def solve_pnorm(inst: ProblemInstance, cfg: SearchConfig | None = None, audit: Audit | None = None,
                maintain: bool = False, keep_trace: bool = False, c_d: float = 100.0) -> SolveReport:
    """Solve ``min ||x||_p  s.t.  A x = b``; ``p < 2`` goes through the dual."""
    if inst.p < 2:
        return solve_pnorm_dual(inst, cfg=cfg, audit=audit, maintain=maintain,
                                keep_trace=keep_trace, c_d=c_d)
    model = DenseModel(inst.A, inst.b, maintain=maintain, audit=audit)
    rep = refine(model, inst.p, inst.eps, cfg=cfg, audit=audit, max_outer=inst.max_outer,
                 keep_trace=keep_trace)
    return rep


@dataclass
class AffineReduction:
    """``min ||C x - d||`` over ``A x = b`` rewritten over ``z = C x - d``.

    ``z`` ranges over ``{U y + g_perp}``, described by the linear constraints
    ``A_lift z = b_lift``: ``W^T z = 0`` for an orthonormal basis ``W`` of the
    complement of ``span(U, g_perp)``, and ``g_perp . z = ||g_perp||^2``.
    """

    U: np.ndarray
    g_perp: np.ndarray
    A_lift: np.ndarray
    b_lift: np.ndarray
    x0: np.ndarray
    V: np.ndarray
    CV: np.ndarray
    h: np.ndarray

    def recover(self, z):
        """A point ``x`` on the affine set with ``C x - d`` closest to ``z``."""
        if self.CV.shape[1] == 0:
            return self.x0.copy()
        y = np.linalg.lstsq(self.CV, z - self.h, rcond=None)[0]
        return self.x0 + self.V @ y


def reduce_affine(C, d, A=None, b=None) -> AffineReduction:
    """Reduce ``min ||C x - d||_p  s.t.  A x = b`` to linear constraints on ``z``.

    With ``x = x0 + V y`` (``V`` a null-space basis of ``A``) the objective
    is ``||C V y + h||`` with ``h = C x0 - d``.  ``U`` is an orthonormal basis
    of the columns of ``C V`` and ``g_perp`` the part of ``h`` orthogonal
    to them.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    k = C.shape[1]
    if A is None or np.size(A) == 0:
        x0 = np.zeros(k)
        V = np.eye(k)
    else:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        x0 = initial_solution(A, b)
        V = sla.null_space(A, rcond=RANK_RTOL)
    CV = C @ V
    h = C @ x0 - d
    if CV.size:
        U, s, _ = np.linalg.svd(CV, full_matrices=False)
        U = U[:, s > RANK_RTOL * max(s[0], 1e-300)] if s.size and s[0] > 0 else U[:, :0]
    else:
        U = np.zeros((C.shape[0], 0))
    g_perp = h - U @ (U.T @ h)
    gn2 = float(g_perp @ g_perp)
    span = U if gn2 <= (RANK_RTOL * max(1.0, np.linalg.norm(h))) ** 2 else np.column_stack([U, g_perp])
    if span.shape[1]:
        W = sla.null_space(span.T, rcond=RANK_RTOL)
    else:
        W = np.eye(C.shape[0])
    if span.shape[1] > U.shape[1]:
        A_lift = np.vstack([W.T, g_perp])
        b_lift = np.r_[np.zeros(W.shape[1]), gn2]
    else:
        g_perp = np.zeros_like(h)
        A_lift, b_lift = W.T, np.zeros(W.shape[1])
    return AffineReduction(U, g_perp, A_lift, b_lift, x0, V, CV, h)


def solve_affine(C, d, A, b, p: float, eps: float = 1e-4, cfg=None, audit=None, maintain=False):
    """``min ||C x - d||_p`` over ``A x = b`` for ``p >= 2`` via ``reduce_affine``.

    Returns ``(x, objective, report)``; ``report`` is None when the
    objective is constant on the feasible set.
    """
    red = reduce_affine(C, d, A, b)
    if red.A_lift.shape[0] == 0 or not np.any(red.b_lift):
        # z = 0 is feasible: the objective vanishes at the recovered point
        x = red.recover(np.zeros(red.h.shape))
        return x, float(np.sum(np.abs(np.atleast_2d(C) @ x - d) ** p)), None
    if red.U.shape[1] == 0:
        x = red.x0.copy()
        return x, float(np.sum(np.abs(red.h) ** p)), None
    model = DenseModel(red.A_lift, red.b_lift, maintain=maintain, audit=audit)
    rep = refine(model, p, eps, cfg=cfg, audit=audit)
    x = red.recover(rep.x)
    return x, float(np.sum(np.abs(np.atleast_2d(C) @ x - d) ** p)), rep


def dual_recover(A, b, y, p: float):
    """Primal point from a dual vector ``y`` of ``min ||A^T y||_q, b.y = 1``.

    ``x_hat = sgn(A^T y) |A^T y|^(q-1)`` is scaled by least squares against
    ``b`` and then projected onto ``{A x = b}``.  The projection is a least
    squares correction in the metric ``W = |x_hat|^(2-p)`` (the inverse
    Hessian of ``||x||_p^p``), so the gradient only moves within the row
    space of ``A`` to first order.  Near-zero entries, where the gradient is
    steep for ``p < 2``, are left almost untouched.  Falls back to the plain
    least squares correction if ``A W A^T`` is singular.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    q = p / (p - 1)
    z = A.T @ y
    xh = np.sign(z) * safe_pow(np.abs(z), q - 1)
    Axh = A @ xh
    s = float(Axh @ b) / float(Axh @ Axh)
    xs = s * xh
    r = b - A @ xs
    w = safe_pow(np.abs(xs), 2 - p)
    try:
        cf = sla.cho_factor((A * w) @ A.T)
        corr = w * (A.T @ sla.cho_solve(cf, r))
        if np.all(np.isfinite(corr)) and np.linalg.norm(A @ (xs + corr) - b) <= 1e-10 * max(1.0, np.linalg.norm(b)):
            return xs + corr
    except (np.linalg.LinAlgError, ValueError):
        pass
    return xs + np.linalg.lstsq(A, r, rcond=None)[0]


def solve_pnorm_dual(inst: ProblemInstance, cfg: SearchConfig | None = None, audit: Audit | None = None,
                     maintain: bool = False, keep_trace: bool = False, c_d: float = 100.0) -> SolveReport:
    """Solve ``min ||x||_p  s.t.  A x = b`` for ``1 < p < 2`` through the dual.

    The dual ``min ||A^T y||_q  s.t.  b.y = 1`` is reduced to linear
    constraints on ``z = A^T y`` and solved by ``refine`` to accuracy
    ``eps / (c_d m^2)``; the primal point comes from ``dual_recover``.
    """
    p = inst.p
    if not (1 < p < 2):
        raise ValueError("dual route needs 1 < p < 2")
    A, b = inst.A, inst.b
    n, m = A.shape
    q = p / (p - 1)
    if not np.any(b):
        x = np.zeros(m)
        return SolveReport(x, 0.0, 0, 0, 0.0, True, p, audit=audit, stop_reason="zero")
    red = reduce_affine(A.T, np.zeros(m), b[None, :], np.array([1.0]))
    if red.U.shape[1] == 0:
        # the feasible set is a single point: A has full column rank
        x = initial_solution(A, b)
        primal = DenseModel(A, b)
        return SolveReport(x, float(np.sum(safe_pow(np.abs(x), p))), 0, 0,
                           kkt_residual(primal, p, x), True, p, audit=audit, stop_reason="unique")
    eps_d = inst.eps / (c_d * m * m)
    model = DenseModel(red.A_lift, red.b_lift, maintain=maintain, audit=audit)
    inner = refine(model, q, eps_d, cfg=cfg, audit=audit, keep_trace=keep_trace)
    y = red.recover(inner.x)
    x = dual_recover(A, b, y, p)
    primal = DenseModel(A, b)
    kkt = kkt_residual(primal, p, x)
    rep = SolveReport(x, float(np.sum(safe_pow(np.abs(x), p))), inner.outer_iters, inner.oracle_calls,
                      kkt, kkt <= inst.eps, p, trace=inner.trace, mwu_trace=inner.mwu_trace,
                      audit=audit, inner=inner, telemetry=inner.telemetry,
                      stop_reason=inner.stop_reason)
    rep.dual_y = y
    return rep
