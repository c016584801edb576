"""Search over dyadic bins of the residual optimum.

For each bin ``i`` the residual problem is rewritten as a smoothed
least-power problem whose optimum is at most one when ``i`` is the right
bin; the MWU solver is run on it and its answer rescaled into a step.
Bins are visited from the top down and the step giving the smallest
p-norm is kept.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .gamma_core import GammaParams, gamma, power_gradient, residual_value, safe_pow
from .mwu_residual import BudgetExceededError, WidthStallError, gamma_solver, mwu_params
from .quadratic_solver import ConstraintStack, InfeasibleError

log = logging.getLogger(__name__)


def bin_range(p: float, eps: float, x0_norm_p_p: float, m: int, lam: float):
    """Bins ``[ceil(log2(eps N / m^(|p-2|/2))) - 1, ceil(log2(N / lam)) + 1]``, ``N = ||x0||_p^p``."""
    if x0_norm_p_p <= 0:
        raise ValueError("initial objective must be positive")
    lo = math.ceil(math.log2(eps * x0_norm_p_p / m ** (abs(p - 2) / 2))) - 1
    hi = math.ceil(math.log2(x0_norm_p_p / lam)) + 1
    return lo, hi


def demand(p: float, i: int) -> float:
    """Right-hand side of the gradient row for bin ``i``."""
    return (2 / p) ** 0.5 * ((p - 1) / p) ** (1 / p) * 2.0 ** (i * (1 - 1 / p) - 2)


def rescale_factor(p: float, i: int) -> float:
    """Factor taking a solution of the bin-``i`` problem back to residual scale."""
    return (p / 2) ** 0.5 * (p / (p - 1)) ** (1 / p) * 2.0 ** (1 + i / p)


def clamp_thresholds(p: float, i: int, x, m: int):
    """``min(1, max(m^(-1/p), ((p-1)/p)^(1/p) 2^(-i/p-1) |x|))``."""
    x = np.asarray(x, dtype=float)
    raw = ((p - 1) / p) ** (1 / p) * 2.0 ** (-i / p - 1) * np.abs(x)
    return np.minimum(1.0, np.maximum(m ** (-1.0 / p), raw))


def step_multiplier(p: float, kappa: float = 2.0) -> float:
    """Shrink factor for a bin candidate.

    ``beta = (p/2)^(p/2) kappa`` is the approximation ratio carried over from
    the bin problem; ``mu = (1/(2 beta p))^(1/(p-1))`` for ``p <= 2`` and
    ``1/(4 beta)`` otherwise.
    """
    beta = (p / 2) ** (p / 2) * kappa
    return (1 / (2 * beta * p)) ** (1 / (p - 1)) if p <= 2 else 1 / (4 * beta)


@dataclass
class BinInstance:
    i: int
    c: float
    t: np.ndarray
    stack: ConstraintStack
    beta_approx: float
    mu: float


def residual_upper_bound(gp: GammaParams, x, h) -> float:
    """Upper bound on the residual optimum from a separable relaxation.

    ``h`` is the gradient projected onto the null space.  Dropping the
    subspace constraint from ``max h.D - c gamma_p(|x|, D)`` leaves a
    one-dimensional concave problem per coordinate, solved in closed form.
    Since ``g.D = h.D`` on the null space this bounds the true optimum.
    """
    p, c = gp.p, gp.res_coeff
    t = np.abs(np.asarray(x, dtype=float))
    h = np.asarray(h, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        dq = np.where(t > 0, h / (c * p * safe_pow(t, p - 2)), np.inf)
    inner = np.abs(dq) <= t
    d = np.where(inner, dq, np.sign(h) * safe_pow(np.abs(h) / (c * p), 1 / (p - 1)))
    return float(np.sum(h * d - c * gamma(p, t, d)))


@lru_cache(maxsize=256)
def _params(p, m, c_rho, c_beta, c_alpha, c_tau, c_K):
    return mwu_params(p, m, c_rho, c_beta, c_alpha, c_tau, c_K)


@dataclass
class SearchConfig:
    """Options of the bin search.

    ``line_search`` adds, for each bin, the exact minimizer of the p-norm
    along the bin direction as a second candidate.  ``early_exit`` stops
    the descending sweep once a bin certifies the guaranteed residual.
    """

    kappa: float = 2.0
    early_exit: bool = True
    line_search: bool = True
    ub_start: bool = True
    c_rho: float = 1.0
    c_beta: float = 1.0
    c_alpha: float = 1.0
    c_tau: float = 1.0
    c_K: float = 2.0

    def mwu(self, p, m):
        if p == 2:
            return GammaParams.from_p(2.0)
        return _params(float(p), int(m), self.c_rho, self.c_beta, self.c_alpha,
                       self.c_tau, self.c_K)


@dataclass
class StepResult:
    step: np.ndarray | None
    objective: float
    bin: int | None
    res_guaranteed: float
    bins_visited: int = 0
    bins_failed: int = 0
    oracle_calls: int = 0
    failures: dict = field(default_factory=dict)
    mwu_trace: list = field(default_factory=list)


def _line_search(p, x, D):
    """Exact minimizer of ``s -> ||x - s D||_p^p`` over ``s >= 0``."""
    def deriv(s):
        u = x - s * D
        return -p * float(np.sum(np.sign(u) * safe_pow(np.abs(u), p - 1) * D))
    if deriv(0.0) >= 0:
        return 0.0
    hi = 1.0 / max(np.max(np.abs(D)), 1e-300) * (np.max(np.abs(x)) + 1.0)
    while deriv(hi) < 0:
        hi *= 2
    return brentq(deriv, 0.0, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps, maxiter=500)


def kappa_approx(model, x, gp: GammaParams, lo: int, hi: int, cfg: SearchConfig | None = None,
                 kernel_factory=None, audit=None, keep_trace: bool = False) -> StepResult:
    """One outer step: sweep bins from the top and return the best step.

    Parameters
    ----------
    model
        Affine feasible set, see ``refinement.DenseModel``.
    x : ndarray
        Current feasible iterate.
    gp : GammaParams
    lo, hi : int
        Bin range from ``bin_range``.
    cfg : SearchConfig
    kernel_factory : callable, optional
        Returns a least-norm kernel for each bin solve.

    Returns
    -------
    StepResult
        ``step`` is to be subtracted from ``x``; None when no bin produced a
        candidate that lowers the objective.
    """
    cfg = SearchConfig() if cfg is None else cfg
    p = gp.p
    lam = gp.step_scale
    m = x.size
    g = power_gradient(p, x)
    f0 = float(np.sum(safe_pow(np.abs(x), p)))
    mu = step_multiplier(p, cfg.kappa)
    start = hi
    if cfg.ub_start:
        ub = residual_upper_bound(gp, x, model.project(g))
        if ub <= 0:
            return StepResult(None, f0, None, 0.0)
        start = min(hi, math.ceil(math.log2(ub)) + 1)
    prm = cfg.mwu(p, m)
    out = StepResult(None, f0, None, -math.inf)
    best = f0
    for i in range(start, lo - 1, -1):
        c = demand(p, i)
        t = clamp_thresholds(p, i, x, m)
        stack = model.residual_stack(g, c)
        kernel = kernel_factory() if kernel_factory is not None else model.make_kernel()
        out.bins_visited += 1
        try:
            rep = gamma_solver(stack, t, prm, kernel=kernel, audit=audit, keep_trace=keep_trace)
        except (InfeasibleError, BudgetExceededError, WidthStallError) as exc:
            out.bins_failed += 1
            name = type(exc).__name__
            out.failures[name] = out.failures.get(name, 0) + 1
            continue
        finally:
            out.oracle_calls += getattr(kernel, "n_solves", 0)
        if keep_trace:
            out.mwu_trace.extend(dict(row, bin=i) for row in rep.trace)
        D = model.project(rescale_factor(p, i) * rep.x)
        base = lam * mu * D
        cands = [base]
        if cfg.line_search:
            s = _line_search(p, x, D)
            if s > 0:
                cands.append(s * D)
        for step in cands:
            fn = float(np.sum(safe_pow(np.abs(x - step), p)))
            if fn <= best:
                best, out.step, out.bin, out.objective = fn, step, i, fn
        r_mu = residual_value(gp, g, np.abs(x), mu * D)
        out.res_guaranteed = max(out.res_guaranteed, r_mu)
        if audit is not None and audit.enabled:
            fp = float(np.sum(safe_pow(np.abs(x - base), p)))
            audit("step_sandwich", fp <= f0 - lam * r_mu + 1e-12 * f0,
                  f"{fp:.17g} > {f0 - lam * r_mu:.17g}")
        if cfg.early_exit and r_mu >= 2.0 ** (i - 1) * mu * (1 - 1 / min(2.0, p)):
            break
    if out.step is not None and best >= f0:
        out.step = None
    return out
