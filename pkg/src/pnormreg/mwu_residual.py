"""Multiplicative-weights solver for ``min gamma_p(t, D)  s.t.  A_hat D = d``.

Each iteration computes the minimum-energy solution under resistances
``r_e = (m^(1/p) t_e)^(p-2) + w_e^(p-2)``.  Small solutions (in p-norm) are
accumulated into the answer and into the weights ("flow steps"); large
ones instead inflate the weights of wide, cheap coordinates ("width
steps").  The answer is the average of the accumulated flow steps.

With strict auditing the potentials tracked by the analysis are checked on
every step; see ``Audit``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .audit import Audit
from .gamma_core import gamma, gamma_prime, gamma_sum, safe_pow
from .quadratic_solver import ConstraintStack, DirectKernel, energy_growth_lower_bound

TRACE_COLUMNS = ["i", "k", "step_type", "lp_norm_delta", "phi", "psi", "n_width_entries"]
SLACK = 1e-9


class BudgetExceededError(RuntimeError):
    """More width steps than the budget allows."""


class WidthStallError(RuntimeError):
    """A width step found no coordinate to penalize."""


@dataclass(frozen=True)
class MwuParams:
    """Step sizes and thresholds for one problem size.

    ``T`` is rounded up to an integer and ``alpha`` set to ``m^(1/p) / T`` so
    the average of the flow steps meets the constraints exactly.
    """

    p: float
    m: int
    rho: float
    beta_r: float
    alpha: float
    tau: float
    T: int
    K_max: int
    c_rho: float
    c_beta: float
    c_alpha: float
    c_tau: float


def mwu_params(p: float, m: int, c_rho: float = 1.0, c_beta: float = 1.0,
               c_alpha: float = 1.0, c_tau: float = 1.0, c_K: float = 2.0) -> MwuParams:
    """Default parameters, with leading constants adjusted for consistency.

    The three conditions used by the potential arguments reduce to
    conditions on the constants alone because the powers of ``m`` cancel:

    * ``alpha^p tau <= alpha m^((p-1)/p)``       <=>  ``c_alpha^(p-1) c_tau <= 1``
    * ``tau^(2/p) >= 2 m^((p-2)/p) / beta_r``     <=>  ``c_tau^(2/p) >= 2 / c_beta``
    * ``tau / 10 >= rho^(p-2) m^((p-2)/p)``        <=>  ``c_tau / 10 >= c_rho^(p-2)``

    ``c_tau`` is raised for the second, then ``c_alpha`` and ``c_rho`` lowered
    for the first and third.
    """
    if p <= 2:
        raise ValueError("width-reduced solver needs p > 2")
    c_tau = max(c_tau, (2.0 / c_beta) ** (p / 2))
    c_alpha = min(c_alpha, c_tau ** (-1.0 / (p - 1)))
    c_rho = min(c_rho, (c_tau / 10.0) ** (1.0 / (p - 2)))
    e = 3 * p - 2
    rho = c_rho * m ** ((p * p - 4 * p + 2) / (p * e))
    beta_r = c_beta * m ** ((p - 2) / e)
    alpha = c_alpha * m ** (-(p * p - 5 * p + 2) / (p * e))
    tau = c_tau * m ** ((p - 1) * (p - 2) / e)
    T = int(math.ceil(m ** (1 / p) / alpha - 1e-9))
    alpha = m ** (1 / p) / T
    K = int(math.ceil(c_K * rho**2 * m ** (2 / p) * beta_r ** (-2 / (p - 2))))
    prm = MwuParams(p=p, m=m, rho=rho, beta_r=beta_r, alpha=alpha, tau=tau, T=T, K_max=K,
                    c_rho=c_rho, c_beta=c_beta, c_alpha=c_alpha, c_tau=c_tau)
    check_params(prm)
    return prm


def check_params(prm: MwuParams, rtol: float = 1e-12) -> None:
    """Raise ValueError if the consistency conditions fail."""
    p, m = prm.p, prm.m
    ok1 = prm.alpha**p * prm.tau <= prm.alpha * m ** ((p - 1) / p) * (1 + rtol)
    ok2 = prm.tau ** (2 / p) >= 2 * m ** ((p - 2) / p) / prm.beta_r * (1 - rtol)
    ok3 = prm.tau / 10 >= prm.rho ** (p - 2) * m ** ((p - 2) / p) * (1 - rtol)
    if not (ok1 and ok2 and ok3):
        raise ValueError(f"inconsistent parameters ({ok1}, {ok2}, {ok3})")


def oracle_resistances(p: float, t, w, m: int):
    """``r_e = (m^(1/p) t_e)^(p-2) + w_e^(p-2)``; thresholds must be clamped."""
    t = np.asarray(t, dtype=float)
    w = np.asarray(w, dtype=float)
    lo = m ** (-1.0 / p)
    if np.any(t < lo * (1 - 1e-12)) or np.any(t > 1 + 1e-12):
        raise ValueError("thresholds must lie in [m^(-1/p), 1]")
    if p == 2:
        return np.full(t.shape, 2.0)
    return safe_pow(m ** (1.0 / p) * t, p - 2) + safe_pow(w, p - 2)


@dataclass
class MwuState:
    """Weights, accumulated solution and step counters."""

    w: np.ndarray
    x_acc: np.ndarray
    i: int = 0
    k: int = 0
    phi: float = 0.0
    psi: float = float("nan")
    trace: list = field(default_factory=list)


def width_reduction_step(state: MwuState, delta, r, a, prm: MwuParams, audit: Audit | None = None):
    """Inflate weights of coordinates with ``|delta_e| >= rho`` and ``r_e <= beta_r``.

    ``a`` is ``m^(1/p) t``.  Selected weights become
    ``4^(1/(p-2)) max(a_e, w_e)``.  Returns the selection mask.
    """
    p = prm.p
    sel = (np.abs(delta) >= prm.rho) & (r <= prm.beta_r)
    if not sel.any():
        raise WidthStallError(
            f"no coordinate with |delta| >= {prm.rho:.3g} and r <= {prm.beta_r:.3g}; "
            f"max |delta| {np.max(np.abs(delta)):.3g}, min r {np.min(r):.3g}")
    w_new = state.w.copy()
    w_new[sel] = 4.0 ** (1.0 / (p - 2)) * np.maximum(a[sel], state.w[sel])
    if audit is not None and audit.enabled:
        r_new = safe_pow(a[sel], p - 2) + safe_pow(w_new[sel], p - 2)
        ratio = r_new / r[sel]
        lo, hi = float(ratio.min()), float(ratio.max())
        audit("width_ratio_narrow", lo >= 2 * (1 - SLACK) and hi <= 4 * (1 + SLACK),
              f"ratio range [{lo:.4f}, {hi:.4f}] vs [2, 4]")
        audit("width_ratio", lo >= 2 * (1 - SLACK) and hi <= 5 * (1 + SLACK),
              f"ratio range [{lo:.4f}, {hi:.4f}] vs [2, 5]")
    state.w = w_new
    state.k += 1
    return sel


@dataclass
class GammaSolveReport:
    x: np.ndarray
    flow_steps: int
    width_steps: int
    oracle_calls: int
    gamma_value: float
    opt_upper: float
    trace: list


def _phi_bound(prm: MwuParams, i: int, k: int) -> float:
    p, m = prm.p, prm.m
    C = 2.0 * (4.0 ** (p / (p - 2)) + p / 2 - 1)
    scale = prm.rho**2 * m ** (2 / p) * prm.beta_r ** (-2 / (p - 2))
    log_b = p * math.log(p * p * 2**p * prm.alpha * i + m ** (1 / p)) + C * k / scale
    return math.exp(log_b) if log_b < 709.0 else math.inf


def gamma_solver(stack: ConstraintStack, t, prm, kernel=None,
                 audit: Audit | None = None, keep_trace: bool = True) -> GammaSolveReport:
    """Approximately minimize ``gamma_p(t, D)`` subject to ``A_hat D = d``.

    Parameters
    ----------
    stack : ConstraintStack
    t : ndarray
        Thresholds clamped to ``[m^(-1/p), 1]``.
    prm : MwuParams or GammaParams
        From ``mwu_params``; for ``p == 2`` anything with a ``p`` attribute.
    kernel : object, optional
        Least-norm kernel with ``begin/solve/end``; fresh factorizations by
        default.
    audit : Audit, optional

    Raises
    ------
    BudgetExceededError, WidthStallError, InfeasibleError
    """
    t = np.asarray(t, dtype=float)
    m = stack.m
    kernel = DirectKernel() if kernel is None else kernel
    p = prm.p
    kernel.begin(stack)
    try:
        if p == 2:
            r = oracle_resistances(p, t, np.zeros(m), m)
            delta, psi = kernel.solve(r)
            row = {"i": 1, "k": 0, "step_type": "flow", "lp_norm_delta": float(delta @ delta),
                   "phi": 0.0, "psi": psi, "n_width_entries": 0}
            val = gamma_sum(p, t, delta)
            return GammaSolveReport(delta, 1, 0, 1, val, val, [row] if keep_trace else [])
        return _gamma_loop(stack, t, prm, kernel, audit, keep_trace)
    finally:
        kernel.end()


def _gamma_loop(stack, t, prm, kernel, audit, keep_trace):
    p, m = prm.p, stack.m
    strict = audit is not None and audit.enabled
    a = m ** (1.0 / p) * t
    ap = safe_pow(a, p - 2)
    st = MwuState(w=np.zeros(m), x_acc=np.zeros(m))
    opt_upper = math.inf
    calls = 0
    pending = None  # (lower bound on next energy, label) after a width step
    prev_psi = None
    if strict:
        dn2 = float(stack.d @ stack.d)
        anorm = np.linalg.norm(stack.A_hat, 2)
    mp = m ** ((p - 2) / p)
    while st.i < prm.T:
        r = ap + safe_pow(st.w, p - 2)
        delta, psi = kernel.solve(r)
        calls += 1
        lp = float(np.sum(np.abs(delta) ** p))
        opt_upper = min(opt_upper, gamma_sum(p, t, delta))
        if strict:
            if prev_psi is None:
                audit("psi_initial", psi >= dn2 / anorm**2 * (1 - SLACK),
                      f"psi {psi:.6g} < {dn2 / anorm**2:.6g}")
            else:
                audit("psi_monotone", psi >= prev_psi * (1 - SLACK), f"{psi:.6g} < {prev_psi:.6g}")
            if pending is not None:
                audit("psi_growth", psi >= pending * (1 - SLACK), f"psi {psi:.6g} < bound {pending:.6g}")
            G = max(1.0, opt_upper)
            ub = mp * G + st.phi ** ((p - 2) / p) * G ** (2 / p)
            audit("psi_upper", psi <= ub * (1 + SLACK), f"psi {psi:.6g} > {ub:.6g} (G={G:.3g})")
            if opt_upper <= 1:
                dot = float(np.sum(np.abs(delta) * np.abs(gamma_prime(p, a, st.w))))
                dub = p * st.phi ** ((p - 1) / p) + p * m ** ((p - 2) / (2 * p)) * st.phi**0.5
                audit("oracle_dot", dot <= dub * (1 + SLACK) + 1e-300, f"{dot:.6g} > {dub:.6g}")
            else:
                audit.skip("oracle_dot")
        prev_psi = psi
        pending = None
        if lp <= prm.tau:
            st.w = st.w + prm.alpha * np.abs(delta)
            st.x_acc = st.x_acc + prm.alpha * delta
            st.i += 1
            n_sel = 0
            kind = "flow"
            if strict and p >= 3:
                r_new = ap + safe_pow(st.w, p - 2)
                rel = (r_new - r) / r
                lim = (1 + prm.alpha * np.abs(delta)) ** (p - 2) - 1
                audit("flow_resistance", bool(np.all(rel <= lim * (1 + SLACK) + 1e-15)),
                      f"max excess {np.max(rel - lim):.3e}")
            elif strict:
                audit.skip("flow_resistance")
        else:
            sel = width_reduction_step(st, delta, r, a, prm, audit)
            n_sel = int(sel.sum())
            kind = "width"
            if strict:
                r_new = ap + safe_pow(st.w, p - 2)
                pending = energy_growth_lower_bound(delta, r, r_new, psi)
            if st.k > prm.K_max:
                raise BudgetExceededError(f"width steps exceeded budget {prm.K_max}")
        st.phi = gamma_sum(p, a, st.w)
        st.psi = psi
        if strict:
            audit("w_dominates", bool(np.all(st.w >= np.abs(st.x_acc) * (1 - 1e-12))),
                  "w < |x_acc|")
            if opt_upper <= 1:
                bound = _phi_bound(prm, st.i, st.k)
                audit("phi_bound", st.phi <= bound * (1 + SLACK), f"phi {st.phi:.6g} > {bound:.6g}")
            else:
                audit.skip("phi_bound")
        if keep_trace:
            st.trace.append({"i": st.i, "k": st.k, "step_type": kind, "lp_norm_delta": lp,
                             "phi": st.phi, "psi": psi, "n_width_entries": n_sel})
    x = st.x_acc / m ** (1.0 / p)
    return GammaSolveReport(x, st.i, st.k, calls, gamma_sum(p, t, x), opt_upper, st.trace)


def write_trace_csv(rows, path) -> None:
    """Write MWU trace rows with the columns of ``TRACE_COLUMNS``."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
