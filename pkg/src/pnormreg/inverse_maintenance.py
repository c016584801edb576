"""Lazily updated inverse of ``A^T diag(r_hat)^-1 A`` across reweighting steps.

Resistance increases are sorted into dyadic buckets by their size relative
to the snapshot ``r_hat``.  An entry is folded into the snapshot once
bucket ``eta`` has collected ``2^eta`` increments and the iteration count
is a multiple of ``2^eta``; folded entries enter the inverse through a
Woodbury correction.  Solves with the current resistances use the stale
inverse as a preconditioner for conjugate gradients.

Here ``A`` is ``m x k`` (one row per resistance), so the maintained matrix
is ``k x k``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .quadratic_solver import FEAS_RTOL, ConstraintStack, solve_weighted_l2

log = logging.getLogger(__name__)


def sandwich_factor(m: int) -> float:
    """Upper factor ``5 log m`` of the snapshot approximation (log base 2, at least 1)."""
    return 5.0 * max(1.0, math.log2(max(m, 1)))


def eta_max(m: int) -> int:
    return max(0, math.ceil(math.log2(max(m, 1))))


@dataclass
class MaintainedInverse:
    """State of the lazy inverse.

    Attributes
    ----------
    r_hat : ndarray
        Resistance snapshot the inverse is exact for.
    Z_hat : ndarray
        ``(A^T diag(r_hat)^-1 A)^-1``.
    counters : ndarray
        ``counters[eta, e]`` counts increments of entry ``e`` in bucket ``eta``.
    drift : ndarray
        Relative increments too small for any bucket, accumulated per entry.
    i : int
        Update counter.
    """

    r_hat: np.ndarray
    Z_hat: np.ndarray
    counters: np.ndarray
    drift: np.ndarray
    i: int = 0
    telemetry: list = field(default_factory=list)
    n_fresh: int = 0
    n_forced: int = 0


def _gram(A, r):
    return (A.T / r) @ A


def _inv_spd(M):
    try:
        c = sla.cho_factor(M)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(M, hermitian=True)
    return sla.cho_solve(c, np.eye(M.shape[0]))


def inverse_init(A, r0) -> MaintainedInverse:
    """Snapshot ``r0`` and invert ``A^T diag(r0)^-1 A`` explicitly."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    r0 = np.asarray(r0, dtype=float).copy()
    if not np.all(r0 > 0):
        raise ValueError("resistances must be positive")
    m = A.shape[0]
    try:
        Z = sla.cho_solve(sla.cho_factor(_gram(A, r0)), np.eye(A.shape[1]))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular matrix in inverse_init") from exc
    return MaintainedInverse(r_hat=r0, Z_hat=Z,
                             counters=np.zeros((eta_max(m) + 1, m), dtype=np.int64),
                             drift=np.zeros(m))


def bucket_index(r_prev_e: float, r_cur_e: float, r_hat_e: float, m: int):
    """Least ``eta >= 0`` with ``2^-eta <= (r_cur - r_prev) / r_hat``.

    Returns None when the relative change is below ``2^-eta_max``.
    """
    rel = (r_cur_e - r_prev_e) / r_hat_e
    top = eta_max(m)
    if rel <= 0 or rel < 2.0**-top:
        return None
    if rel >= 1:
        return 0
    return min(top, int(math.ceil(-math.log2(rel) - 1e-12)))


def _buckets(rel, top):
    """Vectorised ``bucket_index``; -1 marks changes below every bucket."""
    eta = np.full(rel.shape, -1, dtype=np.int64)
    pos = rel >= 2.0**-top
    with np.errstate(divide="ignore"):
        e = np.ceil(-np.log2(rel[pos]) - 1e-12)
    eta[pos] = np.clip(e, 0, top).astype(np.int64)
    return eta


def low_rank_update(A, Z_hat, r_hat, r_tilde):
    """Woodbury correction of ``Z_hat`` for resistances changed on a subset.

    ``Z_new = Z - Z A_S^T ((D~_S^-1 - D^_S^-1)^-1 + A_S Z A_S^T)^-1 A_S Z``.
    Falls back to a fresh inverse when the inner system is singular.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    r_hat = np.asarray(r_hat, dtype=float)
    r_tilde = np.asarray(r_tilde, dtype=float)
    S = np.flatnonzero(r_hat != r_tilde)
    if S.size == 0:
        return Z_hat
    AS = A[S]
    C = 1.0 / r_tilde[S] - 1.0 / r_hat[S]
    ZA = Z_hat @ AS.T
    inner = np.diag(1.0 / C) + AS @ ZA
    try:
        lu = sla.lu_factor(inner, check_finite=True)
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * np.max(np.abs(np.diag(lu[0]))):
            raise np.linalg.LinAlgError("singular inner system")
        Z_new = Z_hat - ZA @ sla.lu_solve(lu, ZA.T)
    except (np.linalg.LinAlgError, ValueError):
        log.info("woodbury inner system singular, re-inverting")
        return _inv_spd(_gram(A, r_tilde))
    return 0.5 * (Z_new + Z_new.T)


def update_inverse(mi: MaintainedInverse, r_prev, r_cur, A, fresh_fraction: float = 0.25,
                   check=None) -> MaintainedInverse:
    """Account for the step ``r_prev -> r_cur`` and refresh stale entries.

    Parameters
    ----------
    mi : MaintainedInverse
        Updated in place and returned.
    r_prev, r_cur : ndarray
        Resistances before and after the step, ``r_cur >= r_prev``.
    A : ndarray
        ``m x k`` matrix.
    fresh_fraction : float
        Re-invert from scratch when more than this fraction of entries change.
    check : callable, optional
        ``check(name, ok, detail)`` hook for invariant audits.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    r_prev = np.asarray(r_prev, dtype=float)
    r_cur = np.asarray(r_cur, dtype=float)
    m = A.shape[0]
    top = mi.counters.shape[0] - 1
    if np.any(r_cur < r_prev * (1 - 1e-15)):
        raise ValueError("resistances must not decrease")
    mi.i += 1
    rel = np.maximum(r_cur - r_prev, 0.0) / mi.r_hat
    eta = _buckets(rel, top)
    hit = eta >= 0
    mi.counters[eta[hit], np.flatnonzero(hit)] += 1
    # increments below the last bucket accumulate until they fill it
    small = ~hit & (rel > 0)
    mi.drift[small] += rel[small]
    spill = mi.drift >= 2.0**-top
    mi.counters[top, spill] += 1
    mi.drift[spill] = 0.0

    changed = np.zeros(m, dtype=bool)
    k_eta = np.zeros(top + 1, dtype=np.int64)
    for e in range(top + 1):
        if mi.i % (1 << e) == 0:
            fire = mi.counters[e] >= (1 << e)
            k_eta[e] = np.count_nonzero(fire & ~changed)
            changed |= fire
    forced = (r_cur > sandwich_factor(m) * mi.r_hat) & ~changed
    if forced.any():
        mi.n_forced += int(forced.sum())
        changed |= forced

    r_tilde = mi.r_hat.copy()
    r_tilde[changed] = r_cur[changed]
    mi.counters[:, changed] = 0
    mi.drift[changed] = 0.0
    n_changed = int(changed.sum())
    if n_changed > fresh_fraction * m:
        mi.Z_hat = _inv_spd(_gram(A, r_tilde))
        mi.n_fresh += 1
        how = "fresh"
    elif n_changed:
        mi.Z_hat = low_rank_update(A, mi.Z_hat, mi.r_hat, r_tilde)
        how = "woodbury"
        if check is not None:
            Zf = _inv_spd(_gram(A, r_tilde))
            err = np.max(np.abs(mi.Z_hat - Zf)) / np.max(np.abs(Zf))
            check("woodbury_vs_fresh", err <= 1e-8, f"rel max-entry error {err:.3e}")
    else:
        how = "none"
    mi.r_hat = r_tilde
    if check is not None:
        fac = sandwich_factor(m)
        ok = np.all(mi.r_hat <= r_cur * (1 + 1e-12)) and np.all(r_cur <= fac * mi.r_hat * (1 + 1e-12))
        check("sandwich", bool(ok), f"max ratio {np.max(r_cur / mi.r_hat):.3f} vs {fac:.3f}")
    mi.telemetry.append({"i": mi.i, "n_changed": n_changed, "k_eta": k_eta.tolist(),
                         "n_forced": int(forced.sum()), "update": how, "pc_iterations": None})
    return mi


def pcg(matvec, rhs, precond, tol: float = 1e-10, maxiter: int = 1000, norm_est: float = 0.0,
        stall: int = 25):
    """Preconditioned conjugate gradients on a symmetric positive definite system.

    Stops when ``||rhs - M x|| <= tol ||rhs||`` or, if ``norm_est`` (an upper
    bound on ``||M||``) is given, when the normwise backward error
    ``||rhs - M x|| / (norm_est ||x|| + ||rhs||)`` drops below ``tol``.
    Gives up after ``stall`` iterations without halving the best residual,
    or on breakdown.

    Returns ``(x, iterations, converged)``.
    """
    x = np.zeros_like(rhs)
    bn = np.linalg.norm(rhs)
    if bn == 0:
        return x, 0, True
    res = rhs.copy()
    z = precond(res)
    d = z.copy()
    rz = res @ z
    best, since = bn, 0
    x_best = x.copy()
    for it in range(1, maxiter + 1):
        Md = matvec(d)
        dMd = d @ Md
        if not (np.isfinite(dMd) and dMd > 0 and np.isfinite(rz)):
            return x_best, it, False
        a = rz / dMd
        x += a * d
        res -= a * Md
        rn = np.linalg.norm(res)
        if rn <= tol * max(bn, norm_est * np.linalg.norm(x) + bn if norm_est else bn):
            true = np.linalg.norm(rhs - matvec(x))
            scale = norm_est * np.linalg.norm(x) + bn if norm_est else bn
            if true <= tol * max(bn, scale):
                return x, it, True
            res = rhs - matvec(x)
            rn = true
        if rn < 0.5 * best:
            best, since = rn, 0
            x_best = x.copy()
        else:
            since += 1
            if since >= stall:
                return (x if rn <= best else x_best), it, False
        z = precond(res)
        rz_new = res @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, maxiter, False


def pc_budget(m: int, tol: float = 1e-10, c_pc: float = 2.0) -> int:
    """Iteration budget ``c_pc sqrt(5 log m) log(1/tol)``."""
    return int(math.ceil(c_pc * math.sqrt(sandwich_factor(m)) * math.log(1.0 / tol)))


def preconditioned_solve(A, r_cur, mi: MaintainedInverse, rhs, tol: float = 1e-10):
    """Solve ``(A^T diag(r_cur)^-1 A) x = rhs`` preconditioned by ``mi.Z_hat``.

    Returns ``(x, iterations, converged)``.  If conjugate gradients stall or
    exceed ten times the iteration budget the system is factored directly.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    r_cur = np.asarray(r_cur, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    Ri = 1.0 / r_cur
    budget = pc_budget(A.shape[0], tol)
    norm_est = float(np.sum(Ri * np.sum(A * A, axis=1)))
    x, it, ok = pcg(lambda v: A.T @ (Ri * (A @ v)), rhs, lambda v: mi.Z_hat @ v,
                    tol=tol, maxiter=10 * budget, norm_est=norm_est)
    if not ok:
        log.info("preconditioned solve stalled after %d iterations, factoring", it)
        x = sla.solve(_gram(A, r_cur), rhs, assume_a="pos")
    return x, it, ok


class MaintainedKernel:
    """Least-norm kernel reusing a lazily maintained inverse between calls.

    ``begin`` starts a new constraint stack; each ``solve`` first folds the
    resistance change since the previous call into the maintained inverse.
    If the preconditioned solution misses the feasibility tolerance the
    direct solver is used for that call and the event is counted.
    """

    def __init__(self, check=None, tol: float = 1e-10):
        self.check = check
        self.tol = tol
        self.n_solves = 0
        self.n_fallback = 0
        self.n_stalled = 0
        self.telemetry = []
        self.mi = None

    def begin(self, stack: ConstraintStack) -> None:
        self.stack = stack
        self.At = stack.A_hat.T.copy()
        self.mi = None
        self.r_prev = None

    def solve(self, r):
        self.n_solves += 1
        r = np.asarray(r, dtype=float)
        d = self.stack.d
        dn = np.linalg.norm(d)
        if dn == 0:
            return np.zeros(self.stack.m), 0.0
        if self.mi is None:
            try:
                self.mi = inverse_init(self.At, r)
            except np.linalg.LinAlgError:
                self.n_fallback += 1
                return solve_weighted_l2(self.stack, r)
        else:
            update_inverse(self.mi, self.r_prev, r, self.At, check=self.check)
        self.r_prev = r.copy()
        y, it, ok = preconditioned_solve(self.At, r, self.mi, d / dn, tol=self.tol)
        if not ok:
            self.n_stalled += 1
        if self.mi.telemetry:
            self.mi.telemetry[-1]["pc_iterations"] = it
        delta = (self.At @ y) / r
        if np.linalg.norm(self.stack.A_hat @ delta - d / dn) > FEAS_RTOL:
            self.n_fallback += 1
            return solve_weighted_l2(self.stack, r)
        return delta * dn, float(dn * (d @ y))

    def end(self) -> None:
        if self.mi is not None:
            self.telemetry.extend(self.mi.telemetry)


def write_telemetry_csv(rows, path) -> None:
    """Write update telemetry: i, |E_changed|, k(eta) per bucket, pc iterations."""
    width = max((len(r["k_eta"]) for r in rows), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "n_changed"] + [f"k_eta_{e}" for e in range(width)] + ["pc_iterations"])
        for r in rows:
            k = list(r["k_eta"]) + [0] * (width - len(r["k_eta"]))
            w.writerow([r["i"], r["n_changed"]] + k + [r["pc_iterations"]])
