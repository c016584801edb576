"""Weighted least-norm solves ``min sum r_e D_e^2  s.t.  A_hat D = d``.

The minimizer is ``D = R^-1 A_hat^T y`` with ``(A_hat R^-1 A_hat^T) y = d``.
The Gram matrix is factored through a column-pivoted QR of
``R^-1/2 A_hat^T``: the triangular factor is a pivoted Cholesky factor of
the Gram matrix, obtained without squaring its condition number.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)

PIVOT_RTOL = 1e-12
FEAS_RTOL = 1e-9


class InfeasibleError(RuntimeError):
    """Constraint residual above tolerance after a solve."""


@dataclass(frozen=True)
class ConstraintStack:
    """Constraint matrix ``A_hat`` (k x m) and right-hand side ``d``."""

    A_hat: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A_hat, dtype=float))
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if A.shape[0] != d.shape[0]:
            raise ValueError("row count of A_hat and length of d differ")
        object.__setattr__(self, "A_hat", A)
        object.__setattr__(self, "d", d)

    @property
    def m(self) -> int:
        return self.A_hat.shape[1]


def _check_resistances(r, m):
    r = np.asarray(r, dtype=float)
    if r.shape != (m,):
        raise ValueError(f"resistances must have length {m}")
    if not np.all(r > 0) or not np.all(np.isfinite(r)):
        raise ValueError("resistances must be positive and finite")
    return r


def solve_weighted_l2(stack: ConstraintStack, r, return_multiplier: bool = False):
    """Minimum-energy solution of ``A_hat D = d`` under resistances ``r``.

    Parameters
    ----------
    stack : ConstraintStack
    r : array_like
        Positive resistances, one per column of ``A_hat``.
    return_multiplier : bool
        Also return ``y`` with ``R D = A_hat^T y``.

    Returns
    -------
    delta : ndarray
    energy : float
        ``sum r_e delta_e^2 = d.y``.

    Raises
    ------
    InfeasibleError
        If ``||A_hat D - d|| > 1e-9 ||d||``.  Rank-deficient stacks
        are solved in the pseudo-inverse sense, so an inconsistent ``d``
        surfaces here.
    """
    A, d = stack.A_hat, stack.d
    r = _check_resistances(r, A.shape[1])
    dn = np.linalg.norm(d)
    if dn == 0:
        out = (np.zeros(A.shape[1]), 0.0)
        return out + (np.zeros(A.shape[0]),) if return_multiplier else out
    s = 1.0 / np.sqrt(r)
    B = A.T * s[:, None]
    Q, Rb, piv = sla.qr(B, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rb))
    if diag.size == 0 or diag[0] == 0:
        raise InfeasibleError("constraint matrix is zero")
    rank = int(np.sum(diag**2 > PIVOT_RTOL * diag[0] ** 2))
    du = d / dn
    z = sla.solve_triangular(Rb[:rank, :rank], du[piv[:rank]], trans="T")
    delta = s * (Q[:, :rank] @ z)
    resid = np.linalg.norm(A @ delta - du)
    if resid > FEAS_RTOL:
        raise InfeasibleError(f"constraint residual {resid * dn:.3e} after solve")
    delta *= dn
    energy = float(dn * dn * (z @ z))
    if not return_multiplier:
        return delta, energy
    y = np.zeros(A.shape[0])
    y[piv[:rank]] = sla.solve_triangular(Rb[:rank, :rank], z) * dn
    return delta, energy, y


def energy(stack: ConstraintStack, r) -> float:
    """Electrical energy ``min {sum r D^2 : A_hat D = d}``."""
    return solve_weighted_l2(stack, r)[1]


def energy_growth_lower_bound(delta, r, r_new, psi: float) -> float:
    """Lower bound on the energy after raising resistances from ``r`` to ``r_new``.

    ``exp(sum_e min(1, (r'_e - r_e)/r_e) r_e delta_e^2 / (2 psi)) * psi``
    where ``delta`` is the minimizer at ``r`` and ``psi`` its energy.
    """
    delta = np.asarray(delta, dtype=float)
    r = np.asarray(r, dtype=float)
    r_new = np.asarray(r_new, dtype=float)
    if psi <= 0:
        return float(psi)
    rel = np.minimum(1.0, (r_new - r) / r)
    return float(np.exp(np.sum(rel * r * delta**2) / (2.0 * psi)) * psi)




def enhanced_solve(B, R, g, z: float, solve_M=None, rtol: float = 1e-12):
    """Minimize ``f^T R f / 2`` subject to ``B^T f = 0`` and ``g^T f = z``.

    Uses one solve with ``M = B^T R^-1 B`` and a rank-one correction for the
    extra row.  ``solve_M`` may supply that solve (for example a sparse
    Laplacian factorization); otherwise ``M`` is formed and factored densely.

    Returns
    -------
    f : ndarray
    degenerate : bool
        True when ``g`` is numerically in the range of ``B`` relative to the
        ``R^-1`` inner product and the stacked solve was used instead.
    """
    if not sp.issparse(B):
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
    R = np.asarray(R, dtype=float)
    g = np.asarray(g, dtype=float)
    if z == 0:
        return np.zeros(B.shape[0]), False
    Ri = 1.0 / R
    if solve_M is None:
        M = B.T @ (Ri[:, None] * B) if not sp.issparse(B) else (B.T @ sp.diags(Ri) @ B).toarray()
        cf = sla.cho_factor(M)
        solve_M = lambda v: sla.cho_solve(cf, v)  # noqa: E731
    gt = B.T @ (Ri * g)
    Mg = solve_M(gt)
    ggr = float(g @ (Ri * g))
    denom = ggr - float(gt @ Mg)
    if not denom > rtol * ggr:
        log.warning("degenerate gradient in enhanced_solve, using stacked solve")
        Bd = B.toarray() if sp.issparse(B) else B
        stack = ConstraintStack(np.vstack([Bd.T, g]), np.r_[np.zeros(B.shape[1]), z])
        return solve_weighted_l2(stack, R)[0], True
    v = -z * Mg / denom
    a = (z - gt @ v) / ggr
    return Ri * (B @ v + a * g), False


def stacked_kkt_solve(stack: ConstraintStack, r):
    """Dense KKT solve ``[[R, A^T], [A, 0]] [D; -y] = [0; d]``.

    A second route to the weighted least-norm problem, used for
    cross-checks.  Requires ``A_hat`` of full row rank.
    """
    A, d = stack.A_hat, stack.d
    k, m = A.shape
    K = np.zeros((m + k, m + k))
    K[:m, :m] = np.diag(np.asarray(r, dtype=float))
    K[:m, m:] = A.T
    K[m:, :m] = A
    sol = np.linalg.solve(K, np.r_[np.zeros(m), d])
    return sol[:m], -sol[m:]


class DirectKernel:
    """Least-norm kernel that factors afresh on every call."""

    def __init__(self):
        self.n_solves = 0

    def begin(self, stack: ConstraintStack) -> None:
        self.stack = stack

    def solve(self, r):
        self.n_solves += 1
        return solve_weighted_l2(self.stack, r)

    def end(self) -> None:
        pass
