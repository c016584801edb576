"""Quadratically smoothed p-th powers and the local bounds built on them.

For a threshold ``t >= 0`` the smoothed power is

    gamma_p(t, x) = (p/2) t^(p-2) x^2             if |x| <= t
                    |x|^p + (p/2 - 1) t^p         otherwise

It is C^1 in ``x``, homogeneous of degree ``p`` in ``(t, x)`` and sits
between a quadratic and a p-th power.  Vector arguments are treated
coordinate-wise; ``gamma_sum`` gives the summed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SingularDerivativeError(ArithmeticError):
    """Raised when the derivative is requested at t = 0, x = 0 with p < 2."""


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def safe_pow(u, c):
    """Compute ``u**c`` for ``u >= 0`` as ``exp(c log u)``.

    ``0**c`` is 0 for ``c > 0`` and 1 for ``c == 0``; results below the
    smallest normal double are flushed to zero.
    """
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape)
    pos = u > 0
    with np.errstate(over="ignore"):
        out[pos] = np.exp(c * np.log(u[pos]))
    if c == 0:
        out[~pos] = 1.0
    elif c < 0:
        out[~pos] = np.inf
    out[np.abs(out) < np.finfo(float).tiny] = 0.0
    return out


@dataclass(frozen=True)
class GammaParams:
    """Exponent ``p`` with the constants derived from it.

    Attributes
    ----------
    p : float
        Norm exponent, ``1 < p < inf``.
    q : float
        Dual exponent ``p / (p - 1)``.
    step_scale : float
        Damping applied to residual steps, ``((p-1)/(p 4^p))^(1/min(1, p-1))``.
    res_coeff : float
        Weight of the smoothed term in the residual objective, ``(p-1)/(p 2^p)``.
    upper_coeff : float
        Weight of the smoothed term in the local upper bound, ``2^p``.
    """

    p: float
    q: float
    step_scale: float
    res_coeff: float
    upper_coeff: float

    @classmethod
    def from_p(cls, p: float) -> "GammaParams":
        p = float(p)
        if not np.isfinite(p) or p <= 1:
            raise ValueError(f"exponent must be finite and > 1, got {p}")
        q = p / (p - 1.0)
        step = ((p - 1.0) / (p * 4.0**p)) ** (1.0 / min(1.0, p - 1.0))
        if not step > 0:
            raise ValueError(f"p = {p} too close to 1: step scale underflows")
        return cls(p=p, q=q, step_scale=step,
                   res_coeff=(p - 1.0) / (p * 2.0**p), upper_coeff=2.0**p)


def gamma(p: float, t, x):
    """Smoothed p-th power, coordinate-wise.

    Parameters
    ----------
    p : float
        Exponent, ``p >= 1``.
    t : array_like
        Nonnegative thresholds, broadcast against ``x``.
    x : array_like
        Points of evaluation.

    Returns
    -------
    float or ndarray
        Same shape as the broadcast of ``t`` and ``x``.  At ``t = 0`` the
        value is ``|x|^p`` for every ``p``.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_finite(t, x)
    if np.any(t < 0):
        raise ValueError("thresholds must be nonnegative")
    t, ax = np.broadcast_arrays(t, np.abs(x))
    inner = (ax <= t) & (t > 0)
    out = np.empty(ax.shape)
    # (p/2) (|x| t^((p-2)/2))^2 only underflows when the value itself does
    out[inner] = 0.5 * p * (ax[inner] * safe_pow(t[inner], 0.5 * (p - 2))) ** 2
    outer = ~inner
    out[outer] = safe_pow(ax[outer], p) + (0.5 * p - 1.0) * safe_pow(t[outer], p)
    return out if out.ndim else float(out)


def gamma_sum(p: float, t, x) -> float:
    """Sum of ``gamma`` over coordinates."""
    return float(np.sum(gamma(p, t, x)))


def gamma_prime(p: float, t, x):
    """Derivative of ``gamma`` in ``x``: ``p max(t, |x|)^(p-2) x``.

    Raises
    ------
    SingularDerivativeError
        If some coordinate has ``t = 0``, ``x = 0`` and ``p < 2``.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_finite(t, x)
    t, x = np.broadcast_arrays(t, x)
    base = np.maximum(t, np.abs(x))
    if p < 2 and np.any(base == 0):
        raise SingularDerivativeError("derivative unbounded at t = 0, x = 0 for p < 2")
    out = p * safe_pow(base, p - 2) * x
    return out if out.ndim else float(out)


def residual_value(params: GammaParams, g, xabs, delta) -> float:
    """Residual objective ``g.delta - res_coeff * gamma_p(|x|, delta)``.

    Parameters
    ----------
    params : GammaParams
    g : array_like
        Gradient ``p |x|^(p-2) x`` at the current iterate.
    xabs : array_like
        ``|x|`` used as thresholds.
    delta : array_like
        Candidate step.
    """
    g = np.asarray(g, dtype=float)
    xabs = np.asarray(xabs, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if not (g.shape == xabs.shape == delta.shape):
        raise ValueError("length mismatch")
    return float(g @ delta - params.res_coeff * gamma_sum(params.p, xabs, delta))


def power_gradient(p: float, x):
    """Gradient of ``sum |x|^p``: ``p |x|^(p-2) x``."""
    x = np.asarray(x, dtype=float)
    return p * np.sign(x) * safe_pow(np.abs(x), p - 1)


def local_approx_bounds(params: GammaParams, x, delta):
    """Lower and upper bounds on ``|x + delta|^p`` around ``x``.

    Returns ``(|x|^p + g delta + res_coeff gamma, |x|^p + g delta + 2^p gamma)``
    with ``g = p |x|^(p-2) x`` and ``gamma = gamma_p(|x|, delta)``,
    coordinate-wise.
    """
    p = params.p
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    base = safe_pow(np.abs(x), p) + power_gradient(p, x) * delta
    gm = gamma(p, np.abs(x), delta)
    lower = base + params.res_coeff * gm
    upper = base + params.upper_coeff * gm
    if np.ndim(lower) == 0:
        return float(lower), float(upper)
    return lower, upper


def rescale_bound_check(p: float, t, x, lam: float, rtol: float = 1e-12) -> bool:
    """Check ``min(l^2, l^p) g(t,x) <= g(t, l x) <= max(l^2, l^p) g(t,x)``."""
    if lam < 0:
        raise ValueError("scale must be nonnegative")
    base = np.asarray(gamma(p, t, x))
    scaled = np.asarray(gamma(p, t, lam * np.asarray(x, dtype=float)))
    lo = min(lam**2, lam**p) * base
    hi = max(lam**2, lam**p) * base
    slack = rtol * np.maximum(np.abs(base) * max(1.0, lam**2, lam**p), np.finfo(float).tiny)
    return bool(np.all(lo - slack <= scaled) and np.all(scaled <= hi + slack))


def first_order_additive_bound(p: float, t, x, delta):
    """Upper bound on ``gamma_p(t, x + delta)`` for ``p >= 2``.

    ``gamma_p(t,x) + |gamma'_p(t,x) delta| + p^2 2^(p-3) max(t,|x|,|delta|)^(p-2) delta^2``
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    big = np.maximum(np.maximum(t, np.abs(x)), np.abs(delta))
    return (gamma(p, t, x) + np.abs(gamma_prime(p, t, x) * delta)
            + p * p * 2.0 ** (p - 3) * safe_pow(big, p - 2) * delta**2)


def log_derivative_ratio(p: float, t, x):
    """``x gamma'_p(t,x) / gamma_p(t,x)``; lies in ``[min(2,p), max(2,p)]``."""
    return np.asarray(x) * gamma_prime(p, t, x) / gamma(p, t, x)
