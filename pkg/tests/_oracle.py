"""Independent reference solvers used only by the tests.

Damped Newton in a null-space parametrization (SVD basis), with
backtracking.  Shares no code with the package beyond numpy/scipy.
"""
import numpy as np
import scipy.linalg as sla


def _newton(x0, V, f, grad, hess_diag, tol=1e-13, maxit=500):
    y = np.zeros(V.shape[1])
    x = x0.copy()
    fx = f(x)
    for _ in range(maxit):
        gy = V.T @ grad(x)
        H = (V.T * hess_diag(x)) @ V
        H += 1e-300 * np.eye(H.shape[0])
        try:
            dy = np.linalg.solve(H, gy)
        except np.linalg.LinAlgError:
            dy = np.linalg.lstsq(H, gy, rcond=None)[0]
        s = 1.0
        while True:
            xn = x0 + V @ (y - s * dy)
            fn = f(xn)
            if fn <= fx - 1e-4 * s * (gy @ dy) or s < 1e-14:
                break
            s /= 2
        y = y - s * dy
        x, fprev, fx = xn, fx, fn
        if abs(fprev - fx) <= tol * max(abs(fx), 1e-300) and np.linalg.norm(gy) <= 1e-8 * max(1, np.linalg.norm(grad(x))):
            break
    return x


def _basis(A, b):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x0 = np.linalg.lstsq(A, b, rcond=None)[0]
    V = sla.null_space(A)
    return x0, V


def pnorm_oracle(A, b, p):
    """``argmin ||x||_p^p  s.t.  A x = b``."""
    x0, V = _basis(A, b)
    if V.shape[1] == 0:
        return x0
    f = lambda x: np.sum(np.abs(x) ** p)  # noqa: E731
    grad = lambda x: p * np.abs(x) ** (p - 1) * np.sign(x)  # noqa: E731
    # guard the p < 2 Hessian at zeros with a tiny floor
    hess = lambda x: p * (p - 1) * np.maximum(np.abs(x), 1e-12) ** (p - 2)  # noqa: E731
    return _newton(x0, V, f, grad, hess)


def gamma_ref(p, t, x):
    t = np.broadcast_to(np.asarray(t, dtype=float), np.shape(x))
    ax = np.abs(x)
    inner = ax <= t
    out = np.where(inner, 0.5 * p * np.where(t > 0, t, 1.0) ** (p - 2) * ax**2, ax**p + (0.5 * p - 1) * t**p)
    return out


def gamma_oracle(A_hat, d, t, p):
    """``argmin sum gamma_p(t, D)  s.t.  A_hat D = d``."""
    x0, V = _basis(A_hat, d)
    if V.shape[1] == 0:
        return x0
    t = np.asarray(t, dtype=float)
    f = lambda x: float(np.sum(gamma_ref(p, t, x)))  # noqa: E731
    grad = lambda x: p * np.maximum(t, np.abs(x)) ** (p - 2) * x  # noqa: E731
    hess = lambda x: np.where(np.abs(x) <= t, p * t ** (p - 2), p * (p - 1) * np.abs(x) ** (p - 2))  # noqa: E731
    return _newton(x0, V, f, grad, hess)


def residual_oracle(A, x, p):
    """``max g.D - c gamma_p(|x|, D)`` over the null space of ``A``; returns (D, value)."""
    c = (p - 1) / (p * 2**p)
    g = p * np.abs(x) ** (p - 2) * x
    t = np.abs(x)
    V = sla.null_space(np.atleast_2d(A))
    f = lambda D: -(g @ D - c * float(np.sum(gamma_ref(p, t, D))))  # noqa: E731
    grad = lambda D: -(g - c * p * np.maximum(t, np.abs(D)) ** (p - 2) * D)  # noqa: E731
    hess = lambda D: c * np.where(np.abs(D) <= t, p * t ** (p - 2), p * (p - 1) * np.abs(D) ** (p - 2))  # noqa: E731
    D = _newton(np.zeros(x.size), V, f, grad, hess)
    return D, -f(D)


def affine_oracle(C, d, A, b, p):
    """``min ||C x - d||_p^p  s.t.  A x = b``; returns the optimal value."""
    x0, V = _basis(A, b)
    CV = C @ V
    h = C @ x0 - d
    f = lambda y: np.sum(np.abs(CV @ y + h) ** p)  # noqa: E731
    grad = lambda y: CV.T @ (p * np.abs(CV @ y + h) ** (p - 1) * np.sign(CV @ y + h))  # noqa: E731
    y = np.zeros(V.shape[1])
    for _ in range(500):
        z = CV @ y + h
        gy = grad(y)
        H = (CV.T * (p * (p - 1) * np.maximum(np.abs(z), 1e-12) ** (p - 2))) @ CV
        dy = np.linalg.lstsq(H, gy, rcond=None)[0]
        s, f0 = 1.0, f(y)
        while f(y - s * dy) > f0 - 1e-4 * s * (gy @ dy) and s > 1e-14:
            s /= 2
        y = y - s * dy
        if np.linalg.norm(gy) <= 1e-12 * max(1.0, f0):
            break
    return float(f(y))


def random_instance(rng, n, m):
    A = rng.standard_normal((n, m))
    b = A @ rng.standard_normal(m)
    return A, b


def labels_oracle(Ainc, labelled, s, p):
    """``min ||A u||_p^p`` over ``u`` with ``u = s`` on ``labelled``; returns (u, value)."""
    Ainc = np.asarray(Ainc, dtype=float)
    n = Ainc.shape[1]
    free = np.setdiff1d(np.arange(n), labelled)
    AU, h = Ainc[:, free], Ainc[:, labelled] @ s
    f = lambda v: np.sum(np.abs(AU @ v + h) ** p)  # noqa: E731
    v = np.linalg.lstsq(AU, -h, rcond=None)[0]
    for _ in range(500):
        z = AU @ v + h
        g = AU.T @ (p * np.abs(z) ** (p - 1) * np.sign(z))
        H = (AU.T * (p * (p - 1) * np.maximum(np.abs(z), 1e-12) ** (p - 2))) @ AU
        dv = np.linalg.lstsq(H, g, rcond=None)[0]
        step, f0 = 1.0, f(v)
        while f(v - step * dv) > f0 - 1e-4 * step * (g @ dv) and step > 1e-14:
            step /= 2
        v = v - step * dv
        if np.linalg.norm(g) <= 1e-12 * max(1.0, f0):
            break
    u = np.zeros(n)
    u[free] = v
    u[labelled] = s
    return u, float(f(v))
