"""Independent oracles shared across the test suite.

These deliberately avoid the code paths they check: finite differences for
analytic Jacobians and gradients, quadrature plus bisection for the Gaussian
quantile, factorization-parameterized descent for the PSD projection, and
closed-form recursions for Monte-Carlo moments.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate, optimize


def fd_jacobian(f, x, u, eps=1e-5):
    """Central-difference Jacobians (df/dx, df/du) of a discrete-time map."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.size, u.size
    fx = np.empty((n, n))
    fu = np.empty((n, m))
    for i in range(n):
        d = np.zeros(n)
        d[i] = eps
        fx[:, i] = (f(x + d, u) - f(x - d, u)) / (2 * eps)
    for j in range(m):
        d = np.zeros(m)
        d[j] = eps
        fu[:, j] = (f(x, u + d) - f(x, u - d)) / (2 * eps)
    return fx, fu


def fd_gradient(f, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty(x.size)
    for i in range(x.size):
        d = np.zeros(x.size)
        d[i] = eps
        g[i] = (f(x + d) - f(x - d)) / (2 * eps)
    return g


def fd_hessian(f, x, eps=1e-4):
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i + 1):
            di = np.zeros(n); di[i] = eps
            dj = np.zeros(n); dj[j] = eps
            H[i, j] = H[j, i] = (
                f(x + di + dj) - f(x + di - dj) - f(x - di + dj) + f(x - di - dj)
            ) / (4 * eps * eps)
    return H


def normal_cdf_quadrature(x: float) -> float:
    """Standard normal CDF by adaptive quadrature of the density (erf-free)."""
    pdf = lambda t: np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)
    val, _ = integrate.quad(pdf, -40.0, x, limit=200)
    return val


def quantile_bisection(p: float, tol: float = 1e-11) -> float:
    """Invert the quadrature CDF by bisection."""
    lo, hi = -15.0, 15.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if normal_cdf_quadrature(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def nearest_psd_descent(M: np.ndarray) -> np.ndarray:
    """Frobenius-nearest PSD matrix via descent on a factor parameterization.

    Writing X = L L' keeps the iterate feasible without any eigenvalue
    projection, so this is independent of eigendecomposition-based code.
    """
    M = 0.5 * (M + M.T)
    k = M.shape[0]

    def objective(vecL):
        L = vecL.reshape(k, k)
        X = L @ L.T
        diff = X - M
        return float(np.sum(diff * diff)), (4 * diff @ L).ravel()

    best = None
    for scale in (1.0, 0.1):
        L0 = scale * np.eye(k).ravel()
        res = optimize.minimize(objective, L0, jac=True, method="L-BFGS-B",
                                options={"maxiter": 3000, "ftol": 1e-18, "gtol": 1e-12})
        if best is None or res.fun < best.fun:
            best = res
    L = best.x.reshape(k, k)
    return L @ L.T


def linear_gaussian_moments(A, B, D, law_v, law_K, law_ref, mu0, Sigma0, steps, d=None):
    """Exact mean/covariance recursion of a linear-Gaussian closed loop.

    The control is u_t = v_t + K_t (x - ref_t); stepping follows
    x+ = A x + B u + d + D w with standard-normal w.
    """
    n = len(mu0)
    mu, Sigma = np.array(mu0, dtype=float), np.array(Sigma0, dtype=float)
    d = np.zeros(n) if d is None else d
    means, covs = [mu.copy()], [Sigma.copy()]
    for t in range(steps):
        K, v, ref = law_K[t], law_v[t], law_ref[t]
        M = A + B @ K
        mu = A @ mu + B @ (v + K @ (mu - ref)) + d
        Sigma = M @ Sigma @ M.T + D @ D.T
        means.append(mu.copy())
        covs.append(0.5 * (Sigma + Sigma.T))
    return np.array(means), np.array(covs)
