"""Independent brute-force references used by the tests.

Nothing here calls into the package's numerical code.
"""

import math

import numpy as np


def reml_loglik_matrix(tau2, y, vi):
    """Restricted log-likelihood from the textbook matrix form."""
    K = len(y)
    V = np.diag(np.asarray(vi) + tau2)
    Vinv = np.linalg.inv(V)
    X = np.ones((K, 1))
    XtVX = X.T @ Vinv @ X
    P = Vinv - Vinv @ X @ np.linalg.inv(XtVX) @ X.T @ Vinv
    y = np.asarray(y)
    _, logdetV = np.linalg.slogdet(V)
    _, logdetX = np.linalg.slogdet(XtVX)
    return -0.5 * ((K - 1) * math.log(2 * math.pi) + logdetV + logdetX + y @ P @ y)


def reml_grid_argmax(y, vi, upper=1.0, n=1_000_001, chunk=50_000):
    """Argmax of the restricted likelihood over an evenly spaced tau2 grid."""
    y = np.asarray(y, float)
    vi = np.asarray(vi, float)
    best_val, best_t = -np.inf, None
    for s in range(0, n, chunk):
        t = np.arange(s, min(s + chunk, n)) * (upper / (n - 1))
        v = vi[None, :] + t[:, None]
        prec = 1 / v
        sw = prec.sum(1)
        m = (prec * y).sum(1) / sw
        ll = -0.5 * (np.log(v).sum(1) + np.log(sw) + (((y - m[:, None]) ** 2) * prec).sum(1))
        i = int(np.argmax(ll))
        if ll[i] > best_val:
            best_val, best_t = ll[i], t[i]
    return best_t


def q_gen(tau, y, vi):
    w = [1 / (v + tau * tau) for v in vi]
    m = sum(wi * yi for wi, yi in zip(w, y)) / sum(w)
    return sum(wi * (yi - m) ** 2 for wi, yi in zip(w, y))


def bisect_decreasing(f, target, lo, hi, tol=1e-12):
    """Root of decreasing f(x) = target on [lo, hi] by plain bisection."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def log_marginal_quadrature(y, v, prior_mean, prior_sd, lo=-10.0, hi=10.0, n=100_001):
    """log of integral over mu of prod N(y_k; mu, v_k) * N(mu; m, s), by trapezoid."""
    mu = np.linspace(lo, hi, n)
    y = np.asarray(y, float)
    v = np.asarray(v, float)
    logf = -0.5 * ((y[None, :] - mu[:, None]) ** 2 / v).sum(1) - 0.5 * np.log(2 * np.pi * v).sum()
    logf += -0.5 * ((mu - prior_mean) / prior_sd) ** 2 - 0.5 * np.log(2 * np.pi * prior_sd**2)
    m = logf.max()
    return m + np.log(np.trapezoid(np.exp(logf - m), mu))


def tau_posterior_reference(y, se, mu_sd, tau_sd, upper, n=1_000_001, chunk=20_000):
    """Dense-grid posterior of tau; mu integrated out by completing the square."""
    y = np.asarray(y, float)
    vi = np.asarray(se, float) ** 2
    taus = np.linspace(0, upper, n)
    logp = np.empty(n)
    for s in range(0, n, chunk):
        t = taus[s : s + chunk]
        v = vi[None, :] + t[:, None] ** 2
        # joint density of y after integrating mu ~ N(0, mu_sd^2) analytically:
        # posterior precision, then log Z = log N(y; 0, V) via the Gaussian identity
        prec = 1 / mu_sd**2 + (1 / v).sum(1)
        b = (y / v).sum(1)
        logz = (
            -0.5 * np.log(2 * np.pi * v).sum(1)
            - 0.5 * (y**2 / v).sum(1)
            + 0.5 * b**2 / prec
            - 0.5 * np.log(prec * mu_sd**2)
        )
        logp[s : s + chunk] = logz - 0.5 * (t / tau_sd) ** 2
    p = np.exp(logp - logp.max())
    cdf = np.concatenate(([0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(taus))))
    cdf /= cdf[-1]
    return lambda q: float(np.interp(q, cdf, taus))
