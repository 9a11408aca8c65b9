"""Coordinate-descent kernels for L1-penalized linear and logistic regression.

Both solve the glmnet-scaled problems on standardized columns::

    (1/2n) ||y - b0 - X beta||^2 + lam ||beta||_1
    -(1/n) loglik(b0 + X beta)   + lam ||beta||_1

Lambdas are visited in the order given; callers pass them descending so each
solution warm-starts the next.
"""

import numpy as np
from numba import njit

_TOL = 1e-9
_MAX_SWEEPS = 100_000


@njit(cache=True, nogil=True)
def _soft(z, g):
    if z > g:
        return z - g
    if z < -g:
        return z + g
    return 0.0


@njit(cache=True, nogil=True)
def lasso_path(x, y, lambdas):
    """Coefficient paths for standardized ``x`` and centered ``y``."""
    n, p = x.shape
    colsq = np.zeros(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += x[i, j] * x[i, j]
        colsq[j] = s / n
    beta = np.zeros(p)
    resid = y.copy()
    out = np.zeros((lambdas.shape[0], p))
    for li in range(lambdas.shape[0]):
        lam = lambdas[li]
        for _ in range(_MAX_SWEEPS):
            delta = 0.0
            for j in range(p):
                if colsq[j] <= 0.0:
                    continue
                rho = 0.0
                for i in range(n):
                    rho += x[i, j] * resid[i]
                rho = rho / n + colsq[j] * beta[j]
                new = _soft(rho, lam) / colsq[j]
                d = new - beta[j]
                if d != 0.0:
                    for i in range(n):
                        resid[i] -= d * x[i, j]
                    beta[j] = new
                    ad = abs(d) * np.sqrt(colsq[j])
                    if ad > delta:
                        delta = ad
            if delta < _TOL:
                break
        out[li] = beta
    return out


@njit(cache=True, nogil=True)
def logistic_path(x, y, lambdas):
    """Intercepts and coefficient paths for standardized ``x`` and 0/1 ``y``.

    Proximal Newton: an outer IRLS quadratic approximation, inner coordinate
    descent with an unpenalized intercept.
    """
    n, p = x.shape
    ybar = 0.0
    for i in range(n):
        ybar += y[i]
    ybar /= n
    ybar = min(max(ybar, 1e-6), 1.0 - 1e-6)
    b0 = np.log(ybar / (1.0 - ybar))
    beta = np.zeros(p)
    eta = np.empty(n)
    w = np.empty(n)
    r = np.empty(n)
    out_b0 = np.zeros(lambdas.shape[0])
    out = np.zeros((lambdas.shape[0], p))
    for li in range(lambdas.shape[0]):
        lam = lambdas[li]
        for _outer in range(200):
            b0_old = b0
            beta_old = beta.copy()
            for i in range(n):
                e = b0
                for j in range(p):
                    e += x[i, j] * beta[j]
                eta[i] = e
                pr = 1.0 / (1.0 + np.exp(-e))
                pr = min(max(pr, 1e-5), 1.0 - 1e-5)
                w[i] = pr * (1.0 - pr)
                # working residual z - eta
                r[i] = (y[i] - pr) / w[i]
            sw = 0.0
            for i in range(n):
                sw += w[i]
            wx2 = np.zeros(p)
            for j in range(p):
                s = 0.0
                for i in range(n):
                    s += w[i] * x[i, j] * x[i, j]
                wx2[j] = s / n
            for _inner in range(_MAX_SWEEPS):
                delta = 0.0
                s = 0.0
                for i in range(n):
                    s += w[i] * r[i]
                d0 = s / sw
                if d0 != 0.0:
                    b0 += d0
                    for i in range(n):
                        r[i] -= d0
                    delta = abs(d0)
                for j in range(p):
                    if wx2[j] <= 1e-14:
                        continue
                    rho = 0.0
                    for i in range(n):
                        rho += w[i] * x[i, j] * r[i]
                    rho = rho / n + wx2[j] * beta[j]
                    new = _soft(rho, lam) / wx2[j]
                    d = new - beta[j]
                    if d != 0.0:
                        for i in range(n):
                            r[i] -= d * x[i, j]
                        beta[j] = new
                        ad = abs(d) * np.sqrt(wx2[j])
                        if ad > delta:
                            delta = ad
                if delta < _TOL:
                    break
            change = abs(b0 - b0_old)
            for j in range(p):
                c = abs(beta[j] - beta_old[j])
                if c > change:
                    change = c
            if change < 1e-8:
                break
        out_b0[li] = b0
        out[li] = beta
    return out_b0, out
