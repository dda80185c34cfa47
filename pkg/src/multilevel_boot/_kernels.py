"""Compiled inner loops for the REML fit.

The restricted likelihood is evaluated from per-group sufficient statistics
(Z'Z, Z'X, X'X, Z'y, X'y, y'y) through the Woodbury identity, so one
evaluation costs O(J q^3) regardless of group size. The optimizer (simplex
search followed by a projected BFGS polish with central finite-difference
gradients) lives here as well because it is called hundreds of thousands of
times by the coverage study.

Parameter layout of ``vp``: ``vp[0] = log(sigma_eps)``, then the lower
triangle of the Cholesky factor of Sigma in row-major order with diagonal
entries on the log scale. Log-scale entries are clamped from below at
``floor``.
"""

import numpy as np
from numba import njit

PENALTY = 1.0e30


@njit(cache=True)
def n_params(q):
    return 1 + q * (q + 1) // 2


@njit(cache=True)
def log_mask(q):
    """True for coordinates that live on the log scale (and are floored)."""
    mask = np.zeros(n_params(q), dtype=np.bool_)
    mask[0] = True
    idx = 1
    for i in range(q):
        for j in range(i + 1):
            if i == j:
                mask[idx] = True
            idx += 1
    return mask


@njit(cache=True)
def decode(vp, q, floor):
    s = np.exp(2.0 * max(vp[0], floor))
    L = np.zeros((q, q))
    idx = 1
    for i in range(q):
        for j in range(i + 1):
            v = vp[idx]
            if i == j:
                L[i, i] = np.exp(max(v, floor))
            else:
                L[i, j] = v
            idx += 1
    return s, L


@njit(cache=True)
def _chol_inplace(a, n):
    # lower Cholesky, upper triangle left untouched
    for j in range(n):
        d = a[j, j]
        for m in range(j):
            d -= a[j, m] * a[j, m]
        if not d > 0.0:
            return False
        d = np.sqrt(d)
        a[j, j] = d
        for i in range(j + 1, n):
            t = a[i, j]
            for m in range(j):
                t -= a[i, m] * a[j, m]
            a[i, j] = t / d
    return True


@njit(cache=True)
def _forward(c, b, n, ncol):
    # solves C w = b in place for every column of b
    for col in range(ncol):
        for i in range(n):
            t = b[i, col]
            for m in range(i):
                t -= c[i, m] * b[m, col]
            b[i, col] = t / c[i, i]


@njit(cache=True)
def _backward(c, b, n):
    # solves C' w = b in place (single vector)
    for i in range(n - 1, -1, -1):
        t = b[i]
        for m in range(i + 1, n):
            t -= c[m, i] * b[m]
        b[i] = t / c[i, i]


@njit(cache=True)
def reml_eval(vp, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, beta_out):
    """-2 x restricted log-likelihood (no constant); fills ``beta_out``.

    Returns PENALTY when a Cholesky factorization fails.
    """
    s, L = decode(vp, q, floor)
    logs = np.log(s)
    J = nobs.shape[0]
    A = np.zeros((k, k))
    c = np.zeros(k)
    d = 0.0
    logdet_v = 0.0
    M = np.empty((q, q))
    G = np.empty((q, k + 1))
    for j in range(J):
        # M = s I + L' Z'Z L
        for a in range(q):
            for b in range(a + 1):
                t = 0.0
                for u in range(a, q):
                    for v in range(b, q):
                        t += L[u, a] * ZtZ[j, u, v] * L[v, b]
                M[a, b] = t
                M[b, a] = t
            M[a, a] += s
        if not _chol_inplace(M, q):
            return PENALTY
        ld = 0.0
        for a in range(q):
            ld += np.log(M[a, a])
        logdet_v += (nobs[j] - q) * logs + 2.0 * ld
        # G = L' [Z'X | Z'y], then W = C^{-1} G
        for a in range(q):
            for col in range(k):
                t = 0.0
                for u in range(a, q):
                    t += L[u, a] * ZtX[j, u, col]
                G[a, col] = t
            t = 0.0
            for u in range(a, q):
                t += L[u, a] * Zty[j, u]
            G[a, k] = t
        _forward(M, G, q, k + 1)
        for r in range(k):
            for col in range(r + 1):
                t = 0.0
                for a in range(q):
                    t += G[a, r] * G[a, col]
                A[r, col] += (XtX[j, r, col] - t) / s
            t = 0.0
            for a in range(q):
                t += G[a, r] * G[a, k]
            c[r] += (Xty[j, r] - t) / s
        t = 0.0
        for a in range(q):
            t += G[a, k] * G[a, k]
        d += (yty[j] - t) / s
    for r in range(k):
        for col in range(r):
            A[col, r] = A[r, col]
    if not _chol_inplace(A, k):
        return PENALTY
    ld_a = 0.0
    for r in range(k):
        ld_a += np.log(A[r, r])
    w = c.copy()
    for i in range(k):
        t = w[i]
        for m in range(i):
            t -= A[i, m] * w[m]
        w[i] = t / A[i, i]
    quad = d
    for i in range(k):
        quad -= w[i] * w[i]
    _backward(A, w, k)
    for i in range(k):
        beta_out[i] = w[i]
    return logdet_v + 2.0 * ld_a + quad


@njit(cache=True)
def _f(x, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf):
    return reml_eval(x, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)


@njit(cache=True)
def nelder_mead(x0, step, maxiter, fatol, xatol, q, k, floor,
                ZtZ, ZtX, XtX, Zty, Xty, yty, nobs):
    dim = x0.shape[0]
    buf = np.empty(k)
    sim = np.empty((dim + 1, dim))
    fs = np.empty(dim + 1)
    sim[0] = x0
    for i in range(dim):
        sim[i + 1] = x0
        sim[i + 1, i] += step[i]
    for i in range(dim + 1):
        fs[i] = _f(sim[i], q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
    nit = 0
    while nit < maxiter:
        order = np.argsort(fs)
        sim = sim[order]
        fs = fs[order]
        fspread = 0.0
        xspread = 0.0
        for i in range(1, dim + 1):
            fspread = max(fspread, abs(fs[i] - fs[0]))
            for m in range(dim):
                xspread = max(xspread, abs(sim[i, m] - sim[0, m]))
        if fspread <= fatol and xspread <= xatol:
            break
        nit += 1
        centroid = np.zeros(dim)
        for i in range(dim):
            centroid += sim[i]
        centroid /= dim
        xr = 2.0 * centroid - sim[dim]
        fr = _f(xr, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
        if fr < fs[0]:
            xe = 3.0 * centroid - 2.0 * sim[dim]
            fe = _f(xe, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
            if fe < fr:
                sim[dim] = xe
                fs[dim] = fe
            else:
                sim[dim] = xr
                fs[dim] = fr
            continue
        if fr < fs[dim - 1]:
            sim[dim] = xr
            fs[dim] = fr
            continue
        if fr < fs[dim]:
            xc = 1.5 * centroid - 0.5 * sim[dim]
            fc = _f(xc, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
            if fc <= fr:
                sim[dim] = xc
                fs[dim] = fc
                continue
        else:
            xc = 0.5 * centroid + 0.5 * sim[dim]
            fc = _f(xc, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
            if fc < fs[dim]:
                sim[dim] = xc
                fs[dim] = fc
                continue
        for i in range(1, dim + 1):
            sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
            fs[i] = _f(sim[i], q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
    best = np.argmin(fs)
    return sim[best].copy(), fs[best], nit


@njit(cache=True)
def fd_gradient(x, fx, h, lmask, floor, q, k, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs):
    """Central differences; one-sided (upward) on coordinates sitting at the floor."""
    dim = x.shape[0]
    buf = np.empty(k)
    g = np.empty(dim)
    xt = x.copy()
    for i in range(dim):
        hi = h * max(1.0, abs(x[i]))
        if lmask[i] and x[i] - hi < floor:
            xt[i] = x[i] + hi
            g[i] = (_f(xt, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf) - fx) / hi
        else:
            xt[i] = x[i] + hi
            fp = _f(xt, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
            xt[i] = x[i] - hi
            fm = _f(xt, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
            g[i] = (fp - fm) / (2.0 * hi)
        xt[i] = x[i]
    return g


@njit(cache=True)
def _project(x, lmask, floor):
    for i in range(x.shape[0]):
        if lmask[i] and x[i] < floor:
            x[i] = floor


@njit(cache=True)
def _active(x, g, lmask, floor):
    dim = x.shape[0]
    act = np.zeros(dim, dtype=np.bool_)
    for i in range(dim):
        if lmask[i] and x[i] <= floor and g[i] > 0.0:
            act[i] = True
    return act


@njit(cache=True)
def bfgs_polish(x0, maxiter, ftol, gtol, q, k, floor,
                ZtZ, ZtX, XtX, Zty, Xty, yty, nobs):
    """Projected BFGS; returns (x, f, iterations, converged)."""
    dim = x0.shape[0]
    lmask = log_mask(q)
    buf = np.empty(k)
    h = 1e-6
    x = x0.copy()
    _project(x, lmask, floor)
    fx = _f(x, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
    g = fd_gradient(x, fx, h, lmask, floor, q, k, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs)
    H = np.eye(dim)
    nit = 0
    converged = False
    while nit < maxiter:
        act = _active(x, g, lmask, floor)
        gp = g.copy()
        for i in range(dim):
            if act[i]:
                gp[i] = 0.0
        gnorm = 0.0
        for i in range(dim):
            gnorm = max(gnorm, abs(gp[i]))
        scale = 1.0 + abs(fx)
        if gnorm <= gtol * scale:
            converged = True
            break
        nit += 1
        p = -(H @ gp)
        for i in range(dim):
            if act[i]:
                p[i] = 0.0
        slope = 0.0
        for i in range(dim):
            slope += p[i] * gp[i]
        if slope >= 0.0:
            H = np.eye(dim)
            p = -gp
            slope = 0.0
            for i in range(dim):
                slope -= gp[i] * gp[i]
        t = 1.0
        accepted = False
        xn = x.copy()
        fn = fx
        for _ in range(40):
            for i in range(dim):
                xn[i] = x[i] + t * p[i]
            _project(xn, lmask, floor)
            fn = _f(xn, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, buf)
            if fn <= fx + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted or fx - fn <= ftol * scale:
            # no further progress possible: accept only if near-stationary
            if accepted and fn < fx:
                x = xn
                fx = fn
                g = fd_gradient(x, fx, h, lmask, floor, q, k, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs)
                act = _active(x, g, lmask, floor)
                gnorm = 0.0
                for i in range(dim):
                    if not act[i]:
                        gnorm = max(gnorm, abs(g[i]))
            # stationary, or the quasi-Newton model predicts a decrease below ftol
            converged = gnorm <= 100.0 * gtol * scale or -0.5 * slope <= 10.0 * ftol * scale
            break
        gn = fd_gradient(xn, fn, h, lmask, floor, q, k, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs)
        sv = xn - x
        yv = gn - g
        for i in range(dim):
            if act[i]:
                yv[i] = 0.0
                sv[i] = 0.0
        sy = 0.0
        for i in range(dim):
            sy += sv[i] * yv[i]
        if sy > 1e-12:
            rho = 1.0 / sy
            I = np.eye(dim)
            A1 = I - rho * np.outer(sv, yv)
            A2 = I - rho * np.outer(yv, sv)
            H = A1 @ H @ A2 + rho * np.outer(sv, sv)
        x = xn
        fx = fn
        g = gn
    return x, fx, nit, converged


@njit(cache=True)
def fit_kernel(x0, step, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs,
               nm_maxiter, bfgs_maxiter, ftol, gtol):
    x1, f1, nit1 = nelder_mead(x0, step, nm_maxiter, 1e-7, 1e-5, q, k, floor,
                               ZtZ, ZtX, XtX, Zty, Xty, yty, nobs)
    x2, f2, nit2, conv = bfgs_polish(x1, bfgs_maxiter, ftol, gtol, q, k, floor,
                                     ZtZ, ZtX, XtX, Zty, Xty, yty, nobs)
    beta = np.empty(k)
    f2 = reml_eval(x2, q, k, floor, ZtZ, ZtX, XtX, Zty, Xty, yty, nobs, beta)
    return x2, f2, beta, nit1 + nit2, conv
