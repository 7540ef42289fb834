"""Compiled kernels for exact quantile regression.

The solver walks between basic solutions (designs interpolating exactly
``K`` observations). At each vertex it evaluates the one-sided directional
derivatives of the check loss along the ``2K`` edges obtained by releasing
one interpolated observation, and moves along the steepest descending edge to
the minimum of the piecewise-linear objective on that line (a weighted
quantile of the breakpoints). The objective decreases strictly at every
step, so the walk terminates at a vertex where no edge descends.
"""

import numpy as np
from numba import njit

OK = 0
DEGENERATE = 1  # optimal along every edge but ties make the check inconclusive
MAX_ITER = 2
RANK_DEFICIENT = 3


@njit(cache=True)
def initial_basis(X, tol):
    """First ``K`` linearly independent rows of ``X`` (Gram-Schmidt)."""
    n, K = X.shape
    Q = np.zeros((K, K))
    basis = np.zeros(K, np.int64)
    r = 0
    for i in range(n):
        v = X[i].copy()
        nv0 = np.sqrt(np.sum(v * v))
        if nv0 == 0.0:
            continue
        for _ in range(2):
            for q in range(r):
                v -= np.dot(Q[q], v) * Q[q]
        nv = np.sqrt(np.sum(v * v))
        if nv > tol * nv0:
            Q[r] = v / nv
            basis[r] = i
            r += 1
            if r == K:
                break
    return basis, r


@njit(cache=True)
def _check_loss_slope(ri, c, tau, ztol):
    # derivative in t of rho_tau(ri - t*c) at t = 0+
    if ri > ztol:
        return -c * tau
    if ri < -ztol:
        return -c * (tau - 1.0)
    if c < 0.0:
        return -c * tau
    return c * (1.0 - tau)


@njit(cache=True)
def solve_vertex(y, X, tau, basis, ztol, max_iter):
    """Run the vertex walk from ``basis`` (modified in place).

    Returns the coefficients, a status code and the iteration count.
    """
    n, K = X.shape
    isbasic = np.zeros(n, np.bool_)
    for k in range(K):
        isbasic[basis[k]] = True
    Xh = np.empty((K, K))
    yh = np.empty(K)
    b = np.zeros(K)
    r = np.empty(n)
    tb = np.empty(n)
    wb = np.empty(n)
    ib = np.empty(n, np.int64)
    status = MAX_ITER
    it = 0
    while it < max_iter:
        it += 1
        for k in range(K):
            Xh[k] = X[basis[k]]
            yh[k] = y[basis[k]]
        Hinv = np.linalg.inv(Xh)
        b = Hinv @ yh
        r = y - X @ b
        for k in range(K):
            r[basis[k]] = 0.0
        A = X @ Hinv

        best_g = 0.0
        best_k = -1
        best_s = 0.0
        degenerate = False
        for k in range(K):
            gp = 1.0 - tau
            gm = tau
            scale = 1.0
            for i in range(n):
                if isbasic[i]:
                    continue
                a = A[i, k]
                scale += abs(a)
                gp += _check_loss_slope(r[i], a, tau, ztol)
                gm += _check_loss_slope(r[i], -a, tau, ztol)
                if abs(r[i]) <= ztol and a != 0.0:
                    degenerate = True
            thr = -1e-12 * scale
            if gp < thr and gp / scale < best_g:
                best_g, best_k, best_s = gp / scale, k, 1.0
            if gm < thr and gm / scale < best_g:
                best_g, best_k, best_s = gm / scale, k, -1.0
        if best_k < 0:
            status = DEGENERATE if degenerate else OK
            break

        # exact line search along the chosen edge
        g = 1.0 - tau if best_s > 0 else tau
        nb = 0
        for i in range(n):
            if isbasic[i]:
                continue
            c = best_s * A[i, best_k]
            g += _check_loss_slope(r[i], c, tau, ztol)
            if abs(r[i]) > ztol and c != 0.0:
                t = r[i] / c
                if t > 0.0:
                    tb[nb] = t
                    wb[nb] = abs(c)
                    ib[nb] = i
                    nb += 1
        if nb == 0:
            status = MAX_ITER
            break
        order = np.argsort(tb[:nb])
        enter = ib[order[nb - 1]]
        cum = g
        for q in range(nb):
            cum += wb[order[q]]
            if cum >= 0.0:
                enter = ib[order[q]]
                break
        isbasic[basis[best_k]] = False
        basis[best_k] = enter
        isbasic[enter] = True
    return b, status, it


@njit(cache=True)
def fit_summary(y, X, b, tau, ztol):
    """Objective (mean check loss), negative and zero residual counts."""
    n = y.shape[0]
    r = y - X @ b
    obj = 0.0
    n_neg = 0
    n_zero = 0
    for i in range(n):
        ri = r[i]
        if ri < 0.0:
            obj += (tau - 1.0) * ri
        else:
            obj += tau * ri
        if abs(ri) <= ztol:
            n_zero += 1
        elif ri < 0.0:
            n_neg += 1
    return obj / n, n_neg, n_zero


@njit(cache=True)
def fit_groups(y, X1, starts, taus, ztol_rel, iter_factor):
    """Quantile regression of ``y`` on ``[1, X1]`` inside every group.

    Fits are warm-started across the quantile grid from the previous final
    basis. Groups whose design is rank deficient are flagged and left to the
    caller.
    """
    m = starts.shape[0] - 1
    T = taus.shape[0]
    K = X1.shape[1] + 1
    coefs = np.full((m, T, K), np.nan)
    status = np.zeros((m, T), np.int64)
    objective = np.full((m, T), np.nan)
    n_neg = np.zeros((m, T), np.int64)
    n_zero = np.zeros((m, T), np.int64)
    for j in range(m):
        s = starts[j]
        e = starts[j + 1]
        nj = e - s
        Xj = np.empty((nj, K))
        for i in range(nj):
            Xj[i, 0] = 1.0
            for k in range(K - 1):
                Xj[i, k + 1] = X1[s + i, k]
        yj = y[s:e].copy()
        ymax = 0.0
        for i in range(nj):
            ymax = max(ymax, abs(yj[i]))
        ztol = ztol_rel * (1.0 + ymax)
        basis, rank = initial_basis(Xj, 1e-10)
        if rank < K:
            for t in range(T):
                status[j, t] = RANK_DEFICIENT
            continue
        for t in range(T):
            b, st, _ = solve_vertex(yj, Xj, taus[t], basis, ztol, iter_factor * nj + 50)
            status[j, t] = st
            for k in range(K):
                coefs[j, t, k] = b[k]
            obj, nn, nz = fit_summary(yj, Xj, b, taus[t], ztol)
            objective[j, t] = obj
            n_neg[j, t] = nn
            n_zero[j, t] = nz
    return coefs, status, objective, n_neg, n_zero
