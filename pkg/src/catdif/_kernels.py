"""Compiled scalar kernels for the per-slot ability updates.

The CAT engine re-estimates ability after every administered item, which
makes these loops the bulk of simulation time.
"""
import math

import numba
import numpy as np


@numba.njit(cache=True)
def _log_sigmoid(z):
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


@numba.njit(cache=True)
def loglik(theta, a, b, c, x, D):
    total = 0.0
    for i in range(a.shape[0]):
        z = D * a[i] * (theta - b[i])
        if x[i] > 0.5:
            if c[i] > 0.0:
                total += math.log(c[i] + (1.0 - c[i]) * math.exp(_log_sigmoid(z)))
            else:
                total += _log_sigmoid(z)
        else:
            total += math.log1p(-c[i]) + _log_sigmoid(-z)
    return total


@numba.njit(cache=True)
def derivs(theta, a, b, c, x, D):
    """Return (score, second derivative, Fisher information) at theta."""
    score = 0.0
    second = 0.0
    info = 0.0
    for i in range(a.shape[0]):
        z = D * a[i] * (theta - b[i])
        s = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
        p = c[i] + (1.0 - c[i]) * s
        q = (1.0 - c[i]) * (1.0 - s)
        dp = D * a[i] * (1.0 - c[i]) * s * (1.0 - s)
        d2p = D * a[i] * dp * (1.0 - 2.0 * s)
        if p <= 0.0 or q <= 0.0:
            continue
        if x[i] > 0.5:
            score += dp / p
            second += d2p / p - dp * dp / (p * p)
        else:
            score -= dp / q
            second += -d2p / q - dp * dp / (q * q)
        info += dp * dp / (p * q)
    return score, second, info


@numba.njit(cache=True)
def _newton(a, b, c, x, D, lo, hi, start, tol, max_iter, max_halvings):
    theta = min(max(start, lo), hi)
    ll = loglik(theta, a, b, c, x, D)
    for _ in range(max_iter):
        sc, sec, info = derivs(theta, a, b, c, x, D)
        if abs(sc) < tol:
            # one more full step drives the score to rounding level
            if sec < 0:
                cand = theta - sc / sec
                if lo < cand < hi:
                    ll_cand = loglik(cand, a, b, c, x, D)
                    if ll_cand >= ll - 1e-12:
                        theta, ll = cand, ll_cand
            return theta, ll
        if (theta >= hi and sc > 0) or (theta <= lo and sc < 0):
            return theta, ll
        curv = -sec if sec < 0 else info
        step = sc / curv
        accepted = False
        cand = theta
        ll_cand = ll
        for _h in range(max_halvings):
            cand = min(max(theta + step, lo), hi)
            ll_cand = loglik(cand, a, b, c, x, D)
            if ll_cand >= ll - 1e-12:
                accepted = True
                break
            step *= 0.5
        if not accepted or cand == theta:
            break
        theta = cand
        ll = ll_cand
    return theta, ll


@numba.njit(cache=True)
def mle(a, b, c, x, D, lo, hi, start, tol, max_iter, max_halvings):
    """Safeguarded Newton-Raphson; returns (theta, information, converged).

    With guessing the likelihood can have several local maxima, so the
    Newton result is checked against an 81-point scan of [lo, hi] and
    Newton is restarted from the best scan point when that is higher.
    """
    n = a.shape[0]
    n_correct = 0.0
    for i in range(n):
        n_correct += x[i]
    if n_correct == n or n_correct == 0.0:
        theta = hi if n_correct == n else lo
        sc, sec, info = derivs(theta, a, b, c, x, D)
        return theta, info, False

    theta, ll = _newton(a, b, c, x, D, lo, hi, start, tol, max_iter, max_halvings)
    best_t = theta
    best_ll = ll
    for k in range(81):
        t = lo + (hi - lo) * k / 80.0
        lt = loglik(t, a, b, c, x, D)
        if lt > best_ll:
            best_t, best_ll = t, lt
    if best_ll > ll + 1e-10:
        t2, ll2 = _newton(a, b, c, x, D, lo, hi, best_t, tol, max_iter, max_halvings)
        if ll2 > ll:
            theta, ll = t2, ll2
    sc, sec, info = derivs(theta, a, b, c, x, D)
    return theta, info, (abs(sc) < tol) and (lo < theta < hi)


@numba.njit(cache=True)
def test_info(theta, a, b, c, D):
    total = 0.0
    for i in range(a.shape[0]):
        z = D * a[i] * (theta - b[i])
        s = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
        p = c[i] + (1.0 - c[i]) * s
        if p > 0.0:
            total += (D * a[i]) ** 2 * s * s * (1.0 - p) / p
    return total


def warmup():
    v = np.array([1.0, 1.2])
    mle(v, v - 1.0, v * 0.0, np.array([1.0, 0.0]), 1.0, -4.0, 4.0, 0.0, 1e-6, 100, 30)
    test_info(0.0, v, v, v * 0.0, 1.0)


# -- penalised IRLS for the two-level logistic model ------------------------

@numba.njit(cache=True)
def _log1pexp(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@numba.njit(cache=True)
def _eta(X, Zt, cl, beta, v):
    n, p = X.shape
    q = Zt.shape[1]
    eta = np.empty(n)
    for i in range(n):
        s = 0.0
        for k in range(p):
            s += X[i, k] * beta[k]
        for k in range(q):
            s += Zt[i, k] * v[cl[i], k]
        eta[i] = s
    return eta


@numba.njit(cache=True)
def _penalised(y, eta, v):
    s = 0.0
    for i in range(y.shape[0]):
        s += y[i] * eta[i] - _log1pexp(eta[i])
    for j in range(v.shape[0]):
        for k in range(v.shape[1]):
            s -= 0.5 * v[j, k] * v[j, k]
    return s


@numba.njit(cache=True)
def _assemble(X, Zt, y, cl, J, eta, v):
    n, p = X.shape
    q = Zt.shape[1]
    gb = np.zeros(p)
    gv = -v.copy()
    H = np.zeros((p, p))
    A = np.zeros((J, q, q))
    B = np.zeros((J, q, p))
    for j in range(J):
        for k in range(q):
            A[j, k, k] = 1.0
    for i in range(n):
        mu = 1.0 / (1.0 + math.exp(-eta[i]))
        w = mu * (1.0 - mu)
        r = y[i] - mu
        j = cl[i]
        for k in range(p):
            gb[k] += X[i, k] * r
            for l in range(k, p):
                H[k, l] += w * X[i, k] * X[i, l]
        for a in range(q):
            gv[j, a] += Zt[i, a] * r
            for b in range(q):
                A[j, a, b] += w * Zt[i, a] * Zt[i, b]
            for k in range(p):
                B[j, a, k] += w * Zt[i, a] * X[i, k]
    for k in range(p):
        for l in range(k):
            H[k, l] = H[l, k]
    return gb, gv, H, A, B


@numba.njit(cache=True)
def _inv_small(A):
    """Batched inverse and log-determinant of 1x1 or 2x2 SPD blocks."""
    J, q, _ = A.shape
    inv = np.empty_like(A)
    logdet = 0.0
    for j in range(J):
        if q == 1:
            inv[j, 0, 0] = 1.0 / A[j, 0, 0]
            logdet += math.log(A[j, 0, 0])
        else:
            det = A[j, 0, 0] * A[j, 1, 1] - A[j, 0, 1] * A[j, 1, 0]
            inv[j, 0, 0] = A[j, 1, 1] / det
            inv[j, 1, 1] = A[j, 0, 0] / det
            inv[j, 0, 1] = -A[j, 0, 1] / det
            inv[j, 1, 0] = -A[j, 1, 0] / det
            logdet += math.log(det)
    return inv, logdet


@numba.njit(cache=True)
def _schur(H, gb, gv, Ainv, B):
    """Eliminate the cluster blocks: returns (S, rhs, Ainv B, Ainv gv)."""
    J, q, p = B.shape
    AinvB = np.zeros((J, q, p))
    Ainvg = np.zeros((J, q))
    S = H.copy()
    rhs = gb.copy()
    for j in range(J):
        for a in range(q):
            for b in range(q):
                Ainvg[j, a] += Ainv[j, a, b] * gv[j, b]
                for k in range(p):
                    AinvB[j, a, k] += Ainv[j, a, b] * B[j, b, k]
        for k in range(p):
            for a in range(q):
                rhs[k] -= B[j, a, k] * Ainvg[j, a]
                for l in range(p):
                    S[k, l] -= B[j, a, k] * AinvB[j, a, l]
    return S, rhs, AinvB, Ainvg


@numba.njit(cache=True)
def pirls(X, Zt, y, cl, J, beta0, v0, tol, max_iter):
    """Joint Newton iterations over fixed effects and spherical modes.

    Returns (beta, v, laplace loglik, schur complement, converged,
    iterations, max abs gradient).
    """
    n, p = X.shape
    beta = beta0.copy()
    v = v0.copy()
    eta = _eta(X, Zt, cl, beta, v)
    obj = _penalised(y, eta, v)
    converged = False
    gnorm = np.inf
    it = 0
    while it < max_iter:
        it += 1
        gb, gv, H, A, B = _assemble(X, Zt, y, cl, J, eta, v)
        gnorm = max(np.max(np.abs(gb)), np.max(np.abs(gv)))
        if gnorm < tol:
            converged = True
            break
        Ainv, _ = _inv_small(A)
        S, rhs, AinvB, Ainvg = _schur(H, gb, gv, Ainv, B)
        db = np.linalg.solve(S, rhs)
        dv = Ainvg.copy()
        for j in range(J):
            for a in range(Ainvg.shape[1]):
                for k in range(p):
                    dv[j, a] -= AinvB[j, a, k] * db[k]
        t = 1.0
        for _ in range(30):
            nb = beta + t * db
            nv = v + t * dv
            ne = _eta(X, Zt, cl, nb, nv)
            nobj = _penalised(y, ne, nv)
            if nobj >= obj - 1e-12 * (1.0 + abs(obj)):
                break
            t *= 0.5
        step = t * max(np.max(np.abs(db)), np.max(np.abs(dv)))
        beta, v, eta, obj = nb, nv, ne, nobj
        if step < 1e-12:
            break
    gb, gv, H, A, B = _assemble(X, Zt, y, cl, J, eta, v)
    if not converged:
        gnorm = max(np.max(np.abs(gb)), np.max(np.abs(gv)))
        converged = gnorm < 1e-6
    Ainv, logdet = _inv_small(A)
    S, _, _, _ = _schur(H, gb, gv, Ainv, B)
    ll = obj - 0.5 * logdet
    return beta, v, ll, S, converged, it, gnorm
