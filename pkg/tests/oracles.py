"""Independent reference solvers used only by the tests.

The solvers never import the code under test.  The finite-difference
helper calls the network loss but derives gradients on its own.
"""

import itertools

import numpy as np


def lasso_enumeration(X, y, lam):
    """Exact lasso minimiser by trying every sign pattern in {-1, 0, +1}^p.

    For a pattern ``s`` with support ``S`` the stationarity condition on the
    centered problem is ``G_SS w_S = c_S - lam s_S``; a pattern is feasible
    when the solution keeps the signs.  The best feasible pattern is the
    global minimiser (the true solution is always one of them).

    Returns ``(w, b, objective)`` for ``(1/2T)||y - Xw - b||^2 + lam ||w||_1``.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    T, p = X.shape
    xm, ym = X.mean(0), y.mean()
    Xc, yc = X - xm, y - ym
    G = Xc.T @ Xc / T
    c = Xc.T @ yc / T

    def objective(w):
        r = yc - Xc @ w
        return 0.5 * r @ r / T + lam * np.abs(w).sum()

    best_w, best = np.zeros(p), objective(np.zeros(p))
    for signs in itertools.product((-1, 0, 1), repeat=p):
        s = np.array(signs, float)
        S = np.flatnonzero(s)
        if S.size == 0:
            continue
        try:
            wS = np.linalg.solve(G[np.ix_(S, S)], c[S] - lam * s[S])
        except np.linalg.LinAlgError:
            continue
        if np.any(np.sign(wS) != s[S]):
            continue
        w = np.zeros(p)
        w[S] = wS
        val = objective(w)
        if val < best:
            best, best_w = val, w
    return best_w, ym - xm @ best_w, best


def difference_matrix(T, order):
    D = np.eye(T)
    for _ in range(order):
        D = D[:-1] - D[1:]  # rows [1, -1], then [1, -2, 1]
    return D


def trend_filter_dense(y, lam, order, tol=1e-12):
    """Trend filter via a log-barrier Newton method on the box-constrained dual.

    The dual of ``min 0.5||y - f||^2 + lam ||D f||_1`` is
    ``min_u 0.5||y - D^T u||^2 s.t. |u| <= lam`` with ``f = y - D^T u``.
    Dense linear algebra throughout; meant for T up to a few hundred.
    """
    y = np.asarray(y, float)
    D = difference_matrix(y.size, order)
    m = D.shape[0]
    H0 = D @ D.T
    Dy = D @ y
    u = np.zeros(m)
    t = 1.0
    while m / t > tol:
        for _ in range(200):
            a, b = lam - u, lam + u
            grad = t * (H0 @ u - Dy) + 1 / a - 1 / b
            hess = t * H0 + np.diag(1 / a ** 2 + 1 / b ** 2)
            step = np.linalg.solve(hess, -grad)
            dec = -grad @ step
            if dec / 2 < 1e-14:
                break
            # stay strictly inside the box, then backtrack
            s = 1.0
            lim = np.concatenate([(lam - u)[step > 0] / step[step > 0],
                                  (-lam - u)[step < 0] / step[step < 0]])
            if lim.size:
                s = min(1.0, 0.99 * lim.min())

            def phi(v):
                if np.any(np.abs(v) >= lam):
                    return np.inf
                return t * (0.5 * v @ H0 @ v - Dy @ v) - np.log(lam - v).sum() - np.log(lam + v).sum()

            f0 = phi(u)
            while phi(u + s * step) > f0 - 0.25 * s * dec:
                s *= 0.5
                if s < 1e-16:
                    break
            u = u + s * step
        t *= 10.0
    return y - D.T @ u, u


def ols(X, y):
    """Least squares with intercept: returns ``(w, b)``."""
    A = np.column_stack([np.ones(X.shape[0]), X])
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    return beta[1:], beta[0]


def finite_difference_check(net, X, Y, mask=None, step=1e-5):
    """Largest relative error between backprop and central differences."""
    from trafficdl.deepnet import loss_and_gradients

    _, (gW, gb) = loss_and_gradients(net, X, Y, mask)
    worst = 0.0
    for params, grads in ((net.weights, gW), (net.biases, gb)):
        for P, G in zip(params, grads):
            for idx in np.ndindex(P.shape):
                old = P[idx]
                P[idx] = old + step
                up = loss_and_gradients(net, X, Y, mask)[0]
                P[idx] = old - step
                down = loss_and_gradients(net, X, Y, mask)[0]
                P[idx] = old
                fd = (up - down) / (2 * step)
                denom = max(abs(fd), abs(G[idx]), 1e-6)
                worst = max(worst, abs(fd - G[idx]) / denom)
    return worst
