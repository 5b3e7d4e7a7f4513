"""Reference computations that share no code with the package.

Each routine solves the same mathematical object by a different method:
QPs by exhaustive active-set enumeration (exact) or a zooming grid search
(a feasible upper bound), Riccati ODEs by scipy's adaptive DOP853, and
stationary roots by Brent's method.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

FEAS = 1e-9


def qp_enumerate(omega, w, H, d):
    """Exact min of K'omega K + 2 w'K s.t. HK <= d over every candidate active set."""
    omega = np.asarray(omega, float)
    w = np.asarray(w, float)
    H = np.asarray(H, float).reshape(-1, w.size)
    d = np.asarray(d, float)
    n, k = w.size, H.shape[0]
    best = (np.inf, None)
    for size in range(0, min(n, k) + 1):
        for act in itertools.combinations(range(k), size):
            Ha = H[list(act)]
            kkt = np.block([[2 * omega, Ha.T], [Ha, np.zeros((size, size))]])
            rhs = np.concatenate([-2 * w, d[list(act)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            K = sol[:n]
            if k and np.max(H @ K - d) > FEAS * max(1.0, np.max(np.abs(d))):
                continue
            val = K @ omega @ K + 2 * w @ K
            if val < best[0]:
                best = (val, K)
    return best


def qp_grid(omega, w, H, d, points=21, zooms=40):
    """Brute-force grid search over a box, refined around the best feasible node.

    The box is doubled until it holds a feasible node and contains the whole
    sublevel set through that node, so the global minimiser lies inside; the
    box is then halved around the incumbent. Every returned point is
    feasible, so the value is an upper bound on the true minimum. Returns
    (inf, None) when no node ever lands in the feasible set.
    """
    omega = np.asarray(omega, float)
    w = np.asarray(w, float)
    H = np.asarray(H, float).reshape(-1, w.size)
    d = np.asarray(d, float)
    n = w.size
    lam = np.linalg.eigvalsh(omega)[0]
    f = lambda K: np.einsum("...i,ij,...j->...", K, omega, K) + 2 * K @ w  # noqa: E731

    def feas(K):
        return np.all(K @ H.T - d <= 0.0, axis=-1) if H.size else np.ones(K.shape[:-1], bool)

    def search(center, half):
        axes = [np.linspace(c - half, c + half, points) for c in center]
        nodes = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
        ok = feas(nodes)
        if not ok.any():
            return np.inf, None
        vals = f(nodes[ok])
        i = int(np.argmin(vals))
        return vals[i], nodes[ok][i]

    radius = 1.0
    best_val, best = np.inf, None
    wn = np.linalg.norm(w)
    for _ in range(40):
        best_val, best = search(np.zeros(n), radius)
        if best is not None and (wn + np.sqrt(wn * wn + lam * max(best_val, 0.0))) / lam <= radius:
            break
        radius *= 2.0
    if best is None:
        return np.inf, None
    half = radius
    for _ in range(zooms):
        half *= 0.5
        val, node = search(best, half)
        if val < best_val:
            best_val, best = val, node
    return best_val, best


def _unconstrained_rhs(A, B, C, D, R, S, q):
    DDt, DC = D @ D.T, D @ C

    def rhs(G):
        omega = G * DDt + R
        w = G * (DC + B) + S
        return -G * (C @ C) - 2 * G * A - q + w @ np.linalg.solve(omega, w)

    return rhs


def riccati_unconstrained(A, B, C, D, R, S, q, q_T, grid, rtol=1e-12, atol=1e-14):
    """G(t) on ``grid`` for the unconstrained problem, integrated backwards by DOP853."""
    rhs = _unconstrained_rhs(*(np.asarray(v, float) for v in (A, B, C, D, R, S, q)))
    T = grid[-1]
    # s = T - t runs forward
    sol = solve_ivp(lambda s, y: [-rhs(y[0])], (0.0, T), [q_T], method="DOP853",
                    rtol=rtol, atol=atol, dense_output=True)
    return sol.sol(T - np.asarray(grid))[0]


def lq_constrained_rhs(A, B, C, D, R, S, q, H, d, sign):
    A, B, C, D, R, S, q = (np.asarray(v, float) for v in (A, B, C, D, R, S, q))
    DDt, DC = D @ D.T, D @ C

    def rhs(G):
        val, _ = qp_enumerate(G * DDt + R, sign * (G * (DC + B) + S), H, d)
        return -G * (C @ C) - 2 * G * A - q - val

    return rhs


def riccati_constrained(A, B, C, D, R, S, q, H, d, q_T, grid, sign, rtol=1e-11, atol=1e-13):
    rhs = lq_constrained_rhs(A, B, C, D, R, S, q, H, d, sign)
    T = grid[-1]
    sol = solve_ivp(lambda s, y: [-rhs(y[0])], (0.0, T), [q_T], method="DOP853",
                    rtol=rtol, atol=atol, dense_output=True)
    return sol.sol(T - np.asarray(grid))[0]


def stationary_root(A, B, C, D, R, S, q, H, d, sign, g_lo=1e-6, g_hi=1e3):
    """Root of the stationary function by a bracketing scan and Brent's method."""
    rhs = lq_constrained_rhs(A, B, C, D, R, S, q, H, d, sign)
    g = np.geomspace(g_lo, g_hi, 200)
    f = np.array([rhs(x) for x in g])
    idx = np.flatnonzero(np.sign(f[:-1]) * np.sign(f[1:]) < 0)
    if idx.size == 0:
        return None
    i = idx[0]
    return brentq(rhs, g[i], g[i + 1], xtol=1e-15, rtol=1e-15, maxiter=500)


def mv_rhs_specialized(r, b, sigma, R, no_short, sign):
    """Riccati right-hand side written directly for the wealth equation.

    Only the mean-variance structure is used (no C, S or q terms); the cone
    is {K_i >= 0, i in no_short}, handled by enumerating which of those
    coordinates sit at zero.
    """
    SS = sigma @ sigma.T
    n = b.size

    def inner(G):
        omega = G * SS + R
        lin = sign * G * b
        best = np.inf
        for size in range(len(no_short) + 1):
            for fixed in itertools.combinations(no_short, size):
                free = [i for i in range(n) if i not in fixed]
                K = np.zeros(n)
                if free:
                    K[free] = np.linalg.solve(omega[np.ix_(free, free)], -lin[free])
                if any(K[i] < -1e-13 for i in no_short):
                    continue
                best = min(best, K @ omega @ K + 2 * lin @ K)
        return best

    return lambda G: -2 * G * r - inner(G)


def rk4_backward(rhs, q_T, grid):
    G = np.empty(len(grid))
    G[-1] = q_T
    for j in range(len(grid) - 1, 0, -1):
        h = grid[j] - grid[j - 1]
        g = G[j]
        k1 = rhs(g)
        k2 = rhs(g - 0.5 * h * k1)
        k3 = rhs(g - 0.5 * h * k2)
        k4 = rhs(g - h * k3)
        G[j - 1] = g - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return G
