"""Independent reference implementations used to check the package.

Each routine solves the same problem as a package function by a different
route (textbook recursions, generic solvers, brute force) and shares no code
with ``cpcm``.
"""

import numpy as np
from scipy import optimize


def kalman_filter(F, c, Qd, H, d, R, m0, P0, ys):
    """Textbook discrete Kalman filter in Joseph form."""
    m, P = np.array(m0, float), np.array(P0, float)
    means, covs = [], []
    eye = np.eye(m.size)
    for y in ys:
        m = F @ m + c
        P = F @ P @ F.T + Qd
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ (y - H @ m - d)
        L = eye - K @ H
        P = L @ P @ L.T + K @ R @ K.T
        means.append(m.copy())
        covs.append(P.copy())
    return np.array(means), np.array(covs)


def equality_qp(mu, Sigma, lam, A=None, b=None):
    """max mu'w - lam/2 w'Sigma w s.t. A w = b, via the full KKT system."""
    n = len(mu)
    if A is None:
        A, b = np.ones((1, n)), np.ones(1)
    A = np.atleast_2d(A)
    k = A.shape[0]
    kkt = np.block([[lam * Sigma, A.T], [A, np.zeros((k, k))]])
    rhs = np.concatenate([mu, b])
    return np.linalg.solve(kkt, rhs)[:n]


def projected_gradient_span_qp(U, mu, Sigma, lam, iters=20000):
    """Same program over span(U) with the budget, by projected gradient ascent.

    Feasible set: w = U a with 1'U a = 1. Projection onto the affine set is
    done in coordinates a.
    """
    c = U.T @ np.ones(U.shape[0])
    a = c / (c @ c)
    H = lam * U.T @ Sigma @ U
    g0 = U.T @ mu
    step = 1.0 / np.linalg.eigvalsh(H).max()
    proj = np.eye(len(c)) - np.outer(c, c) / (c @ c)
    for _ in range(iters):
        a = a + step * proj @ (g0 - H @ a)
    return U @ a


def conjugate_gaussian_update(prior_mean, prior_cov, P, Q, Omega):
    """Posterior mean of theta ~ N(m, C) after observing Q = P theta + e, e ~ N(0, Omega)."""
    prior_prec = np.linalg.inv(prior_cov)
    lik_prec = P.T @ np.linalg.inv(Omega) @ P
    post_cov = np.linalg.inv(prior_prec + lik_prec)
    return post_cov @ (prior_prec @ prior_mean + P.T @ np.linalg.inv(Omega) @ Q)


def min_kl_slsqp(prior, view_matrix, targets):
    """Minimize KL(q || p) over the simplex subject to E_q[view] = target."""
    p = np.asarray(prior, float)
    V = np.atleast_2d(np.asarray(view_matrix, float).T).T
    cons = [{"type": "eq", "fun": lambda q: q.sum() - 1.0}]
    cons.append({"type": "eq", "fun": lambda q: q @ V - targets})

    def kl(q):
        q = np.clip(q, 1e-300, None)
        return float(np.sum(q * np.log(q / p)))

    res = optimize.minimize(
        kl, p.copy(), method="SLSQP", bounds=[(0.0, 1.0)] * p.size,
        constraints=cons, options={"ftol": 1e-15, "maxiter": 1000},
    )
    return res.x


def min_kl_one_view_dual(prior, values, target):
    """Single-view tilt ``q ∝ p exp(t v)`` with ``t`` from a scalar root find."""
    p = np.asarray(prior, float)
    v = np.asarray(values, float)

    def tilt(t):
        z = t * v
        w = p * np.exp(z - z.max())
        return w / w.sum()

    t = optimize.brentq(lambda t: tilt(t) @ v - target, -200.0, 200.0, xtol=1e-14)
    return tilt(t)


def min_norm_by_nullspace(B, beta, rng, samples=50):
    """Random solutions of B'w = beta: particular solution plus null-space noise."""
    w0 = np.linalg.lstsq(B.T, beta, rcond=None)[0]
    _, _, vt = np.linalg.svd(B.T)
    null = vt[B.shape[1]:].T
    return [w0 + null @ rng.standard_normal(null.shape[1]) for _ in range(samples)]


def ledoit_wolf_sklearn(x):
    from sklearn.covariance import LedoitWolf

    est = LedoitWolf(assume_centered=False).fit(x)
    return est.covariance_, est.shrinkage_


def linear_quantile(col, q):
    """Order-statistic interpolation at position q (n - 1), written by hand."""
    s = sorted(col)
    pos = q * (len(s) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def simplex_projection_sort_free(v, iters=200):
    """Euclidean simplex projection via bisection on the threshold."""
    v = np.asarray(v, float)
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0, None).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi), 0, None)


def mirror_bisection(w_prev, signal, target):
    """Exponentiated-gradient step whose L1 move equals ``target`` (bisection on eta)."""
    w_prev = np.asarray(w_prev, float)
    d = np.asarray(signal, float)

    def step(eta):
        z = w_prev * np.exp(eta * (d - d.max()))
        return z / z.sum()

    def move(eta):
        return np.abs(step(eta) - w_prev).sum()

    lo, hi = 0.0, 1.0
    while move(hi) < target:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if move(mid) < target:
            lo = mid
        else:
            hi = mid
    return step(0.5 * (lo + hi))


def w2_by_sampling_quantiles(qf_a, qf_b, n=200000):
    """W2 between 1-D laws from their quantile functions on a midpoint grid."""
    u = (np.arange(n) + 0.5) / n
    return float(np.sqrt(np.mean((qf_a(u) - qf_b(u)) ** 2)))
