"""Independent reference computations used by the tests."""
import itertools
import math

import numpy as np
from scipy.optimize import linprog


def w2_assignment(a, b):
    """Exact W_2 between equal-size uniform clouds by enumerating all matchings."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    n = len(a)
    C = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    perms = np.array(list(itertools.permutations(range(n))))
    costs = C[np.arange(n), perms].sum(axis=1) / n
    return math.sqrt(costs.min())


def wp_linprog(xa, wa, xb, wb, p=2):
    """Exact W_p between weighted discrete measures via the transport LP."""
    xa = np.asarray(xa, dtype=float).reshape(len(xa), -1)
    xb = np.asarray(xb, dtype=float).reshape(len(xb), -1)
    n, m = len(xa), len(xb)
    C = np.linalg.norm(xa[:, None, :] - xb[None, :, :], axis=2) ** p
    A_eq, b_eq = [], []
    for i in range(n):
        row = np.zeros((n, m))
        row[i, :] = 1
        A_eq.append(row.ravel())
        b_eq.append(wa[i])
    for j in range(m):
        col = np.zeros((n, m))
        col[:, j] = 1
        A_eq.append(col.ravel())
        b_eq.append(wb[j])
    res = linprog(C.ravel(), A_eq=np.array(A_eq), b_eq=np.array(b_eq), bounds=(0, None),
                  method="highs")
    assert res.success
    return max(res.fun, 0.0) ** (1.0 / p)


def omega_bisection(xa, wa, xb, wb, iters=60):
    """Levy-Prohorov distance by bisection on delta.

    The predicate checks both defining inequalities over every subset of the
    union of the two supports.
    """
    xa = np.asarray(xa, dtype=float).reshape(len(xa), -1)
    xb = np.asarray(xb, dtype=float).reshape(len(xb), -1)
    pts = np.vstack([xa, xb])
    mass_a = np.concatenate([wa, np.zeros(len(xb))])
    mass_b = np.concatenate([np.zeros(len(xa)), wb])
    D = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    k = len(pts)
    subsets = [list(s) for r in range(1, k + 1) for s in itertools.combinations(range(k), r)]

    def ok(delta):
        near = D < delta
        for A in subsets:
            infl = np.any(near[A], axis=0)
            if not mass_a[A].sum() < mass_b[infl].sum() + delta:
                return False
            if not mass_b[A].sum() < mass_a[infl].sum() + delta:
                return False
        return True

    lo, hi = 0.0, 1.0 + 1e-12
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def rk4(f, y0, t0, t1, n):
    """Classical fourth-order Runge-Kutta on a uniform grid; returns (ts, ys)."""
    h = (t1 - t0) / n
    ts = t0 + h * np.arange(n + 1)
    ys = np.empty((n + 1, len(y0)))
    y = np.array(y0, dtype=float)
    ys[0] = y
    for i in range(n):
        t = ts[i]
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        ys[i + 1] = y
    return ts, ys


def ou_moment_rhs(a, b, c, sigma):
    """Closed moment ODE of dX = (-aX + bE[X] + c sin t)dt + sigma dW.

    State (m, v) with m = E[X], v = E[X^2]:
      m' = (-a + b) m + c sin t
      v' = -2a v + 2 m (b m + c sin t) + sigma^2
    """
    def f(t, y):
        m, v = y
        drive = b * m + c * math.sin(t)
        return np.array([(-a + b) * m + c * math.sin(t), -2 * a * v + 2 * m * drive + sigma ** 2])
    return f


def ou_moments(a, b, c, sigma, m0, v0, t0, t1, n):
    return rk4(ou_moment_rhs(a, b, c, sigma), [m0, v0], t0, t1, n)


def ou_periodic_mean(t, a=1.0, b=0.25, c=1.0):
    ab = a - b
    return c * (ab * math.sin(t) - math.cos(t)) / (ab ** 2 + 1)


def ou_periodic_moments(a=1.0, b=0.25, c=1.0, sigma=1.0, phases=(0.0,), n_per=4000, periods=40):
    """Periodic (m, v) at the given phases, by RK4 relaxation over many periods."""
    T = 2 * math.pi
    _, ys = ou_moments(a, b, c, sigma, 0.0, 0.0, 0.0, periods * T, periods * n_per)
    y_end = ys[-1]
    out = []
    for s in phases:
        if s == 0:
            out.append(y_end)
            continue
        _, seg = ou_moments(a, b, c, sigma, y_end[0], y_end[1], 0.0, s, max(1, round(n_per * s / T)))
        out.append(seg[-1])
    return np.array(out)


def ou_periodic_cycle(a=1.0, b=0.25, c=1.0, sigma=1.0, n_per=4096, periods=40):
    """One period [0, T] of the periodic (m, v) orbit on a uniform grid."""
    T = 2 * math.pi
    _, ys = ou_moments(a, b, c, sigma, 0.0, 0.0, 0.0, periods * T, periods * n_per)
    return ou_moments(a, b, c, sigma, ys[-1, 0], ys[-1, 1], 0.0, T, n_per)


def coupled_ou_means(a, b, c, m0, n0, t0, t1, steps):
    """(E X, E Xbar) when Xbar is driven by the law of X with the same OU coefficients."""
    def f(t, y):
        m, nbar = y
        return np.array([(-a + b) * m + c * math.sin(t), -a * nbar + b * m + c * math.sin(t)])
    return rk4(f, [m0, n0], t0, t1, steps)
