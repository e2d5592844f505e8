"""Distribution-dependent Lyapunov functionals and drift-condition diagnostics.

A functional has the separable form ``V(t, x, mu) = v0(t, x) + int v1(t, y) mu(dy)``
with ``v0``, ``v1`` periodic-in-time polynomials. For this family the Lions
derivative is ``grad v1`` and its y-derivative is ``Hess v1``, so the generator
``LV`` is available in closed form.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import expr as ex
from .expr import Expr, ExprError
from .measure import ParticleCloud, mixture, second_moment_norm, stable_sum
from .model import COUPLED, MAIN, ModelSpec
from .rng import STREAM_SCAN, block_generator
from .simulate import ConfigError, SimConfig, Trajectory, simulate_flow

MAX_DEGREE = 6
NONNEG_PHASES = 16
NONNEG_RADIUS = 5.0
NONNEG_POINTS = 41


class LyapunovError(ValueError):
    pass


@dataclass(frozen=True)
class LyapunovSpec:
    """``V = v0(t, x) + int v1(t, y) dmu``.

    Nonnegativity is checked on a grid: ``NONNEG_PHASES`` equispaced phases
    times ``NONNEG_POINTS`` points per axis of ``[-NONNEG_RADIUS, NONNEG_RADIUS]^d``
    (a tensor grid for d=1, 500 seeded uniform points otherwise).
    """

    v0: Expr
    v1: Expr
    T: float
    d: int = 1

    def __post_init__(self):
        for name, e in (("v0", self.v0), ("v1", self.v1)):
            try:
                ex.validate(e, self.d, self.T, allow_obs=False, max_degree=MAX_DEGREE)
            except ExprError as exc:
                raise LyapunovError(f"{name}: {exc}") from None
        pts = _nonneg_grid(self.d)
        for k in range(NONNEG_PHASES):
            t = k * self.T / NONNEG_PHASES
            for name, f in (("v0", self._c["v0"]), ("v1", self._c["v1"])):
                vals = np.broadcast_to(f(t, pts, {}), (len(pts),))
                if vals.min() < -1e-12:
                    i = int(np.argmin(vals))
                    raise LyapunovError(f"{name} is negative at t={t:.4g}, point={pts[i].tolist()}")

    @classmethod
    def from_strings(cls, v0: str, v1: str, T: float, d: int = 1) -> "LyapunovSpec":
        try:
            return cls(ex.parse(v0, T, d, var="x", allow_obs=False),
                       ex.parse(v1, T, d, var="y", allow_obs=False), T, d)
        except ExprError as exc:
            raise LyapunovError(str(exc)) from None

    @cached_property
    def _c(self) -> dict:
        d = self.d
        out = {}
        for tag, e in (("v0", self.v0), ("v1", self.v1)):
            out[tag] = ex.compile_expr(e)
            out[tag + "_t"] = ex.compile_expr(ex.diff(e, "t"))
            grad = [ex.diff(e, i) for i in range(d)]
            out[tag + "_grad"] = [ex.compile_expr(g) for g in grad]
            out[tag + "_hess"] = [[ex.compile_expr(ex.diff(grad[i], j)) for j in range(d)]
                                  for i in range(d)]
        return out

    def v0_values(self, t, X):
        return _col(self._c["v0"](t, X, {}), len(X))

    def v1_values(self, t, Y):
        return _col(self._c["v1"](t, Y, {}), len(Y))

    def grad_v1(self, t, Y) -> np.ndarray:
        return np.stack([_col(g(t, Y, {}), len(Y)) for g in self._c["v1_grad"]], axis=1)

    def hess_v1(self, t, Y) -> np.ndarray:
        H = self._c["v1_hess"]
        return np.stack([np.stack([_col(h(t, Y, {}), len(Y)) for h in row], axis=1) for row in H],
                        axis=1)

    def V(self, t: float, x, mu: ParticleCloud) -> float:
        x = _points(x, self.d)
        return float(self.v0_values(t, x)[0]) + stable_sum(mu.weights * self.v1_values(t, mu.positions))

    def to_dict(self) -> dict:
        return {"v0": ex.to_string(self.v0, "x", self.T), "v1": ex.to_string(self.v1, "y", self.T),
                "T": self.T, "d": self.d}

    @classmethod
    def from_dict(cls, doc: dict) -> "LyapunovSpec":
        unknown = set(doc) - {"v0", "v1", "T", "d"}
        if unknown:
            raise LyapunovError(f"unknown keys {sorted(unknown)}")
        return cls.from_strings(doc["v0"], doc["v1"], float(doc["T"]), int(doc.get("d", 1)))


def quadratic_spec(T: float = 2 * math.pi, d: int = 1) -> LyapunovSpec:
    """``V = |x|^2 + int |y|^2 dmu``, the functional used for all built-in examples."""
    sq = lambda v: " + ".join(f"{v}{i + 1}^2" for i in range(d))  # noqa: E731
    return LyapunovSpec.from_strings(sq("x"), sq("y"), T, d)


def _nonneg_grid(d: int) -> np.ndarray:
    if d == 1:
        return np.linspace(-NONNEG_RADIUS, NONNEG_RADIUS, NONNEG_POINTS).reshape(-1, 1)
    g = block_generator(0, STREAM_SCAN, 0, 99)
    return g.uniform(-NONNEG_RADIUS, NONNEG_RADIUS, size=(500, d))


def _col(v, n):
    return np.broadcast_to(np.asarray(v, dtype=float), (n,))


def _points(x, d) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        x = x.reshape(-1, 1) if d == 1 else x.reshape(1, -1)
    if x.shape[1] != d:
        raise LyapunovError(f"point dimension {x.shape[1]} differs from d={d}")
    return x


def _check_pair(ls: LyapunovSpec, ms: ModelSpec):
    if ls.d != ms.d:
        raise LyapunovError(f"functional has d={ls.d}, model has d={ms.d}")
    if abs(ls.T - ms.T) > 1e-12 * ms.T:
        raise LyapunovError(f"functional period {ls.T} differs from model period {ms.T}")


def _generator_terms(f: dict, tag: str, t: float, X: np.ndarray, b: np.ndarray, S: np.ndarray):
    """b . grad v + 1/2 tr(S S^T Hess v) at each row of X."""
    n, d = X.shape
    out = np.zeros(n)
    for i, g in enumerate(f[tag + "_grad"]):
        out = out + b[:, i] * _col(g(t, X, {}), n)
    A = np.einsum("nik,njk->nij", S, S)
    for i in range(d):
        for j in range(d):
            out = out + 0.5 * A[:, i, j] * _col(f[tag + "_hess"][i][j](t, X, {}), n)
    return out


def measure_part(ls: LyapunovSpec, ms: ModelSpec, t: float, mu: ParticleCloud, obs=None) -> float:
    """int [d_t v1 + b . grad v1 + 1/2 tr(a Hess v1)] dmu with the main coefficients."""
    f = ls._c
    obs = ms.observables(mu) if obs is None else obs
    Y = mu.positions
    b = ms.drift_values(MAIN, t, Y, obs)
    S = ms.diffusion_values(MAIN, t, Y, obs)
    per = _col(f["v1_t"](t, Y, {}), len(Y)) + _generator_terms(f, "v1", t, Y, b, S)
    return stable_sum(mu.weights * per)


def eval_LV_many(ls: LyapunovSpec, ms: ModelSpec, t: float, X, mu: ParticleCloud) -> np.ndarray:
    """LV(t, x, mu) for every row x of X, sharing the measure part."""
    _check_pair(ls, ms)
    X = _points(X, ls.d)
    if mu.d != ls.d:
        raise LyapunovError("cloud dimension differs from the functional")
    obs = ms.observables(mu)
    f = ls._c
    b = ms.drift_values(COUPLED, t, X, obs)
    S = ms.diffusion_values(COUPLED, t, X, obs)
    xpart = _col(f["v0_t"](t, X, {}), len(X)) + _generator_terms(f, "v0", t, X, b, S)
    return xpart + measure_part(ls, ms, t, mu, obs)


def eval_LV(ls: LyapunovSpec, ms: ModelSpec, t: float, x, mu: ParticleCloud) -> float:
    """Closed-form generator of V at a lifted point.

    The x-part uses the coupled coefficients, the measure part the main ones.
    """
    return float(eval_LV_many(ls, ms, t, x, mu)[0])


# --- Lions derivative check ---------------------------------------------------------

def check_lions_closed_form(ls: LyapunovSpec, t: float, y_grid, mu: ParticleCloud | None = None,
                            x=None, eps: float = 0.5, h: float = 1e-3) -> float:
    """Max discrepancy between closed-form Lions terms and finite differences.

    The flat derivative ``F(y) = (V(t,x,(1-eps)mu + eps delta_y) - V(t,x,mu)) / eps``
    is differentiated in y with a five-point stencil and compared with
    ``grad v1``; ``Hess v1`` is compared with the same stencil applied to
    ``grad v1``.
    """
    d = ls.d
    Y = _points(y_grid, d)
    if mu is None:
        mu = ParticleCloud.uniform(np.linspace(-1.0, 2.0, 4)[:, None] * np.ones((1, d)))
    x = np.zeros(d) if x is None else np.asarray(x, dtype=float)
    base = ls.V(t, x, mu)

    def flat(y):
        return (ls.V(t, x, mixture([mu, ParticleCloud.dirac(y)], [1 - eps, eps])) - base) / eps

    def stencil(fun, y, k):
        e = np.zeros(d)
        e[k] = h
        return (-fun(y + 2 * e) + 8 * fun(y + e) - 8 * fun(y - e) + fun(y - 2 * e)) / (12 * h)

    err = 0.0
    for y in Y:
        g = ls.grad_v1(t, y[None, :])[0]
        H = ls.hess_v1(t, y[None, :])[0]
        for k in range(d):
            err = max(err, abs(stencil(flat, y, k) - g[k]))
            for j in range(d):
                fd = stencil(lambda z: ls.grad_v1(t, z[None, :])[0, j], y, k)
                err = max(err, abs(fd - H[j, k]))
    return err


# --- radial scan -----------------------------------------------------------------------

@dataclass
class RadialScanReport:
    radii: list
    A_hat: list
    V_hat: list
    argmax: list
    n_samples: int
    seed: int
    sampler: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["R", "A_hat", "V_hat"])
            for row in zip(self.radii, self.A_hat, self.V_hat):
                w.writerow([repr(float(v)) for v in row])


SCAN_DEFAULTS = {"shell": 1.05, "n_atoms": 16, "n_centers": 3, "spread": 0.3}


def _unit(g, d):
    v = g.standard_normal(d)
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.eye(d)[0]


def _sample_measure(g, d, target, j, n_atoms, n_centers, spread) -> np.ndarray:
    """Atoms of a uniform cloud with |mu|_2 = target.

    Even j: Gaussian-location mixture (centers N(0,1), spread * N(0,1) jitter).
    Odd j: two-point law with a random weight, stored as repeated atoms.
    """
    if j % 2 == 0:
        centers = g.standard_normal((n_centers, d))
        lab = g.integers(0, n_centers, n_atoms)
        pts = centers[lab] + spread * g.standard_normal((n_atoms, d))
    else:
        p, q = g.standard_normal(d), g.standard_normal(d)
        k = int(g.integers(1, n_atoms))
        pts = np.vstack([np.repeat(p[None], k, 0), np.repeat(q[None], n_atoms - k, 0)])
    norm = math.sqrt(float(np.mean(np.sum(pts ** 2, axis=1))))
    if norm == 0:
        pts = np.ones((n_atoms, d)) / math.sqrt(d)
        norm = 1.0
    return pts * (target / norm)


def radial_scan(ls: LyapunovSpec, ms: ModelSpec, R_grid, n_samples: int = 2000, seed: int = 0,
                shell: float = SCAN_DEFAULTS["shell"], n_atoms: int = SCAN_DEFAULTS["n_atoms"],
                n_centers: int = SCAN_DEFAULTS["n_centers"],
                spread: float = SCAN_DEFAULTS["spread"]) -> RadialScanReport:
    """Estimate sup LV and inf V over the lifted shells {R <= |x| v |mu|_2 <= shell*R}.

    Samples alternate between the x-slot and the mu-slot driving the norm:
    the driver's radius is uniform on the shell and the other slot's radius
    is uniform on [0, driver radius] (x uniform in the ball, mu rescaled).
    Measures alternate between the two families of ``_sample_measure``;
    t is uniform on [0, T).
    """
    _check_pair(ls, ms)
    radii = [float(r) for r in R_grid]
    if not radii:
        raise LyapunovError("empty radius grid")
    if any(r <= 0 for r in radii) or any(b <= a for a, b in zip(radii, radii[1:])):
        raise LyapunovError("radii must be positive and strictly increasing")
    if n_samples < 1:
        raise LyapunovError("n_samples must be positive")
    d = ls.d
    A_hat, V_hat, argmax = [], [], []
    for ir, R in enumerate(radii):
        g = block_generator(seed, STREAM_SCAN, ir, 0)
        best, best_at, vmin = -math.inf, None, math.inf
        for j in range(n_samples):
            t = g.uniform(0.0, ms.T)
            r = g.uniform(R, shell * R)
            if j % 2 == 0:
                x = r * _unit(g, d)
                s = g.uniform(0.0, r)
            else:
                s = r
                x = r * g.uniform() ** (1.0 / d) * _unit(g, d)
            pts = _sample_measure(g, d, s, j // 2, n_atoms, n_centers, spread)
            mu = ParticleCloud.uniform(pts, t)
            lv = eval_LV(ls, ms, t, x, mu)
            v = ls.V(t, x, mu)
            vmin = min(vmin, v)
            if lv > best:
                best = lv
                best_at = {"t": t, "x_norm": float(np.linalg.norm(x)),
                           "mu_norm": second_moment_norm(mu)}
        A_hat.append(best)
        V_hat.append(vmin)
        argmax.append(best_at)
    sampler = {"shell": shell, "n_atoms": n_atoms, "n_centers": n_centers, "spread": spread,
               "families": ["gaussian_location_mixture", "two_point"]}
    return RadialScanReport(radii, A_hat, V_hat, argmax, n_samples, seed, sampler)


# --- trajectory diagnostics ---------------------------------------------------------------

def _lifted_pairs(traj: Trajectory):
    """(time, x-cloud, law) per snapshot; x from the coupled copy when present."""
    xs = traj.coupled if traj.coupled is not None else traj.snapshots
    return [(s.time_stamp, x, s) for x, s in zip(xs, traj.snapshots)]


def visited_sup_LV(ls: LyapunovSpec, ms: ModelSpec, traj: Trajectory) -> float:
    return max(float(eval_LV_many(ls, ms, t, x.positions, law).max())
               for t, x, law in _lifted_pairs(traj))


@dataclass
class ChebyshevReport:
    R: float
    lam: float
    V_start: float
    V_R: float
    times: list
    tail: list
    se: list
    bound: list
    holds: bool

    def to_dict(self) -> dict:
        return asdict(self)


def chebyshev_tail_bound(ls: LyapunovSpec, ms: ModelSpec, traj: Trajectory, lam: float, R: float,
                         V_R: float | None = None, scan_samples: int = 500,
                         seed: int = 0) -> ChebyshevReport:
    """Check P(lifted state in {|x| v |mu|_2 > R}) <= (E V(s) + lam (t - s)) / V_R.

    ``lam`` must dominate max(0, sup LV) over every visited lifted state.
    ``V_R`` defaults to the scan estimate of inf V on the shell at R. The
    empirical probability gets a three-standard-error allowance.
    """
    _check_pair(ls, ms)
    sup_lv = visited_sup_LV(ls, ms, traj)
    if not (lam >= 0 and lam >= sup_lv):
        raise LyapunovError(f"lambda={lam} is below the sampled sup LV={sup_lv:.6g} "
                            "over visited states (or negative)")
    if V_R is None:
        V_R = radial_scan(ls, ms, [R], scan_samples, seed).V_hat[0]
    pairs = _lifted_pairs(traj)
    s, x0, law0 = pairs[0]
    V_start = stable_sum(x0.weights * ls.v0_values(s, x0.positions)) + \
        stable_sum(law0.weights * ls.v1_values(s, law0.positions))
    times, tail, se, bound = [], [], [], []
    ok = True
    for t, x, law in pairs:
        p = lifted_tail_fraction(x, law, R)
        e = math.sqrt(max(p * (1 - p), 0.0) / x.n)
        bd = (V_start + lam * (t - s)) / V_R
        ok = ok and (p - 3 * e <= bd)
        times.append(t)
        tail.append(p)
        se.append(e)
        bound.append(bd)
    return ChebyshevReport(R, lam, V_start, V_R, times, tail, se, bound, bool(ok))


def lifted_tail_fraction(x: ParticleCloud, law: ParticleCloud, R: float) -> float:
    """Weight of particles i with |x_i| v |law|_2 > R."""
    if second_moment_norm(law) > R:
        return 1.0
    r = np.linalg.norm(x.positions, axis=1)
    return min(1.0, stable_sum(x.weights[r > R]))


@dataclass
class TailCriteriaReport:
    radii: list
    cesaro: list
    time_average: list
    alpha: list
    beta: list
    n_periods: int
    s0: float
    T: float

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["R", "cesaro", "time_average", "alpha", "beta"])
            for row in zip(self.radii, self.cesaro, self.time_average, self.alpha, self.beta):
                w.writerow([repr(float(v)) for v in row])


def tail_criteria(traj: Trajectory, R_grid, T: float, s0: float | None = None,
                  n: int | None = None) -> TailCriteriaReport:
    """Tail statistics of the lifted process along a trajectory.

    Per R: (a) mean tail fraction at s0 + kT, k = 1..n; (b) trapezoid time
    average of the tail fraction over [s0, s0 + nT]; (c) the largest
    fraction, among particles inside {|x| v |mu|_2 <= R/2} at a period start
    s0 + jT, that are in the R-tail at a snapshot within the next period.
    """
    pairs = _lifted_pairs(traj)
    times = np.array([p[0] for p in pairs])
    s0 = float(times[0]) if s0 is None else float(s0)
    avail = int(math.floor((times[-1] - s0) / T + 1e-9))
    n = avail if n is None else int(n)
    if n < 1 or n > avail:
        raise ConfigError(f"trajectory covers {avail} periods after s0, need n={n} >= 1")
    step = traj.record_dt
    per = T / step
    if abs(per - round(per)) > 1e-6:
        raise ConfigError("snapshot spacing does not divide the period")
    per = round(per)
    i0 = traj.index_at(s0)
    window = range(i0, i0 + n * per + 1)
    radii = [float(r) for r in R_grid]
    cesaro, tavg, alpha, beta = [], [], [], []
    law_norm = [second_moment_norm(pairs[i][2]) for i in window]
    xr = {i: np.linalg.norm(pairs[i][1].positions, axis=1) for i in window}
    for R in radii:
        frac = np.array([1.0 if law_norm[k] > R else
                         min(1.0, stable_sum(pairs[i][1].weights[xr[i] > R]))
                         for k, i in enumerate(window)])
        cesaro.append(float(np.mean(frac[per::per])))
        tavg.append(float(np.sum((frac[1:] + frac[:-1]) * 0.5) / (n * per)))
        b = R / 2
        worst = 0.0
        for j in range(n):
            k0 = j * per
            i_start = i0 + k0
            if law_norm[k0] > b:
                continue
            w = pairs[i_start][1].weights
            inside = xr[i_start] <= b
            wsum = stable_sum(w[inside])
            if wsum == 0:
                continue
            for k in range(k0 + 1, k0 + per + 1):
                i = i0 + k
                if law_norm[k] > R:
                    worst = 1.0
                    break
                hit = inside & (xr[i] > R)
                worst = max(worst, stable_sum(w[hit]) / wsum)
        alpha.append(worst)
        beta.append(b)
    return TailCriteriaReport(radii, cesaro, tavg, alpha, beta, n, s0, T)


# --- Ito consistency -------------------------------------------------------------------------

@dataclass
class ItoReport:
    increment: float
    predicted: float
    residual: float
    se: float
    n_steps: int
    dt: float

    def within(self, c2: float = 10.0) -> bool:
        return abs(self.residual) <= 3 * self.se + c2 * self.dt ** 2 * self.n_steps


def ito_consistency(ls: LyapunovSpec, ms: ModelSpec, init: ParticleCloud, cfg: SimConfig,
                    chunk: int = 256) -> ItoReport:
    """Compare the change of E V(t, X_t, mu_t) with sum_k E LV(t_k) dt over [t0, t1].

    Per particle i the residual sums ``v(X_{k+1}) - v(X_k) - LV_i dt`` over
    steps, with v = v0 + v1 and LV_i the generator of both pieces at X_k^i;
    averaging over i gives the flow identity, and the spread over i gives the
    standard error. Runs in chunks so that only ``chunk`` snapshots are held.
    """
    _check_pair(ls, ms)
    if ms.coupled_drift is not None or ms.coupled_diffusion is not None:
        raise LyapunovError("Ito check applies to the flow; use a model without coupled overrides")
    f = ls._c
    n_steps = cfg.n_steps
    cloud = init
    res = None
    inc = pred = 0.0
    k = 0
    while k < n_steps:
        m = min(chunk, n_steps - k)
        t_a, t_b = cfg.time(k), cfg.time(k + m)
        part = simulate_flow(ms, cloud.at(t_a), cfg.replace(t0=t_a, t1=t_b, record_stride=1))
        snaps = part.snapshots
        for a, b in zip(snaps, snaps[1:]):
            t = a.time_stamp
            X = a.positions
            obs = ms.observables(a)
            bx = ms.drift_values(MAIN, t, X, obs)
            Sx = ms.diffusion_values(MAIN, t, X, obs)
            lv = (_col(f["v0_t"](t, X, {}), len(X)) + _generator_terms(f, "v0", t, X, bx, Sx)
                  + _col(f["v1_t"](t, X, {}), len(X)) + _generator_terms(f, "v1", t, X, bx, Sx))
            va = ls.v0_values(t, X) + ls.v1_values(t, X)
            vb = ls.v0_values(b.time_stamp, b.positions) + ls.v1_values(b.time_stamp, b.positions)
            r = (vb - va) - lv * cfg.dt
            res = r if res is None else res + r
            inc += stable_sum(a.weights * (vb - va))
            pred += stable_sum(a.weights * lv) * cfg.dt
        cloud = snaps[-1]
        k += m
    w = init.weights if init.n == cfg.N else np.full(cfg.N, 1.0 / cfg.N)
    mean = stable_sum(w * res)
    se = math.sqrt(stable_sum(w * (res - mean) ** 2) / cfg.N)
    return ItoReport(inc, pred, inc - pred, se, n_steps, cfg.dt)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
