"""Candidate periodic laws: period averaging, certification, period-map iteration, sweeps."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import expr as ex
from .measure import ParticleCloud, moment, read_csv, stable_sum, tail_mass, w2, write_csv
from .model import ModelSpec
from .rng import derive_seed
from .simulate import (
    BlowUpError, ConfigError, SimConfig, Trajectory, _initial_ensemble, simulate_flow,
)

DEFAULT_BURN_IN = 20
DEFAULT_TRAILING = 5
DEFAULT_PHASES = 8
DEFAULT_TOL = 0.05
DEFAULT_RADII = (1.0, 2.0, 4.0, 8.0, 10.0, 16.0)

# labels for derived seeds
_SEED_PERIOD_MAP = 2
_SEED_SWEEP = 3


@dataclass
class PhaseMeasureSet:
    """One cloud per phase k*T/m of a period."""

    T: float
    clouds: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.clouds) < 2:
            raise ConfigError("need at least two phases")

    @property
    def m(self) -> int:
        return len(self.clouds)

    @property
    def phases(self) -> list:
        return [k * self.T / self.m for k in range(self.m)]

    def distances(self, other: "PhaseMeasureSet") -> list:
        if other.m != self.m:
            raise ConfigError("phase grids differ")
        return [w2(a, b) for a, b in zip(self.clouds, other.clouds)]

    def tail_profile(self, radii) -> dict:
        return {repr(float(R)): max(tail_mass(c, R) for c in self.clouds) for R in radii}

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = []
        for k, c in enumerate(self.clouds):
            name = f"phase_{k:03d}.csv"
            write_csv(c, d / name)
            names.append(name)
        doc = {"T": self.T, "m": self.m, "phases": self.phases, "files": names,
               "provenance": self.provenance}
        (d / "phases.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        return d

    @classmethod
    def read(cls, directory) -> "PhaseMeasureSet":
        d = Path(directory)
        doc = json.loads((d / "phases.json").read_text())
        return cls(doc["T"], [read_csv(d / n) for n in doc["files"]], doc.get("provenance", {}))


def aligned_dt(T: float, m: int, dt: float) -> float:
    """Largest step <= dt that puts a whole number of steps in T/m."""
    q = math.ceil(T / (m * dt) - 1e-9)
    return T / (m * q)


def _phase_stride(traj: Trajectory, T: float, m: int) -> int:
    q = T / m / traj.record_dt
    if abs(q - round(q)) > 1e-6 or round(q) < 1:
        raise ConfigError(f"snapshot spacing {traj.record_dt:.6g} does not divide T/m = {T / m:.6g}")
    return round(q)


def _pool(clouds, time_stamp) -> ParticleCloud:
    n = len(clouds)
    pos = np.vstack([c.positions for c in clouds])
    w = np.concatenate([c.weights / n for c in clouds])
    return ParticleCloud(pos, w, time_stamp)


def kb_average(traj: Trajectory, s0: float, T: float, n: int, m: int) -> PhaseMeasureSet:
    """Pool the clouds at s0 + s + kT, k = 1..n, for each phase s = jT/m.

    Each cloud enters with weight 1/n, so the pooled cloud is the particle
    version of the period-averaged law.
    """
    if n < 1 or m < 2:
        raise ConfigError("need n >= 1 and m >= 2")
    q = _phase_stride(traj, T, m)
    per = q * m
    i0 = traj.index_at(s0)
    last = i0 + n * per + (m - 1) * q
    if last >= len(traj.snapshots):
        raise ConfigError(f"trajectory too short for {n} periods after s0={s0}")
    clouds = []
    for j in range(m):
        parts = [traj.snapshots[i0 + k * per + j * q] for k in range(1, n + 1)]
        clouds.append(_pool(parts, j * T / m))
    prov = {"s0": s0, "n_periods": n, "seed": traj.config.seed, "N": traj.config.N,
            "dt": traj.config.dt}
    return PhaseMeasureSet(T, clouds, prov)


@dataclass
class PeriodicCertificate:
    distances: list          # [phase][trailing pair]
    max_distance: float
    tol: float
    verdict: bool
    tail_profile: dict
    config: dict
    phase_set: PhaseMeasureSet = field(repr=False, compare=False)
    trajectory: Trajectory | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"distances": self.distances, "max_distance": self.max_distance, "tol": self.tol,
                "verdict": "pass" if self.verdict else "fail", "tail_profile": self.tail_profile,
                "config": self.config}

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "certificate.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        self.phase_set.write(d / "phases")
        return d


def _period_config(ms: ModelSpec, cfg: SimConfig, periods: int, m: int) -> SimConfig:
    dt = aligned_dt(ms.T, m, cfg.dt)
    q = round(ms.T / (m * dt))
    return cfg.replace(dt=dt, t1=cfg.t0 + periods * ms.T, record_stride=q)


def certify_from_trajectory(traj: Trajectory, T: float, burn_in: int, trailing: int, m: int,
                            tol: float, radii=DEFAULT_RADII, config: dict | None = None,
                            s0: float | None = None) -> PeriodicCertificate:
    """Certificate from recorded snapshots; the trailing periods follow ``burn_in`` periods."""
    if not tol > 0:
        raise ConfigError("tol must be positive")
    if trailing < 2:
        raise ConfigError("need at least two trailing periods")
    q = _phase_stride(traj, T, m)
    per = q * m
    s0 = traj.config.t0 if s0 is None else s0
    i0 = traj.index_at(s0) + burn_in * per
    if i0 + (trailing - 1) * per + (m - 1) * q >= len(traj.snapshots):
        raise ConfigError("trajectory too short for the requested periods")
    dist = []
    for j in range(m):
        clouds = [traj.snapshots[i0 + k * per + j * q] for k in range(trailing)]
        dist.append([w2(a, b) for a, b in zip(clouds, clouds[1:])])
    mx = max(max(r) for r in dist)
    pooled = kb_average(traj, s0 + (burn_in - 1) * T, T, trailing, m)
    cfg_echo = dict(config or {})
    cfg_echo.update({"burn_in": burn_in, "trailing": trailing, "m": m, "tol": tol})
    return PeriodicCertificate(dist, mx, tol, bool(mx <= tol), pooled.tail_profile(radii), cfg_echo,
                               pooled, traj)


def certify_periodic(ms: ModelSpec, init: ParticleCloud, cfg: SimConfig,
                     burn_in: int = DEFAULT_BURN_IN, trailing: int = DEFAULT_TRAILING,
                     m: int = DEFAULT_PHASES, tol: float = DEFAULT_TOL,
                     radii=DEFAULT_RADII, extra_periods: int = 0) -> PeriodicCertificate:
    """Simulate burn-in plus trailing periods and compare consecutive periods phase by phase.

    ``cfg.dt`` is lowered if needed so that T/m is a whole number of steps;
    ``cfg.t1`` and ``cfg.record_stride`` are ignored. A blow-up propagates as
    ``BlowUpError``. ``extra_periods`` extends the run beyond the trailing
    window without affecting the verdict.
    """
    if not tol > 0:
        raise ConfigError("tol must be positive")
    if trailing < 2:
        raise ConfigError("need at least two trailing periods")
    if burn_in < 1:
        raise ConfigError("burn_in must be at least one period")
    run = _period_config(ms, cfg, burn_in + trailing + extra_periods, m)
    traj = simulate_flow(ms, init, run)
    echo = {"model": ms.to_dict(), "sim": run.to_dict()}
    return certify_from_trajectory(traj, ms.T, burn_in, trailing, m, tol, radii, echo)


@dataclass
class PeriodMapLog:
    changes: list
    converged: bool
    best_iteration: int

    def to_dict(self) -> dict:
        return {"changes": self.changes, "converged": self.converged,
                "best_iteration": self.best_iteration}


def period_map_iterate(ms: ModelSpec, init: ParticleCloud, cfg: SimConfig, max_iters: int = 20,
                       tol: float = DEFAULT_TOL, m: int = DEFAULT_PHASES):
    """Iterate mu -> law after one period until successive iterates are within tol.

    Iteration j (1-based) runs over [t0, t0 + T] with seed derived from
    ``(cfg.seed, j)``, so every application of the map uses fresh noise.
    Returns ``(phase_set, log)``; the phase set holds the one-period phase
    clouds that produced the accepted (or, without convergence, the best)
    iterate.
    """
    if max_iters < 1 or not tol > 0:
        raise ConfigError("need max_iters >= 1 and tol > 0")
    run = _period_config(ms, cfg, 1, m)
    X, w = _initial_ensemble(init, run.N, run.seed)
    cur = ParticleCloud(X, w, run.t0)
    changes, sets = [], []
    best = None
    for j in range(1, max_iters + 1):
        traj = simulate_flow(ms, cur, run.replace(seed=derive_seed(cfg.seed, _SEED_PERIOD_MAP, j)))
        nxt = traj.final().at(run.t0)
        clouds = [nxt.at(0.0)] + [traj.snapshots[k].at(k * ms.T / m) for k in range(1, m)]
        change = w2(cur, nxt)
        changes.append(change)
        sets.append(clouds)
        if best is None or change < changes[best - 1]:
            best = j
        cur = nxt
        if change <= tol:
            break
    converged = changes[-1] <= tol
    pick = len(changes) if converged else best
    prov = {"method": "period_map", "iteration": pick, "seed": cfg.seed, "N": run.N, "dt": run.dt}
    return PhaseMeasureSet(ms.T, sets[pick - 1], prov), PeriodMapLog(changes, converged, pick)


@dataclass
class CesaroReport:
    ns: list
    averages: list
    increments: list
    non_monotone: bool
    start: float

    def to_dict(self) -> dict:
        return {"ns": self.ns, "averages": self.averages, "increments": self.increments,
                "non_monotone": self.non_monotone, "start": self.start}


def cesaro_functional_convergence(ms: ModelSpec, init: ParticleCloud, f: ex.Expr, cfg: SimConfig,
                                  ns, burn_in: int = 0, samples_per_period: int = 64,
                                  traj: Trajectory | None = None) -> CesaroReport:
    """(1/(nT)) int_t^{t+nT} <f(s, ., mu_s), mu_s> ds for each n in ``ns``.

    t = t0 + burn_in*T. The integral uses the trapezoid rule on snapshots
    ``samples_per_period`` per period. Increments are the differences of
    consecutive averages; ``non_monotone`` flags increments whose magnitude
    grows along the ladder.
    """
    ns = sorted(int(n) for n in ns)
    if not ns or ns[0] < 1:
        raise ConfigError("ns must be positive integers")
    ex.validate(f, ms.d, ms.T)
    T = ms.T
    if traj is None:
        run = _period_config(ms, cfg, burn_in + ns[-1], samples_per_period)
        traj = simulate_flow(ms, init, run)
    q = _phase_stride(traj, T, samples_per_period)
    per = q * samples_per_period
    start = traj.config.t0 + burn_in * T
    i0 = traj.index_at(start)
    if i0 + ns[-1] * per >= len(traj.snapshots):
        raise ConfigError("trajectory span too short for the largest n")
    fc = ex.compile_expr(f)
    alphas = sorted(ex.observables(f))
    g = []
    for s in traj.snapshots[i0:i0 + ns[-1] * per + 1]:
        o = {a: moment(s, a) for a in alphas}
        vals = np.broadcast_to(np.asarray(fc(s.time_stamp, s.positions, o), dtype=float), (s.n,))
        if not np.all(np.isfinite(vals)):
            raise ConfigError(f"f is not finite along the trajectory at t={s.time_stamp:.6g}")
        g.append(stable_sum(s.weights * vals))
    g = np.array(g)
    cum = np.concatenate([[0.0], np.cumsum((g[1:] + g[:-1]) * 0.5)])
    avgs = [float(cum[n * per] / (n * per)) for n in ns]
    inc = [b - a for a, b in zip(avgs, avgs[1:])]
    mags = [abs(v) for v in inc]
    non_mono = any(b > a for a, b in zip(mags, mags[1:]))
    return CesaroReport(ns, avgs, inc, bool(non_mono), start)


@dataclass
class SweepReport:
    labels: list
    verdicts: list
    errors: list
    max_distances: list
    tail_profiles: list
    sup_tail_profile: dict
    distance_to_last: list     # [k][phase]
    config: dict
    certificates: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"labels": self.labels, "verdicts": self.verdicts, "errors": self.errors,
                "max_distances": self.max_distances, "tail_profiles": self.tail_profiles,
                "sup_tail_profile": self.sup_tail_profile,
                "distance_to_last": self.distance_to_last, "config": self.config}


def parameter_sweep(models, init: ParticleCloud, cfg: SimConfig, labels=None,
                    burn_in: int = DEFAULT_BURN_IN, trailing: int = DEFAULT_TRAILING,
                    m: int = DEFAULT_PHASES, tol: float = DEFAULT_TOL,
                    radii=DEFAULT_RADII) -> SweepReport:
    """Certify each model with its own derived seed and compare against the last one.

    A member that blows up or fails certification is reported, not raised.
    The tightness statistic is the sup over members and phases of the pooled
    tail mass at each radius.
    """
    models = list(models)
    if not models:
        raise ConfigError("empty model family")
    d, T = models[0].d, models[0].T
    if any(ms.d != d or abs(ms.T - T) > 1e-12 * T for ms in models):
        raise ConfigError("all models must share d and T")
    labels = list(range(len(models))) if labels is None else list(labels)
    certs, verdicts, errors, maxd, profiles = [], [], [], [], []
    for k, ms in enumerate(models):
        try:
            c = certify_periodic(ms, init, cfg.replace(seed=derive_seed(cfg.seed, _SEED_SWEEP, k)),
                                 burn_in, trailing, m, tol, radii)
        except BlowUpError as exc:
            certs.append(None)
            verdicts.append(False)
            errors.append(str(exc))
            maxd.append(None)
            profiles.append(None)
            continue
        certs.append(c)
        verdicts.append(c.verdict)
        errors.append(None if c.verdict else f"max distance {c.max_distance:.4g} > tol {tol}")
        maxd.append(c.max_distance)
        profiles.append(c.tail_profile)
    ok = [p for p in profiles if p is not None]
    sup = {key: max(p[key] for p in ok) for key in ok[0]} if ok else {}
    last = certs[-1]
    dist = [None if (c is None or last is None) else c.phase_set.distances(last.phase_set)
            for c in certs]
    echo = {"n_models": len(models), "labels": labels, "burn_in": burn_in, "trailing": trailing,
            "m": m, "tol": tol, "sim": cfg.to_dict()}
    return SweepReport(labels, verdicts, errors, maxd, profiles, sup, dist, echo, certs)
