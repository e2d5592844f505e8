"""Euler-Maruyama interacting-particle simulation of the MVSDE and its coupled copy."""
from __future__ import annotations

import dataclasses
import functools
import json
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .measure import ParticleCloud, read_csv, w2, write_csv
from .model import COUPLED, MAIN, ModelSpec
from .rng import CounterNoise, derive_seed, resample_indices


class ConfigError(ValueError):
    pass


class BlowUpError(RuntimeError):
    """A particle left the blow-up ball or became non-finite.

    ``partial`` holds the trajectory recorded up to the last good snapshot.
    """

    def __init__(self, t: float, index: int, partial: "Trajectory | None" = None):
        self.t = t
        self.index = index
        self.partial = partial
        super().__init__(f"blow-up at t={t:.6g}, particle {index}")


@dataclass(frozen=True)
class SimConfig:
    N: int
    dt: float
    t0: float
    t1: float
    seed: int = 0
    record_stride: int = 1
    blowup_radius: float = 1e6
    threads: int = 1

    def validate(self, T: float | None = None) -> None:
        if not (isinstance(self.N, int) and self.N >= 1):
            raise ConfigError("N must be a positive integer")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive")
        if T is not None and self.dt > T / 20 * (1 + 1e-12):
            raise ConfigError(f"dt must not exceed T/20 = {T / 20:.6g}")
        if not self.t1 > self.t0:
            raise ConfigError("t1 must exceed t0")
        if not (self.blowup_radius > 0):
            raise ConfigError("blowup_radius must be positive")
        if not (isinstance(self.record_stride, int) and self.record_stride >= 1):
            raise ConfigError("record_stride must be a positive integer")
        if not (isinstance(self.threads, int) and self.threads >= 1):
            raise ConfigError("threads must be a positive integer")
        self.n_steps  # noqa: B018  (raises on a misaligned span)

    @property
    def n_steps(self) -> int:
        span = self.t1 - self.t0
        n = round(span / self.dt)
        if n < 1 or abs(n * self.dt - span) > 1e-9 * max(1.0, abs(span)):
            raise ConfigError(f"span {span!r} is not a multiple of dt={self.dt!r}")
        return n

    def step_key(self, k: int) -> int:
        """Global counter of step k; shared by runs that cover the same times."""
        return round(self.t0 / self.dt) + k

    def time(self, k: int) -> float:
        # on the global dt grid, so split runs reproduce a single run bit-for-bit
        base = round(self.t0 / self.dt)
        if abs(base * self.dt - self.t0) <= 1e-12 * max(1.0, abs(self.t0)):
            return (base + k) * self.dt
        return self.t0 + k * self.dt

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("threads")  # results do not depend on it
        return d


@dataclass
class Trajectory:
    snapshots: list
    config: SimConfig
    model: ModelSpec
    coupled: list | None = None
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time_stamp for s in self.snapshots])

    @property
    def record_dt(self) -> float:
        return self.config.dt * self.config.record_stride

    def index_at(self, t: float) -> int:
        k = (t - self.config.t0) / self.record_dt
        i = round(k)
        if abs(k - i) > 1e-6 or not 0 <= i < len(self.snapshots):
            raise ConfigError(f"no snapshot at t={t!r}")
        return i

    def final(self) -> ParticleCloud:
        return self.snapshots[-1]


# --- stepping ---------------------------------------------------------------------

def _increment(ms: ModelSpec, which: str, t: float, dt: float, X: np.ndarray,
               obs: dict, xi: np.ndarray) -> np.ndarray:
    b = ms.drift_values(which, t, X, obs)
    S = ms.diffusion_values(which, t, X, obs)
    if ms.d == 1 and ms.m == 1:
        noise = S[:, :, 0] * xi
    else:
        noise = np.einsum("ndm,nm->nd", S, xi)
    return X + b * dt + noise * math.sqrt(dt)


def _check_blowup(X: np.ndarray, radius: float):
    """Index of the first particle outside the ball (or non-finite), else None."""
    if X.shape[1] == 1:
        r = np.abs(X[:, 0])
    else:
        r = np.sqrt(np.einsum("ij,ij->i", X, X))
    if r.max() <= radius:  # False when any entry is NaN
        return None
    bad = ~(r <= radius)
    return int(np.argmax(bad))


def em_step(ms: ModelSpec, cloud: ParticleCloud, t: float, dt: float, noise,
            blowup_radius: float = math.inf, which: str = MAIN,
            law: ParticleCloud | None = None) -> ParticleCloud:
    """One explicit Euler-Maruyama step with coefficients frozen at the input law.

    ``noise`` holds standard normals of shape (N, m); ``law`` (default: the
    cloud itself) supplies the measure argument of the coefficients.
    """
    xi = np.asarray(noise, dtype=float).reshape(cloud.n, ms.m)
    obs = ms.observables(law if law is not None else cloud)
    X = _increment(ms, which, t, dt, cloud.positions, obs, xi)
    bad = _check_blowup(X, blowup_radius)
    if bad is not None:
        raise BlowUpError(t + dt, bad)
    return ParticleCloud(X, cloud.weights, cloud.time_stamp + dt, _check=False)


def _initial_ensemble(mu0: ParticleCloud, N: int, seed: int):
    if mu0.n == N:
        return np.array(mu0.positions), np.array(mu0.weights)
    idx = resample_indices(seed, mu0.weights, N)
    return np.array(mu0.positions[idx]), np.full(N, 1.0 / N)


def _run(ms: ModelSpec, X: np.ndarray, w: np.ndarray, cfg: SimConfig, noise,
         Xbar: np.ndarray | None = None) -> Trajectory:
    cfg.validate(ms.T)
    n_steps = cfg.n_steps
    own_noise = noise is None
    if own_noise:
        noise = CounterNoise(cfg.seed, threads=cfg.threads)
    snaps = [ParticleCloud(X.copy(), w, cfg.time(0), _check=False)]
    bars = None if Xbar is None else [ParticleCloud(Xbar.copy(), w, cfg.time(0), _check=False)]
    traj = Trajectory(snaps, cfg, ms, bars)
    try:
        for k in range(n_steps):
            t = cfg.time(k)
            law = ParticleCloud(X, w, t, _check=False)
            obs = ms.observables(law)
            xi = noise(cfg.step_key(k), X.shape[0], ms.m)
            Xn = _increment(ms, MAIN, t, cfg.dt, X, obs, xi)
            bad = _check_blowup(Xn, cfg.blowup_radius)
            if bad is not None:
                raise BlowUpError(cfg.time(k + 1), bad, traj)
            if Xbar is not None:
                Xbar = _increment(ms, COUPLED, t, cfg.dt, Xbar, obs, xi)
                bad = _check_blowup(Xbar, cfg.blowup_radius)
                if bad is not None:
                    raise BlowUpError(cfg.time(k + 1), bad, traj)
            X = Xn
            if (k + 1) % cfg.record_stride == 0:
                tk = cfg.time(k + 1)
                snaps.append(ParticleCloud(X.copy(), w, tk, _check=False))
                if bars is not None:
                    bars.append(ParticleCloud(Xbar.copy(), w, tk, _check=False))
    finally:
        if own_noise:
            noise.close()
    return traj


def simulate_flow(ms: ModelSpec, init: ParticleCloud, cfg: SimConfig, noise=None) -> Trajectory:
    """Evolve the particle approximation of the law from ``init`` over [t0, t1].

    ``init`` is used verbatim when it has ``cfg.N`` particles and is resampled
    to N i.i.d. draws otherwise. ``noise`` overrides the counter-based source.
    """
    if init.d != ms.d:
        raise ConfigError("initial cloud dimension differs from the model")
    if abs(init.time_stamp - cfg.t0) > 1e-12 * max(1.0, abs(cfg.t0)):
        raise ConfigError(f"init time {init.time_stamp!r} differs from t0={cfg.t0!r}")
    X, w = _initial_ensemble(init, cfg.N, cfg.seed)
    return _run(ms, X, w, cfg, noise)


def simulate_coupled(ms: ModelSpec, x0, mu0: ParticleCloud, cfg: SimConfig, noise=None) -> Trajectory:
    """Simulate N pairs (X^i, Xbar^i) driven by the same noise.

    Both components use the X-ensemble's empirical law in their coefficients.
    ``x0`` is a point (all Xbar^i start there) or an (N, d) array.
    """
    if mu0.d != ms.d:
        raise ConfigError("initial cloud dimension differs from the model")
    if abs(mu0.time_stamp - cfg.t0) > 1e-12 * max(1.0, abs(cfg.t0)):
        raise ConfigError(f"mu0 time {mu0.time_stamp!r} differs from t0={cfg.t0!r}")
    X, w = _initial_ensemble(mu0, cfg.N, cfg.seed)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x0 = x0.reshape(1, -1)
        if x0.shape[1] != ms.d:
            raise ConfigError("x0 dimension differs from the model")
        Xbar = np.repeat(x0, X.shape[0], axis=0)
    else:
        if x0.shape != X.shape:
            raise ConfigError(f"x0 array must have shape {X.shape}")
        Xbar = x0.copy()
    return _run(ms, X, w, cfg, noise, Xbar)


def flow_semigroup_gap(ms: ModelSpec, mu0: ParticleCloud, s: float, u: float, t: float,
                       cfg: SimConfig) -> float:
    """W_2 between the law flow s -> t and the composition s -> u -> t.

    The composed pass uses an independent seed derived from ``cfg.seed``.
    """
    if not s < u < t:
        raise ConfigError("need s < u < t")
    init = mu0.at(s)
    direct = simulate_flow(ms, init, cfg.replace(t0=s, t1=t, record_stride=_whole(cfg, s, t)))
    seed2 = derive_seed(cfg.seed, 1)
    first = simulate_flow(ms, init, cfg.replace(t0=s, t1=u, seed=seed2,
                                               record_stride=_whole(cfg, s, u)))
    mid = first.final()
    second = simulate_flow(ms, mid, cfg.replace(t0=u, t1=t, seed=seed2, N=mid.n,
                                               record_stride=_whole(cfg, u, t)))
    return w2(direct.final(), second.final())


def _whole(cfg: SimConfig, a: float, b: float) -> int:
    return cfg.replace(t0=a, t1=b).n_steps


# --- export -----------------------------------------------------------------------

@functools.lru_cache(maxsize=1)
def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        desc = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"mvperiodic {__version__}" + (f" ({desc})" if desc else "")


def export_trajectory(traj: Trajectory, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    snaps = []
    for k, c in enumerate(traj.snapshots):
        name = f"snap_{k:05d}.csv"
        write_csv(c, d / name)
        snaps.append(name)
    bars = None
    if traj.coupled is not None:
        bars = []
        for k, c in enumerate(traj.coupled):
            name = f"coupled_{k:05d}.csv"
            write_csv(c, d / name)
            bars.append(name)
    manifest = {
        "format": "mvperiodic-trajectory/1",
        "model": traj.model.to_dict(),
        "config": traj.config.to_dict(),
        "seed": traj.config.seed,
        "build": build_id(),
        "times": [c.time_stamp for c in traj.snapshots],
        "snapshots": snaps,
        "coupled": bars,
        "meta": traj.meta,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def import_trajectory(directory) -> Trajectory:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    ms = ModelSpec.from_dict(man["model"])
    cfg = SimConfig(**man["config"])
    snaps = [read_csv(d / n) for n in man["snapshots"]]
    bars = [read_csv(d / n) for n in man["coupled"]] if man.get("coupled") else None
    return Trajectory(snaps, cfg, ms, bars, dict(man.get("meta") or {}))
