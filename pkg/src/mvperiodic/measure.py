"""Weighted particle clouds and distances between them."""
from __future__ import annotations

import csv
import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WEIGHT_TOL = 1e-12
MAX_MOMENT_ORDER = 8
OMEGA_MAX_SUPPORT = 12
BINARY_MAGIC = b"MVPC1"


def stable_sum(terms: np.ndarray) -> float:
    """Sum with a result that does not depend on the order of ``terms``.

    Terms are sorted by value and then reduced with numpy's pairwise
    summation, so any permutation of the input gives the same bits.
    """
    terms = np.asarray(terms, dtype=float).reshape(-1)
    return float(np.sum(np.sort(terms)))


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Weighted empirical measure ``sum_i w_i delta_{x_i}`` at a model time."""

    positions: np.ndarray
    weights: np.ndarray
    time_stamp: float = 0.0
    _check: bool = field(default=True, repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float, copy=True)
        if pos.ndim == 1:
            pos = pos.reshape(-1, 1)
        w = np.array(self.weights, dtype=float, copy=True).reshape(-1)
        if self._check:
            if pos.ndim != 2 or pos.shape[0] < 1:
                raise ValueError("positions must be a nonempty (N, d) array")
            if w.shape[0] != pos.shape[0]:
                raise ValueError("weights and positions disagree on N")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > WEIGHT_TOL * max(1, len(w) / 1e4):
                raise ValueError(f"weights sum to {w.sum()!r}, not 1")
            if not np.all(np.isfinite(pos)):
                raise ValueError("positions must be finite")
        pos.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "time_stamp", float(self.time_stamp))

    @classmethod
    def uniform(cls, positions, time_stamp: float = 0.0) -> "ParticleCloud":
        pos = np.asarray(positions, dtype=float)
        if pos.ndim == 1:
            pos = pos.reshape(-1, 1)
        n = pos.shape[0]
        return cls(pos, np.full(n, 1.0 / n), time_stamp)

    @classmethod
    def dirac(cls, x, time_stamp: float = 0.0) -> "ParticleCloud":
        return cls.uniform(np.asarray(x, dtype=float).reshape(1, -1), time_stamp)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def at(self, time_stamp: float) -> "ParticleCloud":
        return ParticleCloud(self.positions, self.weights, time_stamp, _check=False)

    def __eq__(self, other):
        if not isinstance(other, ParticleCloud):
            return NotImplemented
        return (self.time_stamp == other.time_stamp
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.weights, other.weights))

    __hash__ = None


def mixture(parts, coefs) -> ParticleCloud:
    """Concatenate clouds with weights scaled by ``coefs`` (which sum to 1)."""
    pos = np.vstack([p.positions for p in parts])
    w = np.concatenate([c * p.weights for p, c in zip(parts, coefs)])
    return ParticleCloud(pos, w / w.sum(), parts[0].time_stamp)


@dataclass(frozen=True)
class LiftedPoint:
    """A state ``(x, mu)`` of the lifted space R^d x P(R^d)."""

    x: np.ndarray
    mu: ParticleCloud

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if x.size != self.mu.d:
            raise ValueError("point and cloud dimensions differ")
        object.__setattr__(self, "x", x)


# --- moments ------------------------------------------------------------------

def monomials(positions: np.ndarray, alpha) -> np.ndarray:
    alpha = tuple(int(a) for a in alpha)
    out = np.ones(positions.shape[0])
    for j, a in enumerate(alpha):
        col = positions[:, j]
        for _ in range(a):
            out = out * col
    return out


def moment(mu: ParticleCloud, alpha) -> float:
    """Weighted moment ``sum_i w_i x_i**alpha``."""
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != mu.d:
        raise ValueError(f"multi-index {alpha} does not match d={mu.d}")
    if sum(alpha) > MAX_MOMENT_ORDER or min(alpha) < 0:
        raise ValueError(f"multi-index {alpha} outside 0..{MAX_MOMENT_ORDER}")
    return stable_sum(mu.weights * monomials(mu.positions, alpha))


def moments(mu: ParticleCloud, alphas) -> dict:
    return {a: moment(mu, a) for a in alphas}


def second_moment_norm(mu: ParticleCloud) -> float:
    """|mu|_2 = (int |x|^2 dmu)^(1/2)."""
    sq = np.einsum("ij,ij->i", mu.positions, mu.positions)
    return math.sqrt(stable_sum(mu.weights * sq))


# --- transport distances --------------------------------------------------------

def _quantile_coupling(mu: ParticleCloud, nu: ParticleCloud):
    """Return (masses, x_mu, x_nu) of the monotone coupling of two 1-D clouds."""
    if mu.d != 1 or nu.d != 1:
        raise ValueError("exact transport is implemented for d = 1 only")
    ia = np.argsort(mu.positions[:, 0], kind="stable")
    ib = np.argsort(nu.positions[:, 0], kind="stable")
    xa, wa = mu.positions[ia, 0], mu.weights[ia]
    xb, wb = nu.positions[ib, 0], nu.weights[ib]
    if mu.n == nu.n and mu.is_uniform() and nu.is_uniform():
        return wa, xa, xb
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    cuts = np.union1d(ca, cb)
    # cumulative sums of equal measures written differently disagree in the
    # last bits; merge such near-coincident cuts instead of pairing slivers
    eps = min(1e-10, 0.25 * min(wa.min(), wb.min()))
    cuts = cuts[np.diff(cuts, prepend=0.0) > eps]
    cuts[-1] = 1.0
    masses = np.diff(np.concatenate(([0.0], cuts)))
    mid = cuts - masses / 2
    ja = np.minimum(np.searchsorted(ca, mid, side="left"), len(xa) - 1)
    jb = np.minimum(np.searchsorted(cb, mid, side="left"), len(xb) - 1)
    return masses, xa[ja], xb[jb]


def wasserstein_p_1d(mu: ParticleCloud, nu: ParticleCloud, p: float = 2.0) -> float:
    """Exact W_p between 1-D clouds through the quantile coupling."""
    masses, xa, xb = _quantile_coupling(mu, nu)
    cost = stable_sum(masses * np.abs(xa - xb) ** p)
    return max(cost, 0.0) ** (1.0 / p)


def wasserstein2_1d(mu: ParticleCloud, nu: ParticleCloud) -> float:
    return wasserstein_p_1d(mu, nu, 2.0)


def random_directions(d: int, n_proj: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 7, 0]))
    u = rng.standard_normal((n_proj, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_wasserstein2(mu: ParticleCloud, nu: ParticleCloud, n_proj: int = 64, seed: int = 0) -> float:
    """Root-mean-square of 1-D W_2 along random directions (lower bound of W_2)."""
    if mu.d != nu.d:
        raise ValueError("dimension mismatch")
    if mu.d < 2:
        raise ValueError("use wasserstein2_1d for d = 1")
    if n_proj < 1:
        raise ValueError("n_proj must be positive")
    dirs = random_directions(mu.d, n_proj, seed)
    sq = []
    for u in dirs:
        a = ParticleCloud(mu.positions @ u, mu.weights, _check=False)
        b = ParticleCloud(nu.positions @ u, nu.weights, _check=False)
        sq.append(wasserstein2_1d(a, b) ** 2)
    return math.sqrt(sum(sq) / len(sq))


def w2(mu: ParticleCloud, nu: ParticleCloud, n_proj: int = 64, seed: int = 0) -> float:
    """Exact W_2 in 1-D, sliced surrogate otherwise."""
    if mu.d == 1:
        return wasserstein2_1d(mu, nu)
    return sliced_wasserstein2(mu, nu, n_proj, seed)


def levy_prohorov_upper(mu: ParticleCloud, nu: ParticleCloud, p: int = 2):
    """Upper bound W_p**(p/(p+1)) on the Levy-Prohorov distance.

    Returns ``(bound, exact)``; ``exact`` is False when the sliced surrogate
    was used for d > 1, in which case the value is not a certified bound.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    if mu.d == 1:
        wp, exact = wasserstein_p_1d(mu, nu, p), True
    else:
        wp, exact = sliced_wasserstein2(mu, nu), False
    return wp ** (p / (p + 1.0)), exact


def omega_small(mu: ParticleCloud, nu: ParticleCloud) -> float:
    """Exact Levy-Prohorov distance between two small discrete measures.

    Closed sets may be restricted to subsets of the supports. Between two
    consecutive pairwise distances the open inflations A^delta are fixed, so
    the admissible deltas on each interval are found in closed form and the
    infimum is the left end of the first admissible interval.
    """
    if mu.d != nu.d:
        raise ValueError("dimension mismatch")
    pa, wa = _merge_atoms(mu)
    pb, wb = _merge_atoms(nu)
    if len(pa) + len(pb) > OMEGA_MAX_SUPPORT:
        raise ValueError(f"combined support exceeds {OMEGA_MAX_SUPPORT} atoms")
    dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    levels = np.unique(np.concatenate(([0.0], dist.ravel())))

    def worst_gap(src_w, dst_w, dmat, level):
        # max over subsets A of src support of src(A) - dst(A^delta),
        # with A^delta = {dist <= level} on this interval
        reach = dmat <= level
        best = 0.0
        k = len(src_w)
        for r in range(1, k + 1):
            for A in itertools.combinations(range(k), r):
                covered = np.any(reach[list(A)], axis=0)
                best = max(best, src_w[list(A)].sum() - dst_w[covered].sum())
        return best

    for j, lo in enumerate(levels):
        hi = levels[j + 1] if j + 1 < len(levels) else math.inf
        need = max(worst_gap(wa, wb, dist, lo), worst_gap(wb, wa, dist.T, lo))
        start = max(lo, need)
        # admissible deltas on (lo, hi] are those strictly above `need`
        if start < hi:
            return float(min(start, 1.0))
    return 1.0


def _merge_atoms(mu: ParticleCloud):
    keys, inv = np.unique(mu.positions, axis=0, return_inverse=True)
    w = np.zeros(len(keys))
    np.add.at(w, inv.reshape(-1), mu.weights)
    keep = w > 0
    return keys[keep], w[keep]


# --- tails --------------------------------------------------------------------

def tail_mass(mu: ParticleCloud, R: float) -> float:
    """Weight of particles with |x| > R."""
    if R <= 0:
        raise ValueError("R must be positive")
    r = np.linalg.norm(mu.positions, axis=1)
    return stable_sum(mu.weights[r > R])


def lifted_in_tail(lp: LiftedPoint, R: float) -> bool:
    """Membership of (x, mu) in {|x| v |mu|_2 > R}."""
    if R <= 0:
        raise ValueError("R must be positive")
    return bool(max(float(np.linalg.norm(lp.x)), second_moment_norm(lp.mu)) > R)


def second_moment_tail(mu: ParticleCloud, radius: float) -> float:
    """int_{|x| > radius} |x|^2 dmu, the uniform-integrability statistic."""
    r = np.linalg.norm(mu.positions, axis=1)
    return stable_sum(mu.weights[r > radius] * r[r > radius] ** 2)


# --- serialization ----------------------------------------------------------------

def write_csv(mu: ParticleCloud, path) -> None:
    path = Path(path)
    header = ["t", "w"] + [f"x{j + 1}" for j in range(mu.d)]
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        t = repr(mu.time_stamp)
        for w, x in zip(mu.weights, mu.positions):
            wr.writerow([t, repr(float(w))] + [repr(float(v)) for v in x])


def read_csv(path) -> ParticleCloud:
    with Path(path).open(newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if not header or header[:2] != ["t", "w"] or not header[2:]:
            raise ValueError(f"{path}: expected header t,w,x1[,x2,x3]")
        rows = [list(map(float, r)) for r in rd if r]
    if not rows:
        raise ValueError(f"{path}: no particles")
    arr = np.array(rows)
    return ParticleCloud(arr[:, 2:], arr[:, 1], float(arr[0, 0]))


def write_binary(mu: ParticleCloud, path) -> None:
    """Columnar dump: magic, uint32 N, uint32 d, f64 t, then w, x1.. as f64 LE."""
    with Path(path).open("wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IId", mu.n, mu.d, mu.time_stamp))
        fh.write(mu.weights.astype("<f8").tobytes())
        for j in range(mu.d):
            fh.write(np.ascontiguousarray(mu.positions[:, j]).astype("<f8").tobytes())


def read_binary(path) -> ParticleCloud:
    raw = Path(path).read_bytes()
    if raw[:5] != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic")
    n, d, t = struct.unpack_from("<IId", raw, 5)
    off = 5 + struct.calcsize("<IId")
    cols = np.frombuffer(raw, dtype="<f8", count=n * (d + 1), offset=off).reshape(d + 1, n)
    return ParticleCloud(cols[1:].T.copy(), cols[0].copy(), t)


def normal_cloud(n: int, mean, std: float = 1.0, seed: int = 0, time_stamp: float = 0.0) -> ParticleCloud:
    """n i.i.d. draws from N(mean, std^2 I) as a uniform cloud (deterministic in seed)."""
    from .rng import STREAM_INIT, block_generator
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    g = block_generator(seed, STREAM_INIT, 0, 0)
    pts = mean + std * g.standard_normal((int(n), mean.size))
    return ParticleCloud.uniform(pts, time_stamp)
