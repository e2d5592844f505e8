"""Counter-based normal draws keyed by (seed, stream, step, particle block).

Particles are split into fixed blocks of ``BLOCK`` rows. Block ``j`` at step
``k`` of stream ``s`` draws from a Philox generator whose 256-bit counter
starts at ``(j, k, s, 0)``, so the value used by a given particle depends only
on (seed, stream, step, particle, component), never on how blocks are
scheduled across threads.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 16384

STREAM_NOISE = 0
STREAM_RESAMPLE = 1
STREAM_SCAN = 2
STREAM_INIT = 3

THREADS_ENV = "MVPERIODIC_THREADS"

_MASK64 = (1 << 64) - 1


def default_threads() -> int:
    v = os.environ.get(THREADS_ENV)
    if v:
        return max(1, int(v))
    return 1


def max_threads() -> int:
    return os.cpu_count() or 1


def block_generator(seed: int, stream: int, step: int, block: int) -> np.random.Generator:
    key = int(seed) & ((1 << 128) - 1)
    counter = [int(block) & _MASK64, int(step) & _MASK64, int(stream) & _MASK64, 0]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _block_normals(seed, stream, step, j, rows, m):
    return block_generator(seed, stream, step, j).standard_normal((rows, m))


def normals(seed: int, step: int, n: int, m: int, stream: int = STREAM_NOISE,
            threads: int = 1, pool: ThreadPoolExecutor | None = None) -> np.ndarray:
    """Standard normal array of shape (n, m) for one step."""
    nblocks = -(-n // BLOCK)
    sizes = [min(BLOCK, n - j * BLOCK) for j in range(nblocks)]
    if nblocks == 1:
        return _block_normals(seed, stream, step, 0, n, m)
    if pool is not None and threads > 1:
        parts = list(pool.map(lambda j: _block_normals(seed, stream, step, j, sizes[j], m),
                              range(nblocks)))
    else:
        parts = [_block_normals(seed, stream, step, j, sizes[j], m) for j in range(nblocks)]
    return np.concatenate(parts, axis=0)


class CounterNoise:
    """Noise source ``(step, n, m) -> (n, m)`` standard normals."""

    def __init__(self, seed: int, stream: int = STREAM_NOISE, threads: int = 1):
        self.seed = int(seed)
        self.stream = stream
        self.threads = max(1, int(threads))
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def __call__(self, step: int, n: int, m: int) -> np.ndarray:
        return normals(self.seed, step, n, m, self.stream, self.threads, self._pool)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def derive_seed(seed: int, *path: int) -> int:
    """Independent 64-bit seed for a labelled sub-run."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def resample_indices(seed: int, weights: np.ndarray, n: int) -> np.ndarray:
    """n i.i.d. draws from the categorical law ``weights``."""
    g = block_generator(seed, STREAM_RESAMPLE, 0, 0)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, g.random(n), side="right"), len(weights) - 1)
