"""Counter-based random streams.

A stream is a Philox-4x64 key derived from ``(seed, *path)``; element ``k`` of
a batch always reads the same counter block no matter how the batch is
partitioned, so threaded and serial generation give identical arrays.
Uniforms are mapped to normals and gamma variates by inverse CDF, which keeps
the number of raw words consumed per element fixed.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import special

_WORDS_PER_COUNTER = 4
_MIN_CHUNK = 2048


def _tag(item):
    if isinstance(item, (int, np.integer)):
        return int(item) & 0xFFFFFFFF
    return zlib.crc32(str(item).encode("utf-8"))


def resolve_threads(threads=None):
    """Worker cap: explicit value, else ``MATSTEIN_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get("MATSTEIN_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


class Stream:
    """Keyed counter stream; ``Stream(seed, "mn")`` and ``Stream(seed, "mn", 3)`` are independent."""

    def __init__(self, seed, *path):
        if seed is None:
            raise ValueError("seeds mandatory: a Stream needs an explicit integer seed")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF,
                                    spawn_key=tuple(_tag(p) for p in self.path))
        self._key = ss.generate_state(2, np.uint64)

    def child(self, *path):
        return Stream(self.seed, *(self.path + path))

    def raw(self, start, count, words):
        """Raw ``uint64`` words for elements ``start .. start+count-1``, shape (count, words)."""
        padded = -(-words // _WORDS_PER_COUNTER) * _WORDS_PER_COUNTER
        bg = np.random.Philox(key=self._key)
        if start:
            bg.advance(int(start) * (padded // _WORDS_PER_COUNTER))
        out = bg.random_raw(count * padded).reshape(count, padded)
        return out[:, :words]

    def uniform(self, count, words, start=0, threads=None):
        """Open-interval uniforms in (0, 1), shape (count, words)."""
        threads = resolve_threads(threads)
        if threads == 1 or count < 2 * _MIN_CHUNK:
            return _to_unit(self.raw(start, count, words))
        edges = np.linspace(0, count, min(threads * 4, count // _MIN_CHUNK) + 1).astype(int)
        out = np.empty((count, words))

        def fill(i):
            a, b = int(edges[i]), int(edges[i + 1])
            out[a:b] = _to_unit(self.raw(start + a, b - a, words))

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(len(edges) - 1)))
        return out

    def normal(self, count, words, start=0, threads=None):
        return special.ndtri(self.uniform(count, words, start=start, threads=threads))

    def chi2(self, dof, count, start=0, threads=None):
        """Chi-square draws, one per element; ``dof`` broadcasts along a trailing axis."""
        dof = np.atleast_1d(np.asarray(dof, dtype=float))
        u = self.uniform(count, dof.size, start=start, threads=threads)
        return 2.0 * special.gammaincinv(0.5 * dof, u)


def _to_unit(words):
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def default_rng(seed, *path):
    """Ordinary ``numpy`` Generator for non-batch randomness (anchors, probe families)."""
    if seed is None:
        raise ValueError("seeds mandatory")
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_tag(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
