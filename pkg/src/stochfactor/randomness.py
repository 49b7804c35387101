"""Deterministic, splittable random streams and the two base samplers.

Every Monte Carlo draw in the package comes from a Philox (counter-based)
generator keyed by ``(master_seed, stream_id)``.  Paths are generated in
fixed-size blocks, and block ``j`` of purpose ``p`` always uses the stream
``stream_id(p, j)``.  Results therefore depend only on the seed and the
configuration, never on how many threads execute the blocks.
"""
from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "BLOCK_PATHS",
    "StreamKey",
    "stream_id",
    "make_stream",
    "sample_gaussian",
    "sample_stable",
    "thread_count",
    "map_blocks",
]

#: Number of paths sharing one stream.  Changing it changes every result.
BLOCK_PATHS = 2048

_MASK64 = (1 << 64) - 1
THREADS_ENV = "STOCHFACTOR_THREADS"


def stream_id(purpose: str, index: int = 0) -> int:
    """64-bit stream identifier derived from a purpose label and an index."""
    digest = hashlib.blake2b(f"{purpose}\x00{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    stream_id: int

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) <= _MASK64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {v}")

    @classmethod
    def for_purpose(cls, master_seed: int, purpose: str, index: int = 0) -> "StreamKey":
        return cls(int(master_seed), stream_id(purpose, index))

    def generator(self) -> np.random.Generator:
        return make_stream(self.master_seed, self.stream_id)


def make_stream(master_seed: int, stream_id: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``(master_seed, stream_id)``.

    Identical arguments give identical sequences; distinct pairs give
    streams whose keys are decorrelated through ``SeedSequence`` hashing.
    """
    master_seed = int(master_seed)
    stream_id = int(stream_id)
    if not (0 <= master_seed <= _MASK64 and 0 <= stream_id <= _MASK64):
        raise ValueError("master_seed and stream_id must be 64-bit unsigned integers")
    seq = np.random.SeedSequence([master_seed & 0xFFFFFFFF, master_seed >> 32,
                                  stream_id & 0xFFFFFFFF, stream_id >> 32])
    return np.random.Generator(np.random.Philox(seq))


def sample_gaussian(stream: np.random.Generator, n: int | tuple) -> np.ndarray:
    """``n`` i.i.d. standard normal draws (``n`` may be a shape tuple)."""
    if isinstance(n, (int, np.integer)) and n < 1:
        raise ValueError("n must be >= 1")
    return stream.standard_normal(n)


def _check_gamma(gamma: float) -> None:
    if not (0.0 < gamma < 2.0) or not math.isfinite(gamma):
        raise ValueError(f"stability index gamma must lie in (0, 2), got {gamma}")


def sample_stable(stream: np.random.Generator, gamma: float, scale: float, n: int | tuple) -> np.ndarray:
    """Symmetric gamma-stable draws with characteristic function exp(-scale |xi|^gamma).

    Chambers-Mallows-Stuck transform of a uniform angle and a unit
    exponential; exact, no series truncation.
    """
    _check_gamma(gamma)
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    v = math.pi * (stream.random(n) - 0.5)
    w = stream.standard_exponential(n)
    if gamma == 1.0:
        x = np.tan(v)
    else:
        x = (np.sin(gamma * v) / np.cos(v) ** (1.0 / gamma)
             * (np.cos((1.0 - gamma) * v) / w) ** ((1.0 - gamma) / gamma))
    return scale ** (1.0 / gamma) * x


def thread_count() -> int:
    """Thread cap from ``STOCHFACTOR_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def map_blocks(M: int, seed: int, purpose: str,
               fn: Callable[[np.random.Generator, int], np.ndarray]) -> np.ndarray:
    """Evaluate ``fn(stream, rows)`` per block of paths and stack the results.

    Block ``j`` covers paths ``[j*BLOCK_PATHS, (j+1)*BLOCK_PATHS)`` and is
    fed the stream ``(seed, stream_id(purpose, j))``.  Blocks may run on
    several threads; the output is identical either way.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    starts = list(range(0, M, BLOCK_PATHS))

    def one(j: int) -> np.ndarray:
        rows = min(BLOCK_PATHS, M - starts[j])
        return fn(make_stream(seed, stream_id(purpose, j)), rows)

    first = one(0)
    out = np.empty((M,) + first.shape[1:], dtype=first.dtype)
    out[: first.shape[0]] = first
    del first

    def fill(j: int) -> None:
        part = one(j)
        out[starts[j]: starts[j] + part.shape[0]] = part

    rest = range(1, len(starts))
    threads = min(thread_count(), len(starts))
    if threads == 1:
        for j in rest:
            fill(j)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, rest))
    return out
