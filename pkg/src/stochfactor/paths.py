"""Time grids and ensembles of simulated driving processes.

All simulators share one convention: left-point (predictable)
discretization, paths stored as an ``M x (N+1)`` matrix whose column 0 is
the initial value, and per-block random streams from
:mod:`stochfactor.randomness`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .levy import AtomicLevyMeasure, PowerLawLevyMeasure
from .randomness import (BLOCK_PATHS, make_stream, map_blocks, sample_gaussian,
                         sample_stable, stream_id)

log = logging.getLogger(__name__)

__all__ = [
    "TimeGrid", "JumpRecords", "PathEnsemble", "VolterraKernel", "SimulationError",
    "fbm_covariance", "simulate_brownian", "simulate_fbm", "simulate_volterra",
    "simulate_diffusion", "simulate_stable_levy", "simulate_poisson", "simulate_mixed",
    "coarsen",
]


class SimulationError(RuntimeError):
    """Numerical failure while generating an ensemble."""


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"steps N must be a positive integer, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t

    @property
    def left_nodes(self) -> np.ndarray:
        return self.nodes[:-1]


@dataclass(frozen=True, eq=False)
class JumpRecords:
    """Jumps above ``eps`` for every path, stored flat and sorted by (path, time)."""

    M: int
    path_index: np.ndarray
    times: np.ndarray
    sizes: np.ndarray
    eps: float
    measure: object

    def __post_init__(self):
        n = len(self.path_index)
        if len(self.times) != n or len(self.sizes) != n:
            raise ValueError("jump record arrays must have equal length")

    def for_path(self, m: int) -> list[tuple[float, float]]:
        lo, hi = np.searchsorted(self.path_index, [m, m + 1])
        return list(zip(self.times[lo:hi].tolist(), self.sizes[lo:hi].tolist()))

    def counts(self) -> np.ndarray:
        return np.bincount(self.path_index, minlength=self.M)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``M`` sample paths of one driver on a shared :class:`TimeGrid`."""

    grid: TimeGrid
    paths: np.ndarray
    label: str
    x0: float = 0.0
    increments: Optional[np.ndarray] = None
    jumps: Optional[JumpRecords] = None
    seed: Optional[dict] = None
    components: tuple = field(default=())

    def __post_init__(self):
        p = self.paths
        if p.ndim != 2 or p.shape[1] != self.grid.N + 1:
            raise ValueError(f"paths must be M x {self.grid.N + 1}, got {p.shape}")
        if p.shape[0] and not np.all(p[:, 0] == self.x0):
            raise ValueError("column 0 must equal the initial value on every path")
        if self.increments is not None and self.increments.shape != (p.shape[0], self.grid.N):
            raise ValueError("underlying increments must be M x N")
        if self.jumps is not None:
            if self.jumps.M != p.shape[0]:
                raise ValueError("jump records do not match the ensemble size")
            if len(self.jumps.times) and not (np.all(self.jumps.times > 0)
                                              and np.all(self.jumps.times <= self.grid.T)):
                raise ValueError("jump times must lie in (0, T]")
        p.setflags(write=False)

    @property
    def M(self) -> int:
        return self.paths.shape[0]

    @property
    def dX(self) -> np.ndarray:
        """Increments of the paths themselves (not the driving noise)."""
        return np.diff(self.paths, axis=1)

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[:, -1]

    def same_grid(self, other: "PathEnsemble") -> bool:
        return self.grid == other.grid and self.M == other.M


@dataclass(frozen=True)
class VolterraKernel:
    """Kernel ``K(t, s)`` on ``0 <= s <= t <= T``; ``fn`` must accept arrays."""

    fn: Callable
    label: str = "K"

    def matrix(self, grid: TimeGrid) -> np.ndarray:
        """``A[j-1, i] = K(t_j, t_i)`` for ``i < j``, zero elsewhere (left-point scheme)."""
        t = grid.nodes
        tj, si = np.meshgrid(t[1:], t[:-1], indexing="ij")
        vals = np.broadcast_to(np.asarray(self.fn(tj, si), dtype=float), tj.shape)
        A = np.where(si < tj, vals, 0.0)
        if not np.all(np.isfinite(A)):
            raise ValueError(f"kernel {self.label} is not finite on the simulation grid")
        return A

    def grid_l2(self, grid: TimeGrid) -> float:
        """Discrete square-integrability check: max_j sum_{i<j} K(t_j, t_i)^2 dt."""
        A = self.matrix(grid)
        return float(np.max(np.sum(A * A, axis=1)) * grid.dt)


def _seed_meta(seed: int, purpose: str) -> dict:
    return {"master_seed": int(seed), "purpose": purpose}


def _brownian_increments(grid: TimeGrid, M: int, seed: int, purpose: str) -> np.ndarray:
    sd = math.sqrt(grid.dt)
    return map_blocks(M, seed, purpose, lambda rng, rows: sample_gaussian(rng, (rows, grid.N)) * sd)


def simulate_brownian(grid: TimeGrid, M: int, seed: int, purpose: str = "W") -> PathEnsemble:
    """Standard Brownian motion started at 0; increments retained."""
    dW = _brownian_increments(grid, M, seed, purpose)
    X = np.zeros((M, grid.N + 1))
    for i in range(grid.N):
        X[:, i + 1] = X[:, i] + dW[:, i]
    return PathEnsemble(grid, X, "brownian", 0.0, dW, seed=_seed_meta(seed, purpose))


def fbm_covariance(t: np.ndarray, s: np.ndarray, H: float) -> np.ndarray:
    """``R_H(s, t) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2``."""
    h2 = 2.0 * H
    return 0.5 * (np.abs(s) ** h2 + np.abs(t) ** h2 - np.abs(t - s) ** h2)


def _check_hurst(H: float) -> None:
    if not (0.0 < H < 1.0):
        raise ValueError(f"Hurst parameter must lie in (0, 1), got {H}")


def simulate_fbm(grid: TimeGrid, H: float, M: int, seed: int, purpose: str = "fbm") -> PathEnsemble:
    """Exact fBM on the grid by Cholesky factorization of the covariance matrix."""
    _check_hurst(H)
    t = grid.nodes[1:]
    C = fbm_covariance(t[:, None], t[None, :], H)
    jitter = 0.0
    scale = np.trace(C) / len(t)
    for _ in range(6):
        try:
            L = np.linalg.cholesky(C + jitter * np.eye(len(t)))
            break
        except np.linalg.LinAlgError:
            jitter = scale * (1e-14 if jitter == 0.0 else jitter / scale * 10.0)
    else:
        raise SimulationError(
            f"fBM covariance (H={H}, N={grid.N}) not positive definite after jitter {jitter:.3e}")
    if jitter:
        log.warning("fBM covariance regularized with jitter %.3e", jitter)

    def block(rng, rows):
        return sample_gaussian(rng, (rows, grid.N)) @ L.T

    X = np.zeros((M, grid.N + 1))
    X[:, 1:] = map_blocks(M, seed, purpose, block)
    return PathEnsemble(grid, X, f"fbm(H={H})", seed=_seed_meta(seed, purpose))


def simulate_volterra(grid: TimeGrid, kernel: VolterraKernel, M: int, seed: int,
                      purpose: str = "W") -> PathEnsemble:
    """``X_{t_j} = sum_{i<j} K(t_j, t_i) dW_i``; driving increments retained."""
    A = kernel.matrix(grid)
    dW = _brownian_increments(grid, M, seed, purpose)
    X = np.zeros((M, grid.N + 1))
    X[:, 1:] = dW @ A.T
    return PathEnsemble(grid, X, f"volterra({kernel.label})", 0.0, dW, seed=_seed_meta(seed, purpose))


def _as_column(v, like: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=float), like.shape)


def simulate_diffusion(grid: TimeGrid, b: Callable, sigma: Callable, x0: float, M: int, seed: int,
                       purpose: str = "W") -> PathEnsemble:
    """Euler-Maruyama for ``dX = b(X) dt + sigma(X) dW``.

    ``b`` and ``sigma`` are evaluated on arrays of states.  With the same
    seed and purpose as :func:`simulate_brownian`, ``b = 0, sigma = 1``
    reproduces the Brownian paths bit for bit.
    """
    dW = _brownian_increments(grid, M, seed, purpose)
    dt = grid.dt
    X = np.empty((M, grid.N + 1))
    X[:, 0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(grid.N):
            x = X[:, i]
            X[:, i + 1] = x + _as_column(b(x), x) * dt + _as_column(sigma(x), x) * dW[:, i]
    bad = ~np.all(np.isfinite(X), axis=1)
    if bad.any():
        raise SimulationError(f"diffusion diverged on {int(bad.sum())} of {M} paths "
                              f"(first: {np.flatnonzero(bad)[:5].tolist()})")
    return PathEnsemble(grid, X, "diffusion", float(x0), dW, seed=_seed_meta(seed, purpose))


def _sample_jumps(grid: TimeGrid, M: int, seed: int, purpose: str, measure, eps: float) -> JumpRecords:
    """Poisson random measure of jumps with ``|z| > eps`` on (0, T], block by block."""
    lam = measure.tail_mass(eps) * grid.T
    idx, times, sizes = [], [], []
    for j, start in enumerate(range(0, M, BLOCK_PATHS)):
        rows = min(BLOCK_PATHS, M - start)
        rng = make_stream(seed, stream_id(purpose, j))
        counts = rng.poisson(lam, rows)
        n = int(counts.sum())
        idx.append(np.repeat(np.arange(start, start + rows), counts))
        times.append(grid.T * (1.0 - rng.random(n)))
        sizes.append(measure.sample_sizes(rng, n, eps))
    path_index = np.concatenate(idx)
    t = np.concatenate(times)
    z = np.concatenate(sizes)
    order = np.lexsort((t, path_index))
    return JumpRecords(M, path_index[order], t[order], z[order], eps, measure)


def _jump_steps(grid: TimeGrid, jumps: JumpRecords) -> np.ndarray:
    """Index ``i`` of the step (t_i, t_{i+1}] containing each jump."""
    i = np.ceil(jumps.times / grid.dt).astype(np.int64) - 1
    return np.clip(i, 0, grid.N - 1)


def _accumulate_jumps(grid: TimeGrid, jumps: JumpRecords) -> np.ndarray:
    inc = np.zeros((jumps.M, grid.N))
    np.add.at(inc, (jumps.path_index, _jump_steps(grid, jumps)), jumps.sizes)
    return inc


def simulate_stable_levy(grid: TimeGrid, gamma: float, c_gamma: float, M: int, seed: int,
                         purpose: str = "L", expected_jumps: float = 32.0,
                         coupling: str = "exact_law") -> PathEnsemble:
    """Symmetric gamma-stable Levy process with exponent ``c_gamma |xi|^gamma``.

    ``expected_jumps`` fixes the truncation ``eps`` through
    ``T * nu(|z| > eps) = expected_jumps`` (at most 1000).  Jumps above
    ``eps`` are recorded for the compensated Poisson integral.

    ``coupling="exact_law"`` draws increments exactly by Chambers-Mallows-Stuck
    and the recorded jumps as an exact Poisson random measure from a separate
    stream; the two are not pathwise linked.  ``coupling="jump_consistent"``
    builds each increment as the recorded big jumps plus a Gaussian
    small-jump part with variance ``dt * int_{|z|<=eps} z^2 nu(dz)``, so the
    records are exactly the path's jumps while the increment law is
    approximate.
    """
    if not (0.0 < gamma < 2.0):
        raise ValueError(f"stability index gamma must lie in (0, 2), got {gamma}")
    if not c_gamma > 0:
        raise ValueError("c_gamma must be positive")
    if not (0 < expected_jumps <= 1000):
        raise ValueError("expected_jumps must lie in (0, 1000]")
    if coupling not in ("exact_law", "jump_consistent"):
        raise ValueError(f"unknown coupling {coupling!r}")
    nu = PowerLawLevyMeasure.from_char_scale(c_gamma, gamma)
    eps = nu.threshold_for_mass(expected_jumps / grid.T)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        jumps = _sample_jumps(grid, M, seed, purpose + "/jumps", nu, eps)
        if coupling == "exact_law":
            inc = map_blocks(M, seed, purpose,
                             lambda rng, rows: sample_stable(rng, gamma, c_gamma * grid.dt, (rows, grid.N)))
        else:
            sd = math.sqrt(nu.small_jump_variance(eps) * grid.dt)
            inc = map_blocks(M, seed, purpose, lambda rng, rows: sample_gaussian(rng, (rows, grid.N)) * sd)
            inc += _accumulate_jumps(grid, jumps)
        X = np.zeros((M, grid.N + 1))
        np.cumsum(inc, axis=1, out=X[:, 1:])
    del inc
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(jumps.sizes))):
        raise SimulationError(f"stable paths (gamma={gamma}) overflow double precision")
    return PathEnsemble(grid, X, f"stable(gamma={gamma})", jumps=jumps,
                        seed=_seed_meta(seed, purpose))


def simulate_poisson(grid: TimeGrid, rate: float, M: int, seed: int, jump_size: float = 1.0,
                     purpose: str = "N") -> PathEnsemble:
    """Compound Poisson process with constant jumps (finite-activity test driver)."""
    if not rate > 0:
        raise ValueError("rate must be positive")
    nu = AtomicLevyMeasure((float(jump_size),), (float(rate),))
    jumps = _sample_jumps(grid, M, seed, purpose, nu, 0.0)
    X = np.zeros((M, grid.N + 1))
    np.cumsum(_accumulate_jumps(grid, jumps), axis=1, out=X[:, 1:])
    return PathEnsemble(grid, X, f"poisson(rate={rate})", jumps=jumps, seed=_seed_meta(seed, purpose))


def simulate_mixed(grid: TimeGrid, alpha: float, beta: float, component_a: PathEnsemble,
                   component_b: PathEnsemble) -> PathEnsemble:
    """Pathwise ``alpha * a + beta * b`` of two independent ensembles."""
    for comp in (component_a, component_b):
        if comp.grid != grid:
            raise ValueError("component grid does not match the requested grid")
    if component_a.M != component_b.M:
        raise ValueError(f"ensemble sizes differ: {component_a.M} vs {component_b.M}")
    if component_a.seed is not None and component_a.seed == component_b.seed:
        raise ValueError("components share a random stream; they must be independent")
    X = alpha * component_a.paths + beta * component_b.paths
    x0 = alpha * component_a.x0 + beta * component_b.x0
    label = f"mixed({alpha}*{component_a.label}+{beta}*{component_b.label})"
    return PathEnsemble(grid, X, label, x0, seed={"components": [component_a.seed, component_b.seed]},
                        components=(component_a, component_b))


def coarsen(ens: PathEnsemble, factor: int) -> PathEnsemble:
    """Same paths observed on every ``factor``-th node (common random numbers)."""
    if ens.grid.N % factor:
        raise ValueError("factor must divide N")
    grid = TimeGrid(ens.grid.T, ens.grid.N // factor)
    inc = None
    if ens.increments is not None:
        inc = ens.increments.reshape(ens.M, grid.N, factor).sum(axis=2)
    return PathEnsemble(grid, np.ascontiguousarray(ens.paths[:, ::factor]), ens.label, ens.x0, inc,
                        ens.jumps, ens.seed, ens.components)
