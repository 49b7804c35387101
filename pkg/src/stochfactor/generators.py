"""PDE-side checks: Fourier-multiplier evolution and the backward Kolmogorov equation.

The mixed generator ``(alpha^2/2) d^2 - c beta^gamma (-d^2)^{gamma/2}`` acts
diagonally in Fourier space, so :func:`spectral_evolve` applies the exact
multiplier on a periodic box.  :func:`kolmogorov_solve` marches the
backward equation for a one-dimensional diffusion with Crank-Nicolson.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, stats

from .levy import stable_density_constant
from .paths import TimeGrid, simulate_brownian
from .randomness import StreamKey, map_blocks, sample_gaussian, sample_stable
from .reports import IdentityReport, ratio_report

__all__ = [
    "SpectralField", "GeneratorParams", "KolmogorovGrid", "KolmogorovSolution", "SmoothingEstimate",
    "InstabilityError", "spectral_evolve", "tail_probability", "wrap_bound", "choose_box",
    "mc_smoothing", "kolmogorov_solve", "feynman_kac_check", "heat_kernel_convolution",
    "cauchy_gaussian_convolution",
]


class InstabilityError(FloatingPointError):
    """Backward march grew beyond ten times the terminal sup-norm."""


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Samples on the periodic grid ``x_k = -L + 2L k / n``, ``k = 0..n-1``."""

    L: float
    values: np.ndarray

    def __post_init__(self):
        n = len(self.values)
        if not self.L > 0:
            raise ValueError("box half-width must be positive")
        if n < 16 or n & (n - 1):
            raise ValueError(f"resolution must be a power of two >= 16, got {n}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @classmethod
    def from_function(cls, f: Callable, L: float, n: int) -> "SpectralField":
        x = -L + 2.0 * L * np.arange(n) / n
        return cls(L, np.asarray(f(x), dtype=float))

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def x(self) -> np.ndarray:
        return -self.L + self.dx * np.arange(self.n)

    def mass(self) -> float:
        return float(np.sum(self.values) * self.dx)

    def at(self, x) -> np.ndarray:
        """Linear interpolation of the periodic field."""
        xp = np.append(self.x, self.L)
        fp = np.append(self.values, self.values[0])
        return np.interp(np.asarray(x, dtype=float), xp, fp)


@dataclass(frozen=True)
class GeneratorParams:
    """Weights of the Brownian (``alpha``) and stable (``beta``) parts."""

    alpha: float
    beta: float
    gamma: float = 1.5
    c_gamma: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")
        if not (0.0 < self.gamma < 2.0):
            raise ValueError(f"gamma must lie in (0, 2), got {self.gamma}")
        if not self.c_gamma > 0:
            raise ValueError("c_gamma must be positive")

    def exponent(self, xi) -> np.ndarray:
        """``psi(xi) = (alpha^2/2) xi^2 + c beta^gamma |xi|^gamma``."""
        a = np.abs(np.asarray(xi, dtype=float))
        return 0.5 * self.alpha ** 2 * a ** 2 + self.c_gamma * self.beta ** self.gamma * a ** self.gamma


def spectral_evolve(f0: SpectralField, t: float, params: GeneratorParams) -> SpectralField:
    """Apply ``exp(-t psi(xi))`` to the discrete Fourier coefficients of ``f0``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return SpectralField(f0.L, f0.values.copy())
    xi = 2.0 * math.pi * np.fft.rfftfreq(f0.n, d=f0.dx)
    out = np.fft.irfft(np.fft.rfft(f0.values) * np.exp(-t * params.exponent(xi)), n=f0.n)
    return SpectralField(f0.L, out)


def _stable_tail(r: float, scale: float, gamma: float, c: float = 1.0) -> float:
    """``P(|S| >= r)`` for symmetric stable ``S`` with exponent ``scale * c |xi|^gamma``."""
    if r <= 0:
        return 1.0
    s = (scale * c) ** (1.0 / gamma)  # scipy scale parameter
    if gamma == 1.0:
        return float(2.0 / math.pi * math.atan(s / r))
    exact = float(2.0 * stats.levy_stable.sf(r / s, gamma, 0.0))
    # Power-law tail mass t * nu(|z| > r) dominates asymptotically; keep the larger.
    asym = 2.0 * stable_density_constant(scale * c, gamma) * r ** (-gamma) / gamma
    return min(1.0, max(exact, asym) if math.isfinite(exact) else asym)


def tail_probability(r: float, t: float, params: GeneratorParams) -> float:
    """Upper bound on ``P(|alpha B_t + beta L_t| >= r)`` (union bound when both parts are present)."""
    if r <= 0 or t == 0:
        return 1.0 if r <= 0 else 0.0
    p = params
    if p.beta == 0:
        return float(2.0 * stats.norm.sf(r / (p.alpha * math.sqrt(t))))
    if p.alpha == 0:
        return _stable_tail(r / p.beta, t, p.gamma, p.c_gamma)
    return min(1.0, float(2.0 * stats.norm.sf(0.5 * r / (p.alpha * math.sqrt(t))))
               + _stable_tail(0.5 * r / p.beta, t, p.gamma, p.c_gamma))


def wrap_bound(x, t: float, params: GeneratorParams, L: float, support: float, sup_f: float,
               tail_sup: float = 0.0) -> np.ndarray:
    """Periodization error bound for ``E[f(x + X_t)]`` computed on ``[-L, L)``.

    ``f`` is treated as supported in ``[-support, support]`` up to
    ``tail_sup = sup_{|y| > support} |f(y)|``.  A periodic copy can only
    contribute when ``|X_t| >= 2L - support - |x|``.
    """
    x = np.atleast_1d(np.abs(np.asarray(x, dtype=float)))
    probs = np.array([tail_probability(2.0 * L - support - xi, t, params) for xi in x])
    return sup_f * probs + 2.0 * tail_sup


def choose_box(t: float, params: GeneratorParams, support: float, probe_radius: float, sup_f: float = 1.0,
               target: float = 1e-4) -> float:
    """Smallest ``L`` (doubling from ``support + probe_radius``) whose wrap bound is below ``target``."""
    L = max(support + probe_radius, 1.0)
    for _ in range(60):
        if wrap_bound(probe_radius, t, params, L, support, sup_f)[0] <= target:
            return L
        L *= 2.0
    raise ValueError("no box size meets the wrap-around target")


@dataclass(frozen=True, eq=False)
class SmoothingEstimate:
    values: np.ndarray
    se: np.ndarray


def mc_smoothing(f: Callable, t: float, params: GeneratorParams, x_grid, M: int, seed,
                 purpose: str = "smoothing") -> SmoothingEstimate:
    """Per-point mean and standard error of ``f(x + alpha B_t + beta L_t)``.

    All grid points share the same samples.  ``seed`` is a master seed or a
    :class:`StreamKey` (whose stream id then tags the purpose).
    """
    if isinstance(seed, StreamKey):
        master, purpose = seed.master_seed, f"{purpose}/{seed.stream_id}"
    else:
        master = int(seed)
    p = params

    def draw(rng, rows):
        out = np.zeros(rows)
        if p.alpha > 0:
            out += p.alpha * math.sqrt(t) * sample_gaussian(rng, rows)
        if p.beta > 0 and t > 0:
            out += sample_stable(rng, p.gamma, t * p.c_gamma * p.beta ** p.gamma, rows)
        return out

    Y = map_blocks(M, master, purpose, draw)
    xs = np.atleast_1d(np.asarray(x_grid, dtype=float))
    mean = np.empty(len(xs))
    se = np.empty(len(xs))
    for j, x in enumerate(xs):
        v = np.asarray(f(x + Y), dtype=float)
        v = np.broadcast_to(v, Y.shape)
        mean[j] = v.mean()
        se[j] = v.std(ddof=1) / math.sqrt(M) if M > 1 else math.inf
    return SmoothingEstimate(mean, se)


def heat_kernel_convolution(mu: float, var0: float, t: float, alpha: float = 1.0) -> Callable:
    """Density of ``N(mu, var0) * N(0, alpha^2 t)`` as a function of ``x``."""
    return stats.norm(mu, math.sqrt(var0 + alpha ** 2 * t)).pdf


def cauchy_gaussian_convolution(var0: float, t: float, c: float = 1.0) -> Callable:
    """Density of ``N(0, var0)`` convolved with the Cauchy kernel of exponent ``t c |xi|``."""
    from scipy.special import voigt_profile
    return lambda x: voigt_profile(np.asarray(x, dtype=float), math.sqrt(var0), t * c)


@dataclass(frozen=True)
class KolmogorovGrid:
    x_lo: float
    x_hi: float
    Nx: int
    Nt: int
    T: float = 1.0

    def __post_init__(self):
        if self.Nx < 8 or self.Nt < 2:
            raise ValueError("need Nx >= 8 and Nt >= 2")
        if not self.x_hi > self.x_lo or not self.T > 0:
            raise ValueError("empty space or time interval")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.Nx)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.Nt)

    def refined(self) -> "KolmogorovGrid":
        return KolmogorovGrid(self.x_lo, self.x_hi, 2 * self.Nx - 1, 2 * self.Nt - 1, self.T)


@dataclass(frozen=True, eq=False)
class KolmogorovSolution:
    grid: KolmogorovGrid
    u: np.ndarray  # Nt x Nx, row n is time t_n

    def at(self, t: float, x) -> np.ndarray:
        """Linear interpolation in ``x`` at the nearest time node."""
        n = int(round(t / self.grid.T * (self.grid.Nt - 1)))
        return np.interp(np.asarray(x, dtype=float), self.grid.x, self.u[n])

    def table(self) -> np.ndarray:
        """Rows ``(t, x, value)``."""
        tt, xx = np.meshgrid(self.grid.t, self.grid.x, indexing="ij")
        return np.column_stack([tt.ravel(), xx.ravel(), self.u.ravel()])


def _vec(fn: Callable, x: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(fn(x), dtype=float), x.shape)


def kolmogorov_solve(b: Callable, sigma: Callable, f: Callable, grid: KolmogorovGrid,
                     theta: float = 0.5) -> KolmogorovSolution:
    """Backward march of ``u_t + b u_x + (sigma^2/2) u_xx = 0`` from ``u(T) = f``.

    Central differences in space; boundary values stay pinned to ``f``.
    """
    x = grid.x
    dx = x[1] - x[0]
    dt = grid.T / (grid.Nt - 1)
    xi = x[1:-1]
    a = 0.5 * _vec(sigma, xi) ** 2 / dx ** 2
    c = _vec(b, xi) / (2.0 * dx)
    lower, diag, upper = a - c, -2.0 * a, a + c  # L u_i = lower u_{i-1} + diag u_i + upper u_{i+1}

    n = len(xi)
    ab = np.zeros((3, n))
    ab[0, 1:] = -theta * dt * upper[:-1]
    ab[1] = 1.0 - theta * dt * diag
    ab[2, :-1] = -theta * dt * lower[1:]

    u = np.empty((grid.Nt, grid.Nx))
    u[-1] = _vec(f, x)
    left, right = u[-1, 0], u[-1, -1]
    limit = 10.0 * max(float(np.max(np.abs(u[-1]))), 1e-300)
    w = 1.0 - theta
    for k in range(grid.Nt - 1, 0, -1):
        v = u[k]
        rhs = v[1:-1] + w * dt * (lower * v[:-2] + diag * v[1:-1] + upper * v[2:])
        rhs[0] += theta * dt * lower[0] * left
        rhs[-1] += theta * dt * upper[-1] * right
        u[k - 1, 1:-1] = linalg.solve_banded((1, 1), ab, rhs)
        u[k - 1, 0], u[k - 1, -1] = left, right
        if not np.all(np.isfinite(u[k - 1])) or np.max(np.abs(u[k - 1])) > limit:
            raise InstabilityError(f"backward march unstable at t={grid.t[k - 1]:.4g}")
    return KolmogorovSolution(grid, u)


def _euler_terminal(b: Callable, sigma: Callable, x0: float, dW: np.ndarray, dt: float) -> np.ndarray:
    x = np.full(dW.shape[0], float(x0))
    for i in range(dW.shape[1]):
        x = x + _vec(b, x) * dt + _vec(sigma, x) * dW[:, i]
    return x


def feynman_kac_check(b: Callable, sigma: Callable, f: Callable, grid: KolmogorovGrid, M: int, seed: int,
                      probes: Sequence[tuple] = ((0.0, 0.0),), mc_steps: int = 256,
                      name: str = "feynman_kac") -> IdentityReport:
    """Monte Carlo ``E[f(X_T) | X_t = x]`` against the PDE at each probe.

    Per-probe tolerance is ``4 SE + |u_h - u_{h/2}| + |MC_dt - MC_{2dt}|``:
    the PDE term compares against a doubled-resolution solve and the Euler
    term compares fine and coarse schemes driven by the same increments.
    """
    sol = kolmogorov_solve(b, sigma, f, grid)
    fine = kolmogorov_solve(b, sigma, f, grid.refined())
    diffs, tols, ses, detail = [], [], [], []
    for j, (t, x) in enumerate(probes):
        horizon = grid.T - t
        steps = max(2, mc_steps - mc_steps % 2)
        W = simulate_brownian(TimeGrid(horizon, steps), M, seed, purpose=f"feynman_kac/{j}")
        dW = W.increments
        fx = _vec(f, _euler_terminal(b, sigma, x, dW, horizon / steps))
        fc = _vec(f, _euler_terminal(b, sigma, x, dW.reshape(M, steps // 2, 2).sum(axis=2), 2 * horizon / steps))
        del W, dW
        mc = float(fx.mean())
        se = float(fx.std(ddof=1) / math.sqrt(M))
        euler = abs(mc - float(fc.mean()))
        pde = float(sol.at(t, x))
        pde_err = abs(pde - float(fine.at(t, x)))
        diffs.append(mc - pde)
        tols.append(4.0 * se + pde_err + euler)
        ses.append(se)
        detail.append({"t": t, "x": x, "mc": mc, "pde": pde, "se": se, "pde_error": pde_err, "euler_bias": euler})
    return ratio_report(name, diffs, tols, ses, {"M": M, "seed": seed, "probes_detail": detail})
