"""Levy measures for the jump drivers.

A symmetric gamma-stable process with characteristic exponent
``c |xi|^gamma`` has Levy density ``k |z|^(-1-gamma)`` where

    k = c * Gamma(1 + gamma) * sin(pi * gamma / 2) / pi.

This conversion is a convention of this package; ``k`` can also be given
directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, special

QUAD_RTOL = 1e-8


class NonIntegrableError(ValueError):
    """Raised when a jump integrand is not nu-integrable on the truncated domain."""


def stable_density_constant(c_gamma: float, gamma: float) -> float:
    """Levy-density constant ``k`` matching the characteristic scale ``c_gamma``."""
    return c_gamma * special.gamma(1.0 + gamma) * math.sin(math.pi * gamma / 2.0) / math.pi


def _quad(g: Callable, a: float, b: float) -> float:
    val, err = integrate.quad(g, a, b, epsrel=QUAD_RTOL, epsabs=0.0, limit=400)
    if not math.isfinite(val) or (err > 1e-6 * max(1.0, abs(val))):
        raise NonIntegrableError(f"quadrature on ({a}, {b}) did not converge (value={val}, err={err})")
    return val


@dataclass(frozen=True)
class PowerLawLevyMeasure:
    """Symmetric density ``k |z|^(-1-gamma)`` on the real line."""

    k: float
    gamma: float

    def __post_init__(self):
        if not (0.0 < self.gamma < 2.0):
            raise ValueError(f"gamma must lie in (0, 2), got {self.gamma}")
        if not self.k > 0:
            raise ValueError("k must be positive")

    @classmethod
    def from_char_scale(cls, c_gamma: float, gamma: float) -> "PowerLawLevyMeasure":
        return cls(stable_density_constant(c_gamma, gamma), gamma)

    @property
    def char_scale(self) -> float:
        return self.k * math.pi / (special.gamma(1.0 + self.gamma) * math.sin(math.pi * self.gamma / 2.0))

    finite_activity = False

    def density(self, z):
        return self.k * np.abs(z) ** (-1.0 - self.gamma)

    def tail_mass(self, eps: float) -> float:
        if eps <= 0:
            return math.inf
        return 2.0 * self.k * eps ** (-self.gamma) / self.gamma

    def threshold_for_mass(self, mass: float) -> float:
        """Truncation level ``eps`` with ``nu(|z| > eps) = mass``."""
        return (2.0 * self.k / (self.gamma * mass)) ** (1.0 / self.gamma)

    def abs_power_integral(self, p: float, eps: float, upper: float = math.inf) -> float:
        """Closed form of the integral of ``|z|^p`` over ``eps < |z| <= upper``."""
        if eps <= 0 and p <= self.gamma:
            raise NonIntegrableError("|z|^p is not integrable near 0 for p <= gamma")
        e = p - self.gamma
        if upper == math.inf:
            if e >= 0:
                raise NonIntegrableError(f"|z|^{p} is not integrable at infinity for gamma={self.gamma}")
            return 2.0 * self.k * eps ** e / (-e)
        if e == 0:
            return 2.0 * self.k * math.log(upper / eps)
        return 2.0 * self.k * (upper ** e - max(eps, 0.0) ** e) / e

    def integrate(self, g: Callable, eps: float, upper: float = math.inf) -> float:
        """Integral of ``g(z)`` against nu over ``eps < |z| <= upper`` by adaptive quadrature."""
        if eps <= 0:
            raise NonIntegrableError("infinite-activity measure needs eps > 0")
        f = lambda z: g(z) * self.k * abs(z) ** (-1.0 - self.gamma)
        return _quad(f, eps, upper) + _quad(lambda z: f(-z), eps, upper)

    def sample_sizes(self, rng: np.random.Generator, n: int, eps: float) -> np.ndarray:
        """Jump sizes conditioned on ``|z| > eps`` (symmetric Pareto)."""
        mag = eps * rng.random(n) ** (-1.0 / self.gamma)
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return sign * mag

    def small_jump_variance(self, eps: float) -> float:
        """Integral of ``z^2`` over ``|z| <= eps``."""
        return 2.0 * self.k * eps ** (2.0 - self.gamma) / (2.0 - self.gamma)

    def describe(self) -> dict:
        return {"kind": "power_law", "k": self.k, "gamma": self.gamma}


@dataclass(frozen=True)
class AtomicLevyMeasure:
    """Finite measure with point masses ``rates[i]`` at ``atoms[i]``."""

    atoms: tuple
    rates: tuple

    finite_activity = True

    def __post_init__(self):
        if len(self.atoms) != len(self.rates) or not self.atoms:
            raise ValueError("atoms and rates must be non-empty and of equal length")
        if any(r <= 0 for r in self.rates) or any(a == 0 for a in self.atoms):
            raise ValueError("rates must be positive and atoms nonzero")

    def tail_mass(self, eps: float) -> float:
        return float(sum(r for a, r in zip(self.atoms, self.rates) if abs(a) > eps))

    def integrate(self, g: Callable, eps: float, upper: float = math.inf) -> float:
        return float(sum(r * g(a) for a, r in zip(self.atoms, self.rates) if eps < abs(a) <= upper))

    def sample_sizes(self, rng: np.random.Generator, n: int, eps: float) -> np.ndarray:
        keep = [(a, r) for a, r in zip(self.atoms, self.rates) if abs(a) > eps]
        atoms = np.array([a for a, _ in keep], dtype=float)
        w = np.array([r for _, r in keep], dtype=float)
        if len(atoms) == 1:
            return np.full(n, atoms[0])
        return atoms[rng.choice(len(atoms), size=n, p=w / w.sum())]

    def describe(self) -> dict:
        return {"kind": "atomic", "atoms": list(self.atoms), "rates": list(self.rates)}


@dataclass(frozen=True)
class DensityLevyMeasure:
    """User-supplied density; all integrals by adaptive quadrature (rtol 1e-8)."""

    density: Callable[[float], float]
    label: str = "density"

    finite_activity = False

    def tail_mass(self, eps: float) -> float:
        return self.integrate(lambda z: 1.0, eps)

    def integrate(self, g: Callable, eps: float, upper: float = math.inf) -> float:
        if eps <= 0:
            raise NonIntegrableError("density measure needs eps > 0")
        f = lambda z: g(z) * self.density(z)
        return _quad(f, eps, upper) + _quad(lambda z: f(-z), eps, upper)

    def describe(self) -> dict:
        return {"kind": "density", "label": self.label}
