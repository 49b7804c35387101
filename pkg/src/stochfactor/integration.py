"""Stochastic integrals (divergences) on the grid and energy-space norms.

Integrals are left-point sums, so an integrand sampled at ``t_i`` only
multiplies the increment over ``[t_i, t_{i+1})``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate

from .levy import AtomicLevyMeasure, NonIntegrableError, PowerLawLevyMeasure
from .paths import PathEnsemble, TimeGrid

__all__ = [
    "Estimate", "AdaptedProcessSample", "RandomVariableSample", "JumpIntegrand",
    "BrownianLebesgue", "MartingaleQV", "PoissonMeasure", "DirectSum",
    "mean_se", "variance_se", "ito_integral", "quadratic_variation", "energy_weights",
    "energy_norm", "energy_inner", "compensated_poisson_integral", "mixed_divergence",
    "IncompatibleSpecError",
]


class IncompatibleSpecError(ValueError):
    """Energy spec does not fit the integrand or driver."""


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with its standard error."""

    value: float
    se: float


def mean_se(x: np.ndarray) -> Estimate:
    x = np.asarray(x, dtype=float)
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf
    return Estimate(float(np.mean(x)), se)


def variance_se(x: np.ndarray) -> Estimate:
    """Sample variance with the delta-method standard error ``sqrt((m4 - s^4) / M)``."""
    x = np.asarray(x, dtype=float)
    c = x - x.mean()
    v = float(np.mean(c * c))
    m4 = float(np.mean(c ** 4))
    return Estimate(v, math.sqrt(max(m4 - v * v, 0.0) / len(x)))


@dataclass(frozen=True, eq=False)
class AdaptedProcessSample:
    """Integrand values ``u`` on ``[t_i, t_{i+1})``, one row per path."""

    grid: TimeGrid
    values: np.ndarray
    adapted_by_construction: bool = True
    notes: tuple = ()

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.grid.N:
            raise ValueError(f"integrand must be M x {self.grid.N}, got {self.values.shape}")

    @classmethod
    def from_state(cls, X: PathEnsemble, fn: Callable) -> "AdaptedProcessSample":
        """``u_{t_i} = fn(t_i, X_{t_i})`` (vectorized)."""
        t = X.grid.left_nodes[None, :]
        vals = np.broadcast_to(np.asarray(fn(t, X.paths[:, :-1]), dtype=float), (X.M, X.grid.N))
        return cls(X.grid, np.ascontiguousarray(vals))

    @classmethod
    def constant(cls, X: PathEnsemble, value: float = 1.0) -> "AdaptedProcessSample":
        return cls(X.grid, np.full((X.M, X.grid.N), float(value)))

    def __add__(self, other: "AdaptedProcessSample") -> "AdaptedProcessSample":
        return AdaptedProcessSample(self.grid, self.values + other.values,
                                    self.adapted_by_construction and other.adapted_by_construction)

    def scaled(self, a: float) -> "AdaptedProcessSample":
        return AdaptedProcessSample(self.grid, a * self.values, self.adapted_by_construction)


@dataclass(frozen=True, eq=False)
class RandomVariableSample:
    values: np.ndarray
    provenance: str = ""

    @property
    def M(self) -> int:
        return len(self.values)

    def mean(self) -> Estimate:
        return mean_se(self.values)


@dataclass(frozen=True)
class BrownianLebesgue:
    """Energy measure ``dt`` (Brownian driver)."""


@dataclass(frozen=True)
class MartingaleQV:
    """Energy measure ``d<X>`` from realized quadratic variation."""


@dataclass(frozen=True)
class PoissonMeasure:
    """``dt x nu`` restricted to ``|z| > eps``."""

    measure: object
    eps: float = 0.0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if not getattr(self.measure, "finite_activity", False) and not self.eps > 0:
            raise ValueError("infinite-activity Levy measure needs truncation eps > 0")


@dataclass(frozen=True)
class DirectSum:
    """Weighted direct sum; ``weights`` multiply the component squared norms."""

    components: tuple
    weights: tuple

    def __post_init__(self):
        if len(self.components) != len(self.weights) or not self.components:
            raise ValueError("components and weights must be non-empty and equal length")
        if any(not w > 0 for w in self.weights):
            raise ValueError("direct-sum weights must be positive")


EnergySpec = Union[BrownianLebesgue, MartingaleQV, PoissonMeasure, DirectSum]


@dataclass(frozen=True)
class JumpIntegrand:
    """Deterministic jump integrand ``v(t, z)``.

    ``z_power`` marks ``v = coef * z^p * 1{|z| <= z_upper}``, which has
    closed-form nu-integrals for power-law measures.
    """

    fn: Callable
    time_homogeneous: bool = True
    z_upper: float = math.inf
    z_power: Optional[int] = None
    coef: float = 1.0
    label: str = "v"

    @classmethod
    def power(cls, p: int, z_upper: float = math.inf, coef: float = 1.0) -> "JumpIntegrand":
        def fn(t, z):
            z = np.asarray(z, dtype=float)
            return np.where(np.abs(z) <= z_upper, coef * z ** p, 0.0)
        return cls(fn, True, z_upper, int(p), coef, f"{coef}*z^{p}")

    @classmethod
    def constant(cls, value: float = 1.0) -> "JumpIntegrand":
        return cls.power(0, coef=value)

    def __call__(self, t, z):
        return np.broadcast_to(np.asarray(self.fn(t, z), dtype=float), np.shape(z))

    def nu_integral(self, spec: PoissonMeasure, T: float, square: bool = False) -> float:
        """``int_0^T int_{|z|>eps} v`` (or ``v^2``) ``nu(dz) dt``."""
        nu, eps, upper = spec.measure, spec.eps, self.z_upper
        if self.z_power is not None and isinstance(nu, PowerLawLevyMeasure):
            p = 2 * self.z_power if square else self.z_power
            c = self.coef ** 2 if square else self.coef
            if p % 2:
                return 0.0
            return c * T * nu.abs_power_integral(p, eps, upper)
        g = (lambda t, z: float(self.fn(t, z)) ** 2) if square else (lambda t, z: float(self.fn(t, z)))
        if self.time_homogeneous:
            val = T * nu.integrate(lambda z: g(0.0, z), eps, upper)
        else:
            val, err = integrate.quad(lambda t: nu.integrate(lambda z: g(t, z), eps, upper), 0.0, T,
                                      epsrel=1e-8, limit=200)
        if not math.isfinite(val):
            raise NonIntegrableError(f"jump integrand {self.label} is not nu-integrable above eps={eps}")
        return float(val)


def _increments(X: PathEnsemble) -> np.ndarray:
    return np.diff(X.paths, axis=1)


def _check_pair(u: AdaptedProcessSample, X: PathEnsemble) -> None:
    if u.grid != X.grid:
        raise ValueError("integrand and driver live on different grids")
    if u.values.shape[0] != X.M:
        raise ValueError(f"integrand has {u.values.shape[0]} paths, driver has {X.M}")


def ito_integral(u: AdaptedProcessSample, X: PathEnsemble) -> RandomVariableSample:
    """Left-point sum ``sum_i u_{t_i} (X_{t_{i+1}} - X_{t_i})`` per path."""
    _check_pair(u, X)
    if not u.adapted_by_construction:
        raise ValueError("Ito integral needs an adapted integrand; project it first")
    return RandomVariableSample(np.einsum("ij,ij->i", u.values, _increments(X)), f"ito[{X.label}]")


def quadratic_variation(X: PathEnsemble) -> np.ndarray:
    """Realized ``<X>_{t_j} = sum_{i<j} (X_{t_{i+1}} - X_{t_i})^2``, shape ``M x (N+1)``."""
    qv = np.zeros_like(X.paths)
    np.cumsum(_increments(X) ** 2, axis=1, out=qv[:, 1:])
    return qv


def energy_weights(spec: EnergySpec, X: PathEnsemble) -> np.ndarray:
    """Per-step energy measure: ``dt`` (broadcastable row) or ``(dX)^2`` per path."""
    if isinstance(spec, BrownianLebesgue):
        return np.full((1, X.grid.N), X.grid.dt)
    if isinstance(spec, MartingaleQV):
        return _increments(X) ** 2
    raise IncompatibleSpecError(f"{type(spec).__name__} has no path-integrand energy weights")


def energy_inner(u: AdaptedProcessSample, w: AdaptedProcessSample, spec: EnergySpec,
                 X: PathEnsemble) -> Estimate:
    """Monte Carlo ``<u, w>`` in the energy space."""
    _check_pair(u, X)
    _check_pair(w, X)
    wts = energy_weights(spec, X)
    per_path = np.einsum("ij,ij->i", u.values * w.values, np.broadcast_to(wts, u.values.shape))
    return mean_se(per_path)


def energy_norm(u, spec: EnergySpec, X) -> Estimate:
    """Squared energy norm with standard error.

    ``u`` is an :class:`AdaptedProcessSample` for path drivers, a
    :class:`JumpIntegrand` for :class:`PoissonMeasure`, and a sequence of
    those (with a matching sequence of drivers) for :class:`DirectSum`.
    """
    if isinstance(spec, DirectSum):
        if len(u) != len(spec.components) or len(X) != len(spec.components):
            raise IncompatibleSpecError("direct sum needs one integrand and driver per component")
        parts = [energy_norm(ui, si, Xi) for ui, si, Xi in zip(u, spec.components, X)]
        value = sum(w * p.value for w, p in zip(spec.weights, parts))
        se = math.sqrt(sum((w * p.se) ** 2 for w, p in zip(spec.weights, parts)))
        return Estimate(value, se)
    if isinstance(spec, PoissonMeasure):
        if not isinstance(u, JumpIntegrand):
            raise IncompatibleSpecError("Poisson energy needs a JumpIntegrand")
        return Estimate(u.nu_integral(spec, X.grid.T, square=True), 0.0)
    if not isinstance(u, AdaptedProcessSample):
        raise IncompatibleSpecError(f"{type(spec).__name__} needs an AdaptedProcessSample")
    return energy_inner(u, u, spec, X)


def compensated_poisson_integral(v: JumpIntegrand, X: PathEnsemble,
                                 spec: PoissonMeasure) -> RandomVariableSample:
    """``sum_{jumps (s, z), |z| > eps} v(s, z) - int_0^T int_{|z|>eps} v nu(dz) dt`` per path."""
    J = X.jumps
    if J is None:
        raise ValueError(f"ensemble {X.label} carries no jump records")
    if spec.eps < J.eps:
        raise IncompatibleSpecError(f"truncation {spec.eps} is below the recorded threshold {J.eps}")
    keep = np.abs(J.sizes) > spec.eps
    vals = v(J.times[keep], J.sizes[keep])
    if not np.all(np.isfinite(vals)):
        raise NonIntegrableError(f"jump integrand {v.label} is not finite on recorded jumps")
    sums = np.bincount(J.path_index[keep], weights=vals, minlength=X.M)
    comp = v.nu_integral(spec, X.grid.T)
    return RandomVariableSample(sums - comp, f"poisson_integral[{X.label}]")


def _component_divergence(v, X: PathEnsemble, spec) -> np.ndarray:
    if isinstance(v, JumpIntegrand):
        if spec is None:
            spec = PoissonMeasure(X.jumps.measure, X.jumps.eps)
        return compensated_poisson_integral(v, X, spec).values
    if X.label.startswith("fbm"):
        if not np.all(v.values == v.values[:1]):
            raise ValueError("only deterministic (Wiener) integrands are supported against fBM")
        return np.einsum("ij,ij->i", v.values, _increments(X))
    return ito_integral(v, X).values


def mixed_divergence(u: AdaptedProcessSample, v, alpha: float, beta: float,
                     components: Sequence[PathEnsemble], spec_b: Optional[PoissonMeasure] = None
                     ) -> RandomVariableSample:
    """``alpha * delta_a(u) + beta * delta_b(v)`` path by path.

    The second component may be Brownian-type (``v`` adapted), a jump
    driver (``v`` a :class:`JumpIntegrand`) or fBM with a deterministic
    ``v`` (Wiener integral).
    """
    a, b = components
    if a.grid != b.grid or a.M != b.M:
        raise ValueError("component ensembles must share grid and size")
    if a.seed is not None and a.seed == b.seed:
        raise ValueError("component ensembles share a random stream")
    da = ito_integral(u, a).values
    db = _component_divergence(v, b, spec_b)
    return RandomVariableSample(alpha * da + beta * db, "mixed_divergence")
