"""Dupire horizontal and vertical derivatives of non-anticipative path functionals.

A path is a pair ``(times, values)`` of equal-length arrays with
nondecreasing times.  A :class:`PathFunctional` evaluates ``U(t, path)``
using only the samples with ``times <= t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "PathFunctional", "vertical_derivative", "horizontal_derivative", "check_non_anticipative",
    "current_value", "current_square", "running_integral", "running_max", "time_times_initial",
    "integral_martingale",
]


@dataclass(frozen=True)
class PathFunctional:
    """``fn(t, times, values) -> float``; must ignore samples after ``t``."""

    fn: Callable
    label: str = "U"

    def __call__(self, t: float, times: np.ndarray, values: np.ndarray) -> float:
        v = float(self.fn(t, np.asarray(times, dtype=float), np.asarray(values, dtype=float)))
        if not math.isfinite(v):
            raise FloatingPointError(f"functional {self.label} is not finite at t={t}")
        return v


def _prefix(t: float, times: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = int(np.searchsorted(times, t, side="right"))
    if k == 0:
        raise ValueError(f"no path sample at or before t={t}")
    return times[:k], values[:k]


def current_value() -> PathFunctional:
    return PathFunctional(lambda t, s, v: _prefix(t, s, v)[1][-1], "omega_t")


def current_square() -> PathFunctional:
    return PathFunctional(lambda t, s, v: _prefix(t, s, v)[1][-1] ** 2, "omega_t^2")


def _left_integral(t, s, v):
    ts, vs = _prefix(t, s, v)
    return float(np.sum(vs[:-1] * np.diff(ts)) + vs[-1] * (t - ts[-1]))


def running_integral() -> PathFunctional:
    """Left-point ``int_0^t omega_s ds`` (the last sample is weighted by ``t - t_last``)."""
    return PathFunctional(_left_integral, "int_0^t omega")


def running_max() -> PathFunctional:
    return PathFunctional(lambda t, s, v: np.max(_prefix(t, s, v)[1]), "max_{s<=t} omega_s")


def time_times_initial() -> PathFunctional:
    return PathFunctional(lambda t, s, v: t * v[0], "t * omega_0")


def integral_martingale(T: float) -> PathFunctional:
    """``E[int_0^T B ds | F_t] = int_0^t omega ds + (T - t) omega_t`` for Brownian paths."""
    return PathFunctional(lambda t, s, v: _left_integral(t, s, v) + (T - t) * _prefix(t, s, v)[1][-1],
                          "E[int_0^T B | F_t]")


def _check_index(times: np.ndarray, values: np.ndarray, t_index: int) -> None:
    if times.shape != values.shape or times.ndim != 1:
        raise ValueError("times and values must be 1-d arrays of equal length")
    if not 0 <= t_index < len(times):
        raise ValueError(f"t_index {t_index} outside the grid")


def vertical_derivative(U: PathFunctional, times, values, t_index: int, h: Optional[float] = None) -> float:
    """Central difference in the bump ``h 1_{[t, T]}`` added to nodes ``t_i >= t``.

    Default ``h`` is ``1e-4`` times the path scale ``max(1, max |omega|)``.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    _check_index(times, values, t_index)
    if h is None:
        h = 1e-4 * max(1.0, float(np.max(np.abs(values))))
    if not h > 0:
        raise ValueError("bump size must be positive")
    t = times[t_index]
    bump = np.where(times >= t, h, 0.0)
    return (U(t, times, values + bump) - U(t, times, values - bump)) / (2.0 * h)


def horizontal_derivative(U: PathFunctional, times, values, t_index: int, h: Optional[float] = None) -> float:
    """Forward difference in time along the path frozen at its value at ``t``.

    Default ``h`` is half the local step.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    _check_index(times, values, t_index)
    if t_index >= len(times) - 1:
        raise ValueError("horizontal derivative needs t_index < N")
    step = times[t_index + 1] - times[t_index]
    if h is None:
        h = 0.5 * step
    if not (0 < h <= step):
        raise ValueError(f"time step h must lie in (0, {step}]")
    t = times[t_index]
    ft = np.append(times[: t_index + 1], t + h)
    fv = np.append(values[: t_index + 1], values[t_index])
    return (U(t + h, ft, fv) - U(t, times, values)) / h


def check_non_anticipative(U: PathFunctional, times, values, t_index: int, rng: np.random.Generator,
                           trials: int = 8) -> float:
    """Largest change in ``U(t, .)`` when samples strictly after ``t`` are perturbed."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    _check_index(times, values, t_index)
    t = times[t_index]
    base = U(t, times, values)
    after = times > t
    worst = 0.0
    for _ in range(trials):
        pert = values + np.where(after, rng.standard_normal(len(values)) * 10.0, 0.0)
        worst = max(worst, abs(U(t, times, pert) - base))
    return worst
