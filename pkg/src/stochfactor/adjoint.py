"""Covariant derivative as the adjoint of the divergence, estimated on a basis.

For a random variable ``F`` and a predictable basis ``e_1..e_K`` the
representer ``phi = sum_k c_k e_k`` solves the Gram system

    (G + ridge I) c = b,   G_kl = E[delta(e_k) delta(e_l)],
                           b_k  = E[(F - E F) delta(e_k)],

with expectations replaced by ensemble means.  Reconstruction
``E F + delta(phi)`` then tests the mean/fluctuation factorization.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import linalg

from .integration import (AdaptedProcessSample, BrownianLebesgue, Estimate, MartingaleQV,
                          RandomVariableSample, energy_weights, ito_integral, mean_se)
from .paths import PathEnsemble, TimeGrid
from .randomness import make_stream, stream_id
from .reports import IdentityReport, ratio_report

log = logging.getLogger(__name__)

__all__ = [
    "IntegrandBasis", "GramSystem", "RieszRepresenter", "GramSingularError", "QuadratureError",
    "build_gram", "covariant_derivative", "predictable_projection", "clark_ocone_reconstruct",
    "variance_identity_check", "adjointness_check", "span_energy", "random_span_coefficients",
    "gaussian_conditional_mean", "malliavin_crosscheck", "relative_l2_error", "leibniz_defect",
]

MAX_CONDITION = 1e12
_CHUNK = 8192


class GramSingularError(np.linalg.LinAlgError):
    """Gram matrix stays ill-conditioned after ridge escalation."""


class QuadratureError(RuntimeError):
    """Gauss-Hermite conditional mean did not converge."""


def _as_values(F) -> np.ndarray:
    return np.asarray(getattr(F, "values", F), dtype=float)


@dataclass(frozen=True)
class IntegrandBasis:
    """Time-bin indicators times state features of ``X_{t_i}``.

    ``edges`` are step indices (``edges[0] = 0``, ``edges[-1] = N``).  State
    features are the monomials ``y^0..y^degree`` of the standardized state
    ``y = (x - center_b) / scale_b`` (same span as monomials in ``x``), or,
    with ``features="hat"``, piecewise-linear hat functions on ``knots``
    equally spaced points of ``[-knot_range, knot_range]``.  ``extras`` may
    add ``"running_max"`` and ``"running_mean"`` path-prefix features.
    Centers and scales come from :meth:`bind`.
    """

    N: int
    edges: tuple
    degree: int = 3
    features: str = "monomial"
    knots: int = 17
    knot_range: float = 4.0
    extras: tuple = ()
    centers: Optional[tuple] = None
    scales: Optional[tuple] = None

    def __post_init__(self):
        if self.features not in ("monomial", "hat"):
            raise ValueError(f"unknown state features {self.features!r}")
        if self.edges[0] != 0 or self.edges[-1] != self.N or list(self.edges) != sorted(self.edges):
            raise ValueError("bin edges must increase from 0 to N")
        if self.degree < 0 or (self.features == "hat" and self.knots < 2):
            raise ValueError("invalid feature size")
        for e in self.extras:
            if e not in ("running_max", "running_mean"):
                raise ValueError(f"unknown extra feature {e!r}")

    @classmethod
    def uniform(cls, grid: TimeGrid, bins: int = 16, degree: int = 3, **kw) -> "IntegrandBasis":
        edges = tuple(int(e) for e in np.round(np.linspace(0, grid.N, bins + 1)))
        return cls(grid.N, edges, degree, **kw)

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def n_state(self) -> int:
        return self.degree + 1 if self.features == "monomial" else self.knots

    @property
    def n_features(self) -> int:
        return self.n_state + len(self.extras)

    @property
    def K(self) -> int:
        return self.n_bins * self.n_features

    def bin_steps(self, b: int) -> np.ndarray:
        return np.arange(self.edges[b], self.edges[b + 1])

    def bind(self, X: PathEnsemble) -> "IntegrandBasis":
        """Freeze per-bin standardization from the ensemble's states."""
        if X.grid.N != self.N:
            raise ValueError("basis and ensemble disagree on N")
        centers, scales = [], []
        for b in range(self.n_bins):
            xs = X.paths[:, self.bin_steps(b)]
            c = float(xs.mean()) if xs.size else 0.0
            s = float(xs.std()) if xs.size else 0.0
            centers.append(c)
            scales.append(s if s > 0 and math.isfinite(s) else 1.0)
        return replace(self, centers=tuple(centers), scales=tuple(scales))

    @property
    def bound(self) -> bool:
        return self.scales is not None

    def _state(self, b: int, x: np.ndarray) -> list:
        y = (x - self.centers[b]) / self.scales[b]
        if self.features == "monomial":
            out = [np.ones_like(y)]
            for _ in range(self.degree):
                out.append(out[-1] * y)
            return out
        kn = np.linspace(-self.knot_range, self.knot_range, self.knots)
        h = kn[1] - kn[0]
        y = np.clip(y, kn[0], kn[-1])
        return [np.maximum(0.0, 1.0 - np.abs(y - k) / h) for k in kn]

    def _extra(self, name: str, X: PathEnsemble, steps: np.ndarray, rows: slice) -> np.ndarray:
        P = X.paths[rows, : steps[-1] + 1]
        if name == "running_max":
            return np.maximum.accumulate(P, axis=1)[:, steps]
        cs = np.cumsum(P, axis=1)[:, steps]
        return cs / (steps + 1.0)

    def features_in_bin(self, b: int, X: PathEnsemble, rows: slice = slice(None)) -> np.ndarray:
        """Feature values, shape ``(rows, steps in bin, n_features)``."""
        if not self.bound:
            raise ValueError("basis must be bound to an ensemble first (call .bind)")
        steps = self.bin_steps(b)
        feats = self._state(b, X.paths[rows, steps])
        feats += [self._extra(e, X, steps, rows) for e in self.extras]
        return np.stack(feats, axis=-1)

    def divergences(self, X: PathEnsemble) -> np.ndarray:
        """``D[m, k] = delta(e_k)`` on path ``m``."""
        D = np.zeros((X.M, self.K))
        nf = self.n_features
        for b in range(self.n_bins):
            steps = self.bin_steps(b)
            if not len(steps):
                continue
            for lo in range(0, X.M, _CHUNK):
                rows = slice(lo, min(lo + _CHUNK, X.M))
                dX = X.paths[rows, steps + 1] - X.paths[rows, steps]
                D[rows, b * nf:(b + 1) * nf] = np.einsum("mif,mi->mf", self.features_in_bin(b, X, rows), dX)
        if not np.all(np.isfinite(D)):
            raise FloatingPointError("non-finite basis divergences")
        return D

    def evaluate(self, coef: np.ndarray, X: PathEnsemble) -> AdaptedProcessSample:
        """The process ``sum_k coef_k e_k`` on every path."""
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (self.K,):
            raise ValueError(f"expected {self.K} coefficients, got {coef.shape}")
        out = np.zeros((X.M, self.N))
        nf = self.n_features
        for b in range(self.n_bins):
            steps = self.bin_steps(b)
            cb = coef[b * nf:(b + 1) * nf]
            if not len(steps) or not np.any(cb):
                continue
            for lo in range(0, X.M, _CHUNK):
                rows = slice(lo, min(lo + _CHUNK, X.M))
                out[rows, steps[0]:steps[-1] + 1] = self.features_in_bin(b, X, rows) @ cb
        return AdaptedProcessSample(X.grid, out)

    def evaluate_state(self, coef: np.ndarray, step: int, x: np.ndarray) -> np.ndarray:
        """Representer at grid step ``step`` as a function of the state alone."""
        if self.extras:
            raise ValueError("state-only evaluation is undefined with path-prefix features")
        b = int(np.searchsorted(self.edges, step, side="right") - 1)
        nf = self.n_features
        return np.stack(self._state(b, np.asarray(x, dtype=float)), axis=-1) @ coef[b * nf:(b + 1) * nf]

    def energy_blocks(self, X: PathEnsemble, spec, rows: slice = slice(None)) -> list:
        """Per-path same-bin energy products ``sum_i e_k e_l w_i``, one array per bin."""
        w_all = energy_weights(spec, X)
        out = []
        for b in range(self.n_bins):
            steps = self.bin_steps(b)
            if not len(steps):
                out.append(None)
                continue
            f = self.features_in_bin(b, X, rows)
            w = np.broadcast_to(w_all[rows if w_all.shape[0] > 1 else slice(None)][:, steps], f.shape[:2])
            out.append(np.einsum("mik,mil,mi->mkl", f, f, w))
        return out

    def describe(self) -> dict:
        return {
            "N": self.N, "edges": list(self.edges), "degree": self.degree, "features": self.features,
            "knots": self.knots, "knot_range": self.knot_range, "extras": list(self.extras),
            "centers": list(self.centers) if self.centers else None,
            "scales": list(self.scales) if self.scales else None,
        }

    @classmethod
    def from_description(cls, d: dict) -> "IntegrandBasis":
        return cls(d["N"], tuple(d["edges"]), d["degree"], d["features"], d["knots"], d["knot_range"],
                   tuple(d["extras"]), tuple(d["centers"]) if d["centers"] else None,
                   tuple(d["scales"]) if d["scales"] else None)


@dataclass(eq=False)
class GramSystem:
    """Both Gram variants on one ensemble plus the cached divergences."""

    basis: IntegrandBasis
    X: PathEnsemble
    spec: object
    G: np.ndarray
    E: np.ndarray
    D: np.ndarray
    G_se: np.ndarray
    isometry_se: np.ndarray
    active: np.ndarray
    ridge: float
    condition: float

    @property
    def isometry_discrepancy(self) -> float:
        a = self.active
        return float(np.max(np.abs(self.G - self.E)[np.ix_(a, a)]))

    def isometry_report(self, c_dt: float = 1.0) -> IdentityReport:
        """Entrywise ``|G - E| <= 4 SE + c_dt * dt`` folded into one worst-ratio report."""
        a = np.ix_(self.active, self.active)
        diff = np.abs(self.G - self.E)[a].ravel()
        se = self.isometry_se[a].ravel()
        return ratio_report("gram_isometry", diff, 4.0 * se + c_dt * self.X.grid.dt, se, self._meta())

    def _meta(self) -> dict:
        return {"M": self.X.M, "N": self.X.grid.N, "K": int(self.active.sum())}

    def operator_norm(self) -> float:
        """Largest singular value of delta from (span, energy norm) to L2 of the ensemble."""
        a = np.ix_(self.active, self.active)
        ev = linalg.eigh(self.G[a], self.E[a], eigvals_only=True)
        return float(math.sqrt(max(ev[-1], 0.0)))


def _choose_ridge(G: np.ndarray, ridge: Optional[float]) -> tuple[float, float]:
    ev = np.linalg.eigvalsh(G)
    cond = lambda r: (ev[-1] + r) / (ev[0] + r) if ev[0] + r > 0 else math.inf
    if ridge is not None:
        c = cond(ridge)
        if not c < MAX_CONDITION:
            raise GramSingularError(f"Gram condition {c:.3e} with ridge {ridge:.3e} exceeds {MAX_CONDITION:.0e}")
        return ridge, c
    r = 1e-8 * float(np.trace(G)) / len(G)
    if not r > 0:
        raise GramSingularError("Gram matrix has zero trace")
    for _ in range(200):
        c = cond(r)
        if c < MAX_CONDITION:
            return r, c
        log.info("ridge %.3e gives condition %.3e; doubling", r, c)
        r *= 2.0
    raise GramSingularError(f"Gram condition {c:.3e} not rescued by ridge {r:.3e}")


def build_gram(basis: IntegrandBasis, X: PathEnsemble, spec=None, ridge: Optional[float] = None) -> GramSystem:
    """Divergence-covariance Gram ``G``, energy Gram ``E`` and their standard errors."""
    spec = spec or BrownianLebesgue()
    if not basis.bound:
        basis = basis.bind(X)
    D = basis.divergences(X)
    M, K = D.shape
    G = D.T @ D / M
    G_se = np.sqrt(np.maximum((D * D).T @ (D * D) / M - G * G, 0.0) / M)

    nf = basis.n_features
    E = np.zeros((K, K))
    sq = (D * D).T @ (D * D)  # running sum of (delta_k delta_l - e_kl)^2, cross-bin part
    cross = np.zeros((K, K))
    e2 = np.zeros((K, K))
    for lo in range(0, M, _CHUNK):
        rows = slice(lo, min(lo + _CHUNK, M))
        for b, blk in enumerate(basis.energy_blocks(X, spec, rows)):
            if blk is None:
                continue
            s = slice(b * nf, (b + 1) * nf)
            Db = D[rows, s]
            E[s, s] += blk.sum(axis=0)
            cross[s, s] += np.einsum("mk,ml,mkl->kl", Db, Db, blk)
            e2[s, s] += np.einsum("mkl,mkl->kl", blk, blk)
    E /= M
    var_diff = (sq - 2.0 * cross + e2) / M - (G - E) ** 2
    iso_se = np.sqrt(np.maximum(var_diff, 0.0) / M)

    norms = np.sqrt(np.diag(G))
    active = norms > 1e-12 * max(float(norms.max()), 1e-300)
    if not active.all():
        log.info("dropping %d basis elements with no variation: %s", int((~active).sum()),
                 np.flatnonzero(~active).tolist())
    r, cond = _choose_ridge(G[np.ix_(active, active)], ridge)
    return GramSystem(basis, X, spec, G, E, D, G_se, iso_se, active, r, cond)


@dataclass(eq=False)
class RieszRepresenter:
    """Coefficients of the basis estimate of the covariant derivative."""

    basis: IntegrandBasis
    coefficients: np.ndarray
    ridge: float
    gram_condition: float
    residual_diag: float
    mean_F: float
    gram: Optional[GramSystem] = field(default=None, repr=False)

    def evaluate(self, X: PathEnsemble) -> AdaptedProcessSample:
        return self.basis.evaluate(self.coefficients, X)

    def divergence(self, X: PathEnsemble) -> np.ndarray:
        D = self.gram.D if self.gram is not None and self.gram.X is X else self.basis.divergences(X)
        return D @ self.coefficients

    def energy_norm_sq(self) -> float:
        """``c^T E c`` with the energy Gram of the fitting ensemble."""
        return float(self.coefficients @ self.gram.E @ self.coefficients)

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.describe(),
            "coefficients": [float(c) for c in self.coefficients],
            "mean_F": float(self.mean_F),
            "diagnostics": {"ridge": float(self.ridge), "gram_condition": float(self.gram_condition),
                            "residual": float(self.residual_diag)},
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "RieszRepresenter":
        diag = d["diagnostics"]
        return cls(IntegrandBasis.from_description(d["basis"]), np.asarray(d["coefficients"]),
                   diag["ridge"], diag["gram_condition"], diag["residual"], d["mean_F"])


def covariant_derivative(F, basis: IntegrandBasis, X: PathEnsemble, spec=None,
                         ridge: Optional[float] = None, gram: Optional[GramSystem] = None) -> RieszRepresenter:
    """Solve ``(G + ridge I) c = b`` with ``b_k = mean((F - mean F) delta(e_k))``."""
    Fv = _as_values(F)
    if len(Fv) != X.M:
        raise ValueError(f"F has {len(Fv)} samples, ensemble has {X.M}")
    if gram is None or gram.X is not X:
        gram = build_gram(basis, X, spec, ridge)
    elif ridge is not None and ridge != gram.ridge:
        gram = replace(gram, ridge=ridge, condition=_choose_ridge(gram.G[np.ix_(gram.active, gram.active)], ridge)[1])
    mean = float(np.mean(Fv))
    b = gram.D.T @ (Fv - mean) / X.M
    a = gram.active
    A = gram.G[np.ix_(a, a)] + gram.ridge * np.eye(int(a.sum()))
    ca = linalg.solve(A, b[a], assume_a="pos")
    c = np.zeros(gram.basis.K)
    c[a] = ca
    if not np.all(np.isfinite(c)):
        raise GramSingularError("non-finite Riesz coefficients")
    resid = float(np.linalg.norm(A @ ca - b[a]))
    return RieszRepresenter(gram.basis, c, gram.ridge, gram.condition, resid, mean, gram)


def predictable_projection(u_raw, basis: IntegrandBasis, X: PathEnsemble, spec=None) -> AdaptedProcessSample:
    """Per-bin least-squares regression of ``u_raw`` on the predictable basis.

    Orthogonal in the energy inner product of ``spec`` (``dt`` by default).
    A bin whose normal equations are singular falls back to its weighted
    mean; such bins are listed in the result's ``notes``.
    """
    spec = spec or BrownianLebesgue()
    U = np.asarray(getattr(u_raw, "values", u_raw), dtype=float)
    if U.shape != (X.M, X.grid.N):
        raise ValueError(f"u must be {X.M} x {X.grid.N}, got {U.shape}")
    if not basis.bound:
        basis = basis.bind(X)
    w_all = energy_weights(spec, X)
    out = np.zeros_like(U)
    notes = []
    nf = basis.n_features
    for b in range(basis.n_bins):
        steps = basis.bin_steps(b)
        if not len(steps):
            continue
        A = np.zeros((nf, nf))
        rhs = np.zeros(nf)
        for lo in range(0, X.M, _CHUNK):
            rows = slice(lo, min(lo + _CHUNK, X.M))
            f = basis.features_in_bin(b, X, rows)
            w = np.broadcast_to(w_all[rows if w_all.shape[0] > 1 else slice(None)][:, steps], f.shape[:2])
            A += np.einsum("mik,mil,mi->kl", f, f, w)
            rhs += np.einsum("mik,mi->k", f, w * U[rows, steps[0]:steps[-1] + 1])
        ev = np.linalg.eigvalsh(A)
        if ev[0] > 0 and ev[-1] / ev[0] < MAX_CONDITION:
            coef = linalg.solve(A, rhs, assume_a="pos")
            for lo in range(0, X.M, _CHUNK):
                rows = slice(lo, min(lo + _CHUNK, X.M))
                out[rows, steps[0]:steps[-1] + 1] = basis.features_in_bin(b, X, rows) @ coef
        else:
            w = np.broadcast_to(w_all[:, steps], (X.M, len(steps)))
            tot = w.sum()
            out[:, steps] = (w * U[:, steps]).sum() / tot if tot > 0 else 0.0
            notes.append(f"bin {b}: singular regression, fell back to bin mean")
            log.warning("predictable projection: bin %d singular, using bin mean", b)
    return AdaptedProcessSample(X.grid, out, True, tuple(notes))


def _meta(X: PathEnsemble, rep: RieszRepresenter, **kw) -> dict:
    seed = X.seed.get("master_seed") if isinstance(X.seed, dict) else None
    d = {"M": X.M, "N": X.grid.N, "K": int(rep.basis.K), "seed": seed}
    d.update(kw)
    return d


def clark_ocone_reconstruct(F, rep: RieszRepresenter, X: PathEnsemble, tolerance: float = 0.01,
                            name: str = "clark_ocone") -> tuple[RandomVariableSample, IdentityReport]:
    """``F_hat = mean(F) + delta(phi)``; report the relative residual."""
    Fv = _as_values(F)
    Fhat = rep.mean_F + rep.divergence(X)
    r2 = (Fv - Fhat) ** 2
    var = float(np.var(Fv))
    if var == 0.0:
        est = mean_se(r2)
        rep_ = IdentityReport(name + "(constant)", est.value, 0.0, est.se, 1e-12, _meta(X, rep))
    else:
        est = mean_se(r2 / var)
        rep_ = IdentityReport(name, est.value, 0.0, est.se, tolerance, _meta(X, rep))
    return RandomVariableSample(Fhat, "clark_ocone_reconstruction"), rep_


def _energy_per_path(a: AdaptedProcessSample, b: AdaptedProcessSample, spec, X: PathEnsemble) -> np.ndarray:
    w = energy_weights(spec, X)
    return np.einsum("ij,ij->i", a.values * b.values, np.broadcast_to(w, a.values.shape))


def variance_identity_check(F, rep: RieszRepresenter, spec, X: PathEnsemble,
                            name: str = "variance_identity") -> IdentityReport:
    """Sample variance of ``F`` against the squared energy norm of the representer.

    Tolerance: four standard errors of the per-path difference plus the
    mean squared reconstruction residual.
    """
    spec = spec or BrownianLebesgue()
    Fv = _as_values(F)
    e_phi = span_energy(rep.basis, X, spec, rep.coefficients, rep.coefficients)[:, 0]
    centered = Fv - Fv.mean()
    diff = centered ** 2 - e_phi
    se = mean_se(diff).se
    slack = float(np.mean((Fv - rep.mean_F - rep.divergence(X)) ** 2))
    return IdentityReport(name, float(np.mean(e_phi)), float(np.var(Fv)), se, 4.0 * se + slack,
                          _meta(X, rep, residual_slack=slack))


def random_span_coefficients(basis: IntegrandBasis, n: int, seed: int) -> list[np.ndarray]:
    """``n`` reproducible random coefficient vectors for basis-span test integrands."""
    rng = make_stream(seed, stream_id("adjointness_tests"))
    return [rng.standard_normal(basis.K) / math.sqrt(basis.K) for _ in range(n)]


def span_energy(basis: IntegrandBasis, X: PathEnsemble, spec, a: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-path energy products ``<sum a_k e_k, sum B_kj e_k>``, shape ``(M, n)``."""
    B = np.asarray(B, dtype=float).reshape(basis.K, -1)
    nf = basis.n_features
    out = np.zeros((X.M, B.shape[1]))
    for lo in range(0, X.M, _CHUNK):
        rows = slice(lo, min(lo + _CHUNK, X.M))
        for b, blk in enumerate(basis.energy_blocks(X, spec, rows)):
            if blk is not None:
                s = slice(b * nf, (b + 1) * nf)
                out[rows] += np.einsum("k,mkl,lj->mj", a[s], blk, B[s])
    return out


def adjointness_check(F, rep: RieszRepresenter, test_integrands: Iterable, spec, X: PathEnsemble,
                      name: str = "adjointness") -> list[IdentityReport]:
    """``mean(F delta(u))`` against ``<phi, u>`` for each test integrand.

    Test integrands are :class:`AdaptedProcessSample` objects or basis
    coefficient vectors.  Coefficient vectors never materialize the
    process: divergences come from the cached basis divergences and energies
    from per-bin feature products.
    """
    spec = spec or BrownianLebesgue()
    Fv = _as_values(F)
    tests = list(test_integrands)
    coef = [j for j, u in enumerate(tests) if not isinstance(u, AdaptedProcessSample)]
    lhs, rhs = {}, {}
    if coef:
        C = np.column_stack([np.asarray(tests[j], dtype=float) for j in coef])
        D = rep.gram.D if rep.gram is not None and rep.gram.X is X else rep.basis.divergences(X)
        L = Fv[:, None] * (D @ C)
        R = span_energy(rep.basis, X, spec, rep.coefficients, C)
        for i, j in enumerate(coef):
            lhs[j], rhs[j] = L[:, i], R[:, i]
    if len(coef) < len(tests):
        phi = rep.evaluate(X)
        for j, u in enumerate(tests):
            if j not in lhs:
                lhs[j] = Fv * ito_integral(u, X).values
                rhs[j] = _energy_per_path(phi, u, spec, X)
    reports = []
    for j in range(len(tests)):
        d = mean_se(lhs[j] - rhs[j])
        reports.append(IdentityReport(f"{name}[{j}]", float(lhs[j].mean()), float(rhs[j].mean()), d.se,
                                      4.0 * d.se, _meta(X, rep)))
    return reports


def gaussian_conditional_mean(g: Callable, x: np.ndarray, var, nodes: int = 24) -> np.ndarray:
    """``E[g(x + sqrt(var) Z)]`` by Gauss-Hermite quadrature; checked against twice the nodes."""

    def rule(n):
        z, w = np.polynomial.hermite_e.hermegauss(n)
        w = w / math.sqrt(2.0 * math.pi)
        sd = np.sqrt(var)
        acc = np.zeros(np.broadcast(x, sd).shape)
        for zi, wi in zip(z, w):
            acc += wi * g(x + sd * zi)
        return acc

    a, b = rule(nodes), rule(2 * nodes)
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    if not err <= 1e-8 * (1.0 + float(np.max(np.abs(b)))):
        raise QuadratureError(f"Gauss-Hermite did not converge (|n vs 2n| = {err:.3e})")
    return b


def relative_l2_error(phi: np.ndarray, target: np.ndarray, weights=None) -> float:
    """``||phi - target|| / ||target||`` in L2(dt x P) on the sampled grid."""
    w = 1.0 if weights is None else weights
    num = float(np.sum((phi - target) ** 2 * w))
    den = float(np.sum(target ** 2 * w))
    return math.sqrt(num / den) if den > 0 else math.sqrt(num)


def malliavin_crosscheck(f: Callable, fprime: Callable, X: PathEnsemble, rep: RieszRepresenter,
                         tolerance: float = 0.05, max_paths: int = 20000) -> IdentityReport:
    """Representer for ``F = f(B_T)`` against ``E[f'(B_T) | B_t]``.

    ``f`` is carried for labelling only; the oracle uses ``f'`` through
    Gauss-Hermite quadrature over ``N(B_t, T - t)``.  The relative L2
    discrepancy is computed on the first ``max_paths`` paths.
    """
    m = min(X.M, max_paths)
    sub = PathEnsemble(X.grid, X.paths[:m], X.label, X.x0)
    phi = rep.basis.evaluate(rep.coefficients, sub).values
    t = X.grid.left_nodes
    g = gaussian_conditional_mean(fprime, sub.paths[:, :-1], (X.grid.T - t)[None, :])
    err = relative_l2_error(phi, g)
    label = getattr(f, "__name__", "f")
    return IdentityReport(f"malliavin[{label}]", err, 0.0, float("nan"), tolerance,
                          _meta(X, rep, paths_used=m))


def leibniz_defect(F, Gv, basis: IntegrandBasis, X: PathEnsemble, spec=None) -> Estimate:
    """Squared energy norm of ``D(FG) - F D(G) - G D(F)`` (product-rule failure)."""
    spec = spec or BrownianLebesgue()
    Fv, Gw = _as_values(F), _as_values(Gv)
    gram = build_gram(basis, X, spec)
    d = covariant_derivative(Fv * Gw, basis, X, spec, gram=gram).evaluate(X).values
    d -= Fv[:, None] * covariant_derivative(Gw, basis, X, spec, gram=gram).evaluate(X).values
    d -= Gw[:, None] * covariant_derivative(Fv, basis, X, spec, gram=gram).evaluate(X).values
    w = energy_weights(spec, X)
    return mean_se(np.einsum("ij,ij->i", d * d, np.broadcast_to(w, d.shape)))
