"""The acceptance checks, one function per criterion.

Every check takes a :class:`SuiteContext` and returns a list of
:class:`IdentityReport`.  The context caches the shared Brownian ensemble,
its Gram system and the fitted representers so criteria 3-6 and 13 reuse
one simulation.
"""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate, stats

from . import functional_calc as fc
from .adjoint import (IntegrandBasis, adjointness_check, build_gram, clark_ocone_reconstruct,
                      covariant_derivative, malliavin_crosscheck, random_span_coefficients, span_energy,
                      variance_identity_check)
from .generators import (GeneratorParams, KolmogorovGrid, SpectralField, choose_box, feynman_kac_check,
                         kolmogorov_solve, mc_smoothing, spectral_evolve, wrap_bound)
from .integration import (AdaptedProcessSample, BrownianLebesgue, JumpIntegrand, PoissonMeasure,
                          compensated_poisson_integral, energy_norm, ito_integral, mean_se,
                          mixed_divergence, variance_se)
from .io import canonical_json, write_csv, write_ensemble
from .paths import (PathEnsemble, TimeGrid, coarsen, fbm_covariance, simulate_brownian, simulate_fbm,
                    simulate_poisson, simulate_stable_levy)
from .randomness import THREADS_ENV
from .reports import IdentityReport, ratio_report

__all__ = ["SuiteContext", "CHECKS", "CRITERIA", "FUNCTIONALS", "run_check", "call_variance_oracle",
           "integrand_oracle"]


@dataclass(frozen=True)
class Functional:
    name: str
    slug: str
    fn: Callable  # terminal value -> F
    co_tolerance: float
    oracle: Callable  # (t, x, T) -> E[D_t F | B_t = x]


FUNCTIONALS = (
    Functional("B_T", "bt", lambda x: x, 0.01, lambda t, x, T: np.ones_like(x)),
    Functional("B_T^2", "bt2", lambda x: x * x, 0.01, lambda t, x, T: 2.0 * x),
    Functional("exp(B_T-T/2)", "exp", None, 0.01, lambda t, x, T: np.exp(x - t / 2.0)),
    Functional("max(B_T,0)", "call", lambda x: np.maximum(x, 0.0), 0.02,
               lambda t, x, T: stats.norm.cdf(x / np.sqrt(np.maximum(T - t, 1e-300)))),
)


def _values(f: Functional, X: PathEnsemble) -> np.ndarray:
    BT = X.terminal
    if f.slug == "exp":
        return np.exp(BT - X.grid.T / 2.0)
    return f.fn(BT)


def integrand_oracle(slug: str) -> Callable:
    return {f.slug: f.oracle for f in FUNCTIONALS}[slug]


def call_variance_oracle(T: float = 1.0) -> float:
    """``Var(max(B_T, 0))`` as ``int_0^T E[Phi(B_t / sqrt(T - t))^2] dt`` by nested quadrature."""

    def inner(t):
        if t <= 0:
            return 0.25
        a = math.sqrt(t / (T - t)) if t < T else math.inf
        g = lambda z: stats.norm.cdf(a * z) ** 2 * stats.norm.pdf(z)
        return integrate.quad(g, -np.inf, np.inf, epsabs=1e-13, limit=200)[0]

    return integrate.quad(inner, 0.0, T, epsabs=1e-12, limit=200)[0]


def variance_target(slug: str, T: float) -> float:
    if slug == "call":
        return call_variance_oracle(T)
    return {"bt": T, "bt2": 2.0 * T * T, "exp": math.expm1(T)}[slug]


@dataclass
class SuiteContext:
    """Run parameters plus caches shared between checks."""

    seed: int = 7
    T: float = 1.0
    N: int = 256
    M: int = 100_000
    driver: dict = field(default_factory=lambda: {"process": "brownian"})
    basis: dict = field(default_factory=lambda: {"bins": 16, "degree": 3})
    data_dir: Optional[Path] = None
    artifacts: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.N)

    def meta(self, **kw) -> dict:
        d = {"M": self.M, "N": self.N, "seed": self.seed}
        d.update(kw)
        return d

    def brownian(self) -> PathEnsemble:
        if "W" not in self._cache:
            self._cache["W"] = simulate_brownian(self.grid, self.M, self.seed)
        return self._cache["W"]

    def make_basis(self, grid: TimeGrid, **over) -> IntegrandBasis:
        b = dict(self.basis)
        b.update(over)
        return IntegrandBasis.uniform(grid, b.pop("bins", 16), b.pop("degree", 3),
                                      **{k: (tuple(v) if k == "extras" else v) for k, v in b.items()})

    def gram(self, X: Optional[PathEnsemble] = None, **over):
        X = X if X is not None else self.brownian()
        key = ("gram", id(X), tuple(sorted(over.items())))
        if key not in self._cache:
            self._cache[key] = build_gram(self.make_basis(X.grid, **over).bind(X), X, BrownianLebesgue())
        return self._cache[key]

    def drop_grams(self, keep_default: bool = True) -> None:
        """Free cached Gram systems built with non-default basis options."""
        self._cache = {k: v for k, v in self._cache.items()
                       if not (isinstance(k, tuple) and k[0] == "gram" and (k[2] or not keep_default))}

    def representer(self, f: Functional, X: Optional[PathEnsemble] = None):
        X = X if X is not None else self.brownian()
        key = ("rep", f.slug, id(X))
        if key not in self._cache:
            gram = self.gram(X)
            self._cache[key] = covariant_derivative(_values(f, X), gram.basis, X, gram=gram)
        return self._cache[key]

    def artifact(self, name: str, filename: str) -> Optional[Path]:
        if self.data_dir is None:
            return None
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.artifacts[name] = filename
        return self.data_dir / filename


# criterion 1 -----------------------------------------------------------------------------------

def _isometry_report(name: str, div: np.ndarray, energy_per_path, ctx: SuiteContext, N: int) -> IdentityReport:
    e = np.broadcast_to(energy_per_path, div.shape)
    d = mean_se(div ** 2 - e)
    return IdentityReport(name, float(np.mean(div ** 2)), float(np.mean(e)), d.se, 4.0 * d.se + 5.0 / N,
                          ctx.meta(N=N))


def _brownian_integrands(X: PathEnsemble) -> list:
    return [("1", AdaptedProcessSample.constant(X, 1.0)),
            ("B_t", AdaptedProcessSample.from_state(X, lambda t, x: x)),
            ("B_t^2", AdaptedProcessSample.from_state(X, lambda t, x: x * x))]


def check_ito_isometry(ctx: SuiteContext) -> list:
    proc = ctx.driver.get("process", "brownian")
    if proc == "brownian":
        X = ctx.brownian()
        out = []
        for label, u in _brownian_integrands(X):
            per_path = np.einsum("ij,ij->i", u.values, u.values) * X.grid.dt
            out.append(_isometry_report(f"ito_isometry[u={label}]", ito_integral(u, X).values, per_path,
                                        ctx, X.grid.N))
        return out
    X = _jump_driver(ctx)
    spec = PoissonMeasure(X.jumps.measure, X.jumps.eps)
    out = []
    for v in _jump_integrands(X):
        div = compensated_poisson_integral(v, X, spec).values
        out.append(_isometry_report(f"ito_isometry[v={v.label}]", div, energy_norm(v, spec, X).value,
                                    ctx, X.grid.N))
    return out


def _jump_driver(ctx: SuiteContext) -> PathEnsemble:
    d = ctx.driver
    if d.get("process") == "poisson":
        return simulate_poisson(ctx.grid, d.get("rate", 2.0), ctx.M, ctx.seed)
    return simulate_stable_levy(ctx.grid, d.get("gamma", 1.5), d.get("c_gamma", 1.0), ctx.M, ctx.seed,
                                expected_jumps=d.get("expected_jumps", 32.0))


def _jump_integrands(X: PathEnsemble) -> list:
    if X.jumps.measure.finite_activity:
        return [JumpIntegrand.constant(1.0), JumpIntegrand.power(1)]
    # z * 1{|z| <= 1}: z alone has infinite second moment under a stable law
    return [JumpIntegrand.power(1, z_upper=1.0), JumpIntegrand.power(2, z_upper=1.0)]


# criterion 2 -----------------------------------------------------------------------------------

def _centering(name: str, values: np.ndarray, ctx: SuiteContext) -> IdentityReport:
    e = mean_se(values)
    return IdentityReport(name, e.value, 0.0, e.se, 4.0 * e.se, ctx.meta())


def check_centering(ctx: SuiteContext) -> list:
    out = []
    X = ctx.brownian()
    for label, u in _brownian_integrands(X) + [("cos(B_t)", AdaptedProcessSample.from_state(X, lambda t, x: np.cos(x)))]:
        out.append(_centering(f"centering[brownian, u={label}]", ito_integral(u, X).values, ctx))

    H = 0.75
    Z = simulate_fbm(ctx.grid, H, ctx.M, ctx.seed, purpose="fbm/centering")
    for label, fn in (("1", lambda t, x: np.ones_like(x)), ("t", lambda t, x: t + 0.0 * x)):
        u = AdaptedProcessSample(Z.grid, np.broadcast_to(fn(Z.grid.left_nodes, np.zeros(Z.grid.N)), (Z.M, Z.grid.N)).copy())
        out.append(_centering(f"centering[fbm(H={H}), u={label}]", np.einsum("ij,ij->i", u.values, Z.dX), ctx))
    del Z

    gamma = ctx.driver.get("gamma", 1.5) if ctx.driver.get("process") == "stable" else 1.5
    L = simulate_stable_levy(ctx.grid, gamma, 1.0, ctx.M, ctx.seed, purpose="L/centering")
    spec = PoissonMeasure(L.jumps.measure, L.jumps.eps)
    for v in _jump_integrands(L):
        out.append(_centering(f"centering[stable(gamma={gamma}), v={v.label}]",
                              compensated_poisson_integral(v, L, spec).values, ctx))
    B = simulate_brownian(ctx.grid, ctx.M, ctx.seed, purpose="W/centering")
    mixed = mixed_divergence(AdaptedProcessSample.constant(B, 1.0), JumpIntegrand.power(1, z_upper=1.0),
                             1.0, 1.0, (B, L), spec)
    out.append(_centering(f"centering[mixed(1*brownian+1*stable(gamma={gamma}))]", mixed.values, ctx))
    del L, B

    P = simulate_poisson(ctx.grid, 2.0, ctx.M, ctx.seed, purpose="N/centering")
    pspec = PoissonMeasure(P.jumps.measure, 0.0)
    for v in _jump_integrands(P):
        out.append(_centering(f"centering[poisson(rate=2.0), v={v.label}]",
                              compensated_poisson_integral(v, P, pspec).values, ctx))
    return out


# criteria 3-6 ----------------------------------------------------------------------------------

def check_clark_ocone(ctx: SuiteContext) -> list:
    X = ctx.brownian()
    out = []
    for f in FUNCTIONALS:
        rep = ctx.representer(f)
        _, r = clark_ocone_reconstruct(_values(f, X), rep, X, tolerance=f.co_tolerance,
                                       name=f"clark_ocone[F={f.name}]")
        out.append(replace(r, metadata=ctx.meta(K=rep.basis.K, gram_condition=rep.gram_condition,
                                                ridge=rep.ridge)))
        path = ctx.artifact(f"representer[{f.slug}]", f"representer_{f.slug}.json")
        if path is not None:
            d = rep.to_dict()
            d["functional"] = f.slug
            d["T"] = ctx.T
            path.write_text(canonical_json(d))
    return out


def check_variance_identity(ctx: SuiteContext) -> list:
    X = ctx.brownian()
    spec = BrownianLebesgue()
    out = []
    for f in FUNCTIONALS:
        rep = ctx.representer(f)
        F = _values(f, X)
        r = variance_identity_check(F, rep, spec, X, name=f"variance_identity[F={f.name}]")
        out.append(replace(r, metadata=ctx.meta(K=rep.basis.K, residual_slack=r.metadata["residual_slack"])))
        target = variance_target(f.slug, ctx.T)
        e = mean_se(span_energy(rep.basis, X, spec, rep.coefficients, rep.coefficients)[:, 0])
        slack = r.metadata["residual_slack"]
        se = math.hypot(e.se, variance_se(F).se)
        out.append(IdentityReport(f"variance_oracle[F={f.name}]", e.value, target, se, 4.0 * se + slack,
                                  ctx.meta(K=rep.basis.K, target_source="quadrature" if f.slug == "call"
                                           else "closed_form")))
    return out


def check_adjointness(ctx: SuiteContext) -> list:
    X = ctx.brownian()
    out = []
    for f in FUNCTIONALS:
        rep = ctx.representer(f)
        tests = random_span_coefficients(rep.basis, 10, ctx.seed)
        rs = adjointness_check(_values(f, X), rep, tests, BrownianLebesgue(), X, name=f"adjointness[F={f.name}]")
        out.extend(replace(r, metadata=ctx.meta(K=rep.basis.K)) for r in rs)
    return out


_MALLIAVIN = (
    ("x", lambda x: x, lambda x: np.ones_like(x), 3),
    ("x^2", lambda x: x * x, lambda x: 2.0 * x, 3),
    ("sin", np.sin, np.cos, 5),
)


def check_malliavin(ctx: SuiteContext) -> list:
    X = ctx.brownian()
    out = []
    for label, f, fp, p in _MALLIAVIN:
        gram = ctx.gram(X, degree=max(p, ctx.basis.get("degree", 3)))
        rep = covariant_derivative(f(X.terminal), gram.basis, X, gram=gram)
        r = malliavin_crosscheck(f, fp, X, rep, tolerance=0.05)
        out.append(replace(r, name=f"malliavin[f={label}]", metadata=ctx.meta(K=rep.basis.K, degree=gram.basis.degree,
                                                                               paths_used=r.metadata["paths_used"])))
    ctx.drop_grams(keep_default=True)
    return out


# criterion 7 -----------------------------------------------------------------------------------

FBM_M, FBM_N = 10_000, 128


def fbm_covariance_table(Z: PathEnsemble, H: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sample covariance, its entrywise SE and ``R_H`` on nodes ``t_1..t_N``."""
    P = Z.paths[:, 1:]
    S = P.T @ P / Z.M
    S2 = (P * P).T @ (P * P) / Z.M
    se = np.sqrt(np.maximum(S2 - S * S, 0.0) / Z.M)
    t = Z.grid.nodes[1:]
    R = fbm_covariance(t[:, None], t[None, :], H)
    return t, S, se, R


def check_fbm_law(ctx: SuiteContext) -> list:
    out = []
    grid = TimeGrid(ctx.T, FBM_N)
    for H in (0.25, 0.5, 0.75):
        Z = simulate_fbm(grid, H, FBM_M, ctx.seed, purpose=f"fbm/H={H}")
        _, S, se, R = fbm_covariance_table(Z, H)
        iu = np.triu_indices(FBM_N)
        out.append(ratio_report(f"fbm_covariance[H={H}]", (S - R)[iu], 4.0 * se[iu], se[iu],
                                {"M": FBM_M, "N": FBM_N, "seed": ctx.seed}))
        if H == 0.75:
            path = ctx.artifact("ensemble[fbm(H=0.75)]", "fbm_H0.75.pens")
            if path is not None:
                write_ensemble(path, Z)
    return out


# criterion 8 -----------------------------------------------------------------------------------

STABLE_XI = np.linspace(0.2, 2.0, 10)


def check_stable_charfn(ctx: SuiteContext) -> list:
    out = []
    for gamma in (0.8, 1.0, 1.5, 1.9):
        L = simulate_stable_levy(ctx.grid, gamma, 1.0, ctx.M, ctx.seed, purpose=f"L/charfn/{gamma}")
        LT = L.terminal.copy()
        del L
        ests = [mean_se(np.cos(xi * LT)) for xi in STABLE_XI]
        target = np.exp(-ctx.T * STABLE_XI ** gamma)
        d = [e.value - t for e, t in zip(ests, target)]
        se = [e.se for e in ests]
        out.append(ratio_report(f"stable_charfn[gamma={gamma}]", d, [4.0 * s for s in se], se,
                                ctx.meta(xi=[float(x) for x in STABLE_XI])))
    return out


# criterion 9 -----------------------------------------------------------------------------------

MIXED_CASES = ((1.0, 1.0, 1.5), (1.0, 0.0, 1.5), (0.0, 1.0, 1.5))


def check_mixed_generator(ctx: SuiteContext) -> list:
    f = lambda x: np.exp(-x * x)
    support, probe_r, t = 6.0, 3.0, ctx.T
    tail_sup = math.exp(-support ** 2)
    xs = np.linspace(-probe_r, probe_r, 13)
    out = []
    for alpha, beta, gamma in MIXED_CASES:
        p = GeneratorParams(alpha, beta, gamma, 1.0)
        L = choose_box(t, p, support, probe_r)
        n = 1 << int(math.ceil(math.log2(2.0 * L / 0.02)))
        field_t = spectral_evolve(SpectralField.from_function(f, L, n), t, p)
        sp = field_t.at(xs)
        mc = mc_smoothing(f, t, p, xs, ctx.M, ctx.seed, purpose=f"smoothing/{alpha}/{beta}/{gamma}")
        wb = wrap_bound(xs, t, p, L, support, 1.0, tail_sup)
        out.append(ratio_report(f"mixed_generator[alpha={alpha}, beta={beta}, gamma={gamma}]", sp - mc.values,
                                4.0 * mc.se + wb, mc.se,
                                ctx.meta(box_half_width=L, resolution=n, max_wrap_bound=float(np.max(wb)))))
        path = ctx.artifact(f"field[alpha={alpha}, beta={beta}]", f"field_a{alpha}_b{beta}.csv")
        if path is not None:
            keep = np.abs(field_t.x) <= 3 * probe_r
            write_csv(path, ("x", "value"), zip(field_t.x[keep], field_t.values[keep]))
    return out


# criterion 10 ----------------------------------------------------------------------------------

def check_kolmogorov(ctx: SuiteContext) -> list:
    zero = lambda x: 0.0 * x
    one = lambda x: 1.0 + 0.0 * x
    g = KolmogorovGrid(-10.0, 10.0, 401, 201, ctx.T)
    x, tt = g.x, g.t
    interior = np.abs(x) <= 5.0
    cases = (
        ("x", lambda x: x, lambda t, x: x + 0.0 * t, 1e-8),
        ("x^2", lambda x: x * x, lambda t, x: x * x + (ctx.T - t), 1e-3),
        ("sin", np.sin, lambda t, x: np.sin(x) * np.exp(-(ctx.T - t) / 2.0), 1e-3),
    )
    out = []
    for label, f, exact, tol in cases:
        sol = kolmogorov_solve(zero, one, f, g)
        err = float(np.max(np.abs(sol.u - exact(tt[:, None], x[None, :]))[:, interior]))
        out.append(IdentityReport(f"kolmogorov[heat, f={label}]", err, 0.0, 0.0, tol,
                                  {"Nx": g.Nx, "Nt": g.Nt, "interior": [-5.0, 5.0]}))
        if label == "sin":
            path = ctx.artifact("u_table[heat, sin]", "kolmogorov_sin.csv")
            if path is not None:
                write_csv(path, ("t", "x", "value"), sol.table()[:: 10])

    fk_cases = (
        ("OU", lambda x: -x, one, lambda x: x * x, KolmogorovGrid(-8.0, 8.0, 321, 201, ctx.T),
         math.exp(-2.0 * ctx.T) + (1.0 - math.exp(-2.0 * ctx.T)) / 2.0),
        ("GBM", lambda x: 0.1 * x, lambda x: 0.2 * x, lambda x: x, KolmogorovGrid(0.0, 6.0, 241, 201, ctx.T),
         math.exp(0.1 * ctx.T)),
    )
    for label, b, s, f, kg, closed in fk_cases:
        r = feynman_kac_check(b, s, f, kg, ctx.M, ctx.seed, probes=((0.0, 1.0),), mc_steps=ctx.N,
                              name=f"feynman_kac[{label}]")
        out.append(r)
        pde = r.metadata["probes_detail"][0]["pde"]
        out.append(IdentityReport(f"kolmogorov[{label}, closed form at (0,1)]", pde, closed, 0.0, 1e-3,
                                  {"Nx": kg.Nx, "Nt": kg.Nt}))
    return out


# criterion 11 ----------------------------------------------------------------------------------

def check_dupire(ctx: SuiteContext) -> list:
    grid = TimeGrid(ctx.T, ctx.N)
    W = simulate_brownian(grid, 1, ctx.seed, purpose="W/dupire")
    times, path = grid.nodes, np.array(W.paths[0])
    idx = [1, grid.N // 4, grid.N // 2, grid.N - 1]
    h_t = grid.dt / 2.0

    def worst(fn):
        return max(abs(fn(i)) for i in idx)

    quad_path = path.copy()
    shifted = path + 0.3

    def vert_sq(i):
        p = quad_path.copy()
        p[i] = 0.7
        return fc.vertical_derivative(fc.current_square(), times, p, i) - 1.4

    examples = (
        ("vertical[omega_t] = 1", lambda i: fc.vertical_derivative(fc.current_value(), times, path, i) - 1.0, 1e-9),
        ("vertical[omega_t^2 at 0.7] = 1.4", vert_sq, 1e-9),
        ("vertical[int omega ds] = 0", lambda i: fc.vertical_derivative(fc.running_integral(), times, path, i), 1e-9),
        ("horizontal[omega_t] = 0", lambda i: fc.horizontal_derivative(fc.current_value(), times, path, i), 1e-9),
        ("horizontal[int omega ds] = omega_t",
         lambda i: fc.horizontal_derivative(fc.running_integral(), times, path, i) - path[i], h_t),
        ("horizontal[t * omega_0] = omega_0",
         lambda i: fc.horizontal_derivative(fc.time_times_initial(), times, shifted, i) - shifted[0], 1e-9),
    )
    return [IdentityReport(f"dupire[{label}]", worst(fn), 0.0, 0.0, tol, {"N": grid.N, "t_indices": idx})
            for label, fn, tol in examples]


# criterion 12 ----------------------------------------------------------------------------------

@contextlib.contextmanager
def thread_cap(n: int):
    old = os.environ.get(THREADS_ENV)
    os.environ[THREADS_ENV] = str(n)
    try:
        yield
    finally:
        if old is None:
            os.environ.pop(THREADS_ENV, None)
        else:
            os.environ[THREADS_ENV] = old


def _determinism_artifacts(seed: int) -> dict:
    g = TimeGrid(1.0, 32)
    M = 5000
    out = {
        "brownian": simulate_brownian(g, M, seed).paths.tobytes(),
        "fbm": simulate_fbm(g, 0.7, M, seed).paths.tobytes(),
        "stable": simulate_stable_levy(g, 1.5, 1.0, M, seed).paths.tobytes(),
        "stable_jump_consistent": simulate_stable_levy(g, 1.5, 1.0, M, seed, coupling="jump_consistent").paths.tobytes(),
        "poisson": simulate_poisson(g, 2.0, M, seed).paths.tobytes(),
        "smoothing": mc_smoothing(np.cos, 1.0, GeneratorParams(1.0, 1.0), [0.0, 1.0], M, seed).values.tobytes(),
    }
    X = simulate_brownian(g, M, seed)
    rep = covariant_derivative(X.terminal ** 2, IntegrandBasis.uniform(g, 4, 2), X)
    _, r = clark_ocone_reconstruct(X.terminal ** 2, rep, X)
    out["clark_ocone_report"] = (canonical_json(r.to_dict()) + rep.to_json()).encode()
    return out


def check_determinism(ctx: SuiteContext) -> list:
    runs = {}
    for n in (1, 4):
        with thread_cap(n):
            runs[n] = [_determinism_artifacts(ctx.seed), _determinism_artifacts(ctx.seed)]
    base = runs[1][0]
    out = []
    for key in base:
        mismatches = sum(run[key] != base[key] for n in runs for run in runs[n])
        out.append(IdentityReport(f"determinism[{key}]", float(mismatches), 0.0, 0.0, 0.0,
                                  {"threads": [1, 4], "reruns": 2, "seed": ctx.seed}))
    return out


# criterion 13 ----------------------------------------------------------------------------------

def _continuous_ito(X: PathEnsemble) -> dict:
    """Exact continuous-time integrals by Ito's formula (``int B dt`` by trapezoid on the finest grid)."""
    BT, T = X.terminal, X.grid.T
    area = integrate.trapezoid(X.paths, dx=X.grid.dt, axis=1)
    return {"1": BT, "B_t": (BT * BT - T) / 2.0, "B_t^2": BT ** 3 / 3.0 - area}


def _isometry_bias(Y: PathEnsemble, exact: dict) -> dict:
    """Per-path ``delta_N(u)^2 - I(u)^2``; its mean is the discrete-minus-continuous energy."""
    return {label: ito_integral(u, Y).values ** 2 - exact[label] ** 2 for label, u in _brownian_integrands(Y)}


def check_grid_refinement(ctx: SuiteContext) -> list:
    X = ctx.brownian()
    if X.grid.N % 4:
        raise ValueError("grid refinement needs N divisible by 4")
    levels = [coarsen(X, 4), coarsen(X, 2), X]
    out = []
    exact = _continuous_ito(X)
    iso = [_isometry_bias(Y, exact) for Y in levels]
    del exact
    for label in iso[0]:
        for c, f in ((0, 1), (1, 2)):
            fine, coarse = iso[f][label], iso[c][label]
            step = np.abs(fine.mean()) - np.abs(coarse.mean())
            se = mean_se(fine - coarse).se
            out.append(IdentityReport(
                f"refinement[ito_isometry, u={label}, N={levels[c].grid.N}->{levels[f].grid.N}]",
                max(0.0, float(step)), 0.0, se, 3.0 * se + 1e-12,
                {"error_coarse": float(abs(coarse.mean())), "error_fine": float(abs(fine.mean())), "seed": ctx.seed}))
    del iso
    for f in FUNCTIONALS:
        res = []
        for Y in levels:
            if Y is X:
                rep = ctx.representer(f)
            else:
                gram = build_gram(ctx.make_basis(Y.grid).bind(Y), Y, BrownianLebesgue())
                rep = covariant_derivative(_values(f, Y), gram.basis, Y, gram=gram)
            res.append(clark_ocone_reconstruct(_values(f, Y), rep, Y, tolerance=f.co_tolerance)[1])
        for c, fi in ((0, 1), (1, 2)):
            a, b = res[c], res[fi]
            se = math.hypot(a.standard_error, b.standard_error)
            out.append(IdentityReport(
                f"refinement[clark_ocone, F={f.name}, N={levels[c].grid.N}->{levels[fi].grid.N}]",
                max(0.0, b.estimate - a.estimate), 0.0, se, 3.0 * se,
                {"residual_coarse": a.estimate, "residual_fine": b.estimate, "seed": ctx.seed}))
    del levels
    return out


CHECKS = {
    "ito_isometry": (1, check_ito_isometry),
    "centering": (2, check_centering),
    "clark_ocone": (3, check_clark_ocone),
    "variance_identity": (4, check_variance_identity),
    "adjointness": (5, check_adjointness),
    "malliavin": (6, check_malliavin),
    "fbm_law": (7, check_fbm_law),
    "stable_charfn": (8, check_stable_charfn),
    "mixed_generator": (9, check_mixed_generator),
    "kolmogorov": (10, check_kolmogorov),
    "dupire": (11, check_dupire),
    "determinism": (12, check_determinism),
    "grid_refinement": (13, check_grid_refinement),
}
CRITERIA = {n: name for name, (n, _) in CHECKS.items()}


def run_check(name: str, ctx: SuiteContext) -> list:
    if name not in CHECKS:
        raise KeyError(f"unknown check {name!r}")
    return CHECKS[name][1](ctx)
