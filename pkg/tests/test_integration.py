import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from stochfactor.integration import (AdaptedProcessSample, BrownianLebesgue, DirectSum, IncompatibleSpecError,
                                     JumpIntegrand, MartingaleQV, PoissonMeasure, compensated_poisson_integral,
                                     energy_inner, energy_norm, ito_integral, mean_se, mixed_divergence,
                                     quadratic_variation, variance_se)
from stochfactor.levy import NonIntegrableError, PowerLawLevyMeasure, stable_density_constant
from stochfactor.paths import (PathEnsemble, TimeGrid, simulate_brownian, simulate_fbm, simulate_poisson,
                               simulate_stable_levy)

SEED = 7


def scaled(X, a):
    return PathEnsemble(X.grid, a * X.paths, f"{a}*{X.label}")


@pytest.fixture(scope="module")
def poisson3():
    return simulate_poisson(TimeGrid(1.0, 64), 3.0, 100_000, SEED, purpose="N")


class TestItoIntegral:
    def test_constant_telescopes(self, brownian_small):
        d = ito_integral(AdaptedProcessSample.constant(brownian_small), brownian_small)
        assert np.allclose(d.values, brownian_small.terminal, atol=1e-12)

    def test_ito_formula(self, brownian_1e5):
        X = brownian_1e5
        d = ito_integral(AdaptedProcessSample.from_state(X, lambda t, x: 2 * x), X)
        err = math.sqrt(np.mean((d.values - (X.terminal ** 2 - 1)) ** 2))
        # the residual is 1 - realized QV, whose L2 size is sqrt(2 dt)
        assert err <= 2 * math.sqrt(2 * X.grid.dt)

    def test_isometry_half(self, brownian_1e5):
        X = brownian_1e5
        d = ito_integral(AdaptedProcessSample.from_state(X, lambda t, x: x), X)
        e = mean_se(d.values ** 2)
        assert abs(e.value - 0.5) <= 4 * e.se + X.grid.dt

    def test_rejects_non_adapted(self, brownian_small):
        u = AdaptedProcessSample(brownian_small.grid, np.ones((brownian_small.M, 64)), adapted_by_construction=False)
        with pytest.raises(ValueError):
            ito_integral(u, brownian_small)

    def test_rejects_grid_mismatch(self, brownian_small):
        other = simulate_brownian(TimeGrid(1.0, 32), brownian_small.M, SEED)
        with pytest.raises(ValueError):
            ito_integral(AdaptedProcessSample.constant(other), brownian_small)

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, a, b):
        X = simulate_brownian(TimeGrid(1.0, 16), 200, SEED)
        u = AdaptedProcessSample.from_state(X, lambda t, x: np.sin(x))
        w = AdaptedProcessSample.from_state(X, lambda t, x: t * x)
        lhs = ito_integral(u.scaled(a) + w.scaled(b), X).values
        rhs = a * ito_integral(u, X).values + b * ito_integral(w, X).values
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("fn", [lambda t, x: x, lambda t, x: np.cos(x), lambda t, x: t + x ** 2])
    def test_centering(self, brownian_1e5, fn):
        d = ito_integral(AdaptedProcessSample.from_state(brownian_1e5, fn), brownian_1e5)
        m = d.mean()
        assert abs(m.value) <= 4 * m.se

    def test_polarization(self, brownian_1e5):
        X = brownian_1e5
        u = AdaptedProcessSample.from_state(X, lambda t, x: x)
        w = AdaptedProcessSample.from_state(X, lambda t, x: np.cos(x))
        prod = ito_integral(u, X).values * ito_integral(w, X).values
        inner = energy_inner(u, w, BrownianLebesgue(), X)
        diff = mean_se(prod - np.einsum("ij->i", u.values * w.values) * X.grid.dt)
        assert abs(diff.value) <= 4 * diff.se + X.grid.dt
        # oracle: E[B_t cos B_t] = 0 by symmetry
        assert abs(inner.value) <= 4 * inner.se


class TestQuadraticVariation:
    def test_brownian(self, brownian_1e5):
        m = mean_se(quadratic_variation(brownian_1e5)[:, -1])
        assert abs(m.value - 1) <= 4 * m.se

    def test_scaled(self, brownian_small):
        m = mean_se(quadratic_variation(scaled(brownian_small, 2.0))[:, -1])
        assert abs(m.value - 4) <= 4 * m.se

    @pytest.mark.parametrize("N", [4, 64, 1024])
    def test_smooth_path(self, N):
        g = TimeGrid(1.0, N)
        X = PathEnsemble(g, g.nodes[None, :].copy(), "t")
        assert quadratic_variation(X)[0, -1] == pytest.approx(g.dt)

    def test_starts_at_zero_and_increases(self, brownian_small):
        q = quadratic_variation(brownian_small)
        assert np.all(q[:, 0] == 0) and np.all(np.diff(q, axis=1) >= 0)


class TestEnergyNorm:
    def test_constant_exact(self, brownian_small):
        e = energy_norm(AdaptedProcessSample.constant(brownian_small), BrownianLebesgue(), brownian_small)
        assert e.value == pytest.approx(1.0, abs=1e-12) and e.se == pytest.approx(0.0, abs=1e-12)

    def test_brownian_half(self, brownian_1e5):
        X = brownian_1e5
        e = energy_norm(AdaptedProcessSample.from_state(X, lambda t, x: x), BrownianLebesgue(), X)
        assert abs(e.value - 0.5) <= 4 * e.se + X.grid.dt

    def test_qv_scaling(self, brownian_small):
        X2 = scaled(brownian_small, 2.0)
        e = energy_norm(AdaptedProcessSample.constant(X2), MartingaleQV(), X2)
        assert abs(e.value - 4) <= 4 * e.se

    def test_incompatible(self, brownian_small):
        nu = PowerLawLevyMeasure(1.0, 1.5)
        with pytest.raises(IncompatibleSpecError):
            energy_norm(AdaptedProcessSample.constant(brownian_small), PoissonMeasure(nu, 0.1), brownian_small)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PoissonMeasure(PowerLawLevyMeasure(1.0, 1.5), 0.0)
        with pytest.raises(ValueError):
            DirectSum((BrownianLebesgue(),), (0.0,))

    def test_direct_sum_weights(self, brownian_small, poisson3):
        g = brownian_small.grid
        spec = DirectSum((BrownianLebesgue(), PoissonMeasure(poisson3.jumps.measure)), (4.0, 1.0))
        e = energy_norm((AdaptedProcessSample.constant(brownian_small), JumpIntegrand.constant()), spec,
                        (brownian_small, poisson3))
        assert e.value == pytest.approx(4.0 + 3.0)


class TestCompensatedPoisson:
    def test_rate_three(self, poisson3):
        d = compensated_poisson_integral(JumpIntegrand.constant(), poisson3, PoissonMeasure(poisson3.jumps.measure))
        m, v = d.mean(), variance_se(d.values)
        assert abs(m.value) <= 4 * m.se
        assert abs(v.value - 3) <= 4 * v.se

    def test_zero_integrand(self, poisson3):
        d = compensated_poisson_integral(JumpIntegrand.constant(0.0), poisson3, PoissonMeasure(poisson3.jumps.measure))
        assert np.all(d.values == 0)

    def test_missing_records(self, brownian_small):
        with pytest.raises(ValueError):
            compensated_poisson_integral(JumpIntegrand.constant(), brownian_small,
                                         PoissonMeasure(PowerLawLevyMeasure(1.0, 1.5), 0.1))

    def test_stable_truncated_isometry(self):
        gamma = 1.5
        L = simulate_stable_levy(TimeGrid(1.0, 16), gamma, 1.0, 100_000, SEED)
        eps = L.jumps.eps
        spec = PoissonMeasure(L.jumps.measure, eps)
        v = JumpIntegrand.power(1, z_upper=1.0)
        d = compensated_poisson_integral(v, L, spec)
        # oracle: 2 k int_eps^1 z^(1 - gamma) dz by quadrature
        k = stable_density_constant(1.0, gamma)
        target = 2 * k * integrate.quad(lambda z: z ** (1 - gamma), eps, 1.0)[0]
        e = mean_se(d.values ** 2)
        assert abs(e.value - target) <= 4 * e.se
        assert energy_norm(v, spec, L).value == pytest.approx(target, rel=1e-8)

    def test_unbounded_square_not_integrable(self):
        nu = PowerLawLevyMeasure(1.0, 1.5)
        with pytest.raises(NonIntegrableError):
            JumpIntegrand.power(1).nu_integral(PoissonMeasure(nu, 0.1), 1.0, square=True)

    def test_quadrature_matches_closed_form(self):
        nu = PowerLawLevyMeasure(0.7, 1.2)
        spec = PoissonMeasure(nu, 0.05)
        closed = JumpIntegrand.power(2, z_upper=2.0).nu_integral(spec, 1.5)
        generic = JumpIntegrand(lambda t, z: np.where(np.abs(z) <= 2.0, z * z, 0.0)).nu_integral(spec, 1.5)
        assert generic == pytest.approx(closed, rel=1e-7)


class TestMixedDivergence:
    @pytest.fixture(scope="class")
    @classmethod
    def parts(cls):
        g = TimeGrid(1.0, 64)
        return simulate_brownian(g, 100_000, SEED), simulate_poisson(g, 3.0, 100_000, SEED)

    def test_beta_zero(self, parts):
        a, b = parts
        u = AdaptedProcessSample.from_state(a, lambda t, x: x)
        d = mixed_divergence(u, JumpIntegrand.constant(), 2.5, 0.0, (a, b))
        assert np.array_equal(d.values, 2.5 * ito_integral(u, a).values)

    @pytest.mark.parametrize("alpha,beta", [(1.0, 1.0), (0.5, 2.0)])
    def test_variance_additive(self, parts, alpha, beta):
        a, b = parts
        d = mixed_divergence(AdaptedProcessSample.constant(a), JumpIntegrand.constant(), alpha, beta, (a, b))
        v = variance_se(d.values)
        assert abs(v.value - (alpha ** 2 + 3 * beta ** 2)) <= 4 * v.se

    def test_components_uncorrelated(self, parts):
        a, b = parts
        da = ito_integral(AdaptedProcessSample.constant(a), a).values
        db = compensated_poisson_integral(JumpIntegrand.constant(), b, PoissonMeasure(b.jumps.measure)).values
        c = mean_se(da * db)
        assert abs(c.value) <= 4 * c.se

    def test_fbm_wiener_integral(self):
        g = TimeGrid(1.0, 32)
        a, b = simulate_brownian(g, 20_000, SEED), simulate_fbm(g, 0.75, 20_000, SEED)
        d = mixed_divergence(AdaptedProcessSample.constant(a), AdaptedProcessSample.constant(b), 1.0, 1.0, (a, b))
        assert np.allclose(d.values, a.terminal + b.terminal)
        with pytest.raises(ValueError):
            mixed_divergence(AdaptedProcessSample.constant(a), AdaptedProcessSample.from_state(b, lambda t, x: x),
                             1.0, 1.0, (a, b))

    def test_size_mismatch(self, parts):
        a, _ = parts
        b = simulate_poisson(a.grid, 3.0, 10, SEED)
        with pytest.raises(ValueError):
            mixed_divergence(AdaptedProcessSample.constant(a), JumpIntegrand.constant(), 1, 1, (a, b))
