import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from stochfactor.adjoint import (GramSingularError, IntegrandBasis, adjointness_check, build_gram,
                                 clark_ocone_reconstruct, covariant_derivative, gaussian_conditional_mean,
                                 leibniz_defect, malliavin_crosscheck, predictable_projection,
                                 random_span_coefficients, relative_l2_error, variance_identity_check)
from stochfactor.integration import AdaptedProcessSample, BrownianLebesgue, energy_norm, mean_se
from stochfactor.paths import TimeGrid, simulate_brownian

SEED = 7
SPEC = BrownianLebesgue()


@pytest.fixture(scope="module")
def X(brownian_1e5):
    return brownian_1e5


@pytest.fixture(scope="module")
def gram(X):
    return build_gram(IntegrandBasis.uniform(X.grid, 16, 3).bind(X), X, SPEC)


@pytest.fixture(scope="module")
def reps(X, gram):
    BT = X.terminal
    Fs = {"bt": BT, "bt2": BT ** 2, "exp": np.exp(BT - 0.5), "call": np.maximum(BT, 0.0)}
    return Fs, {k: covariant_derivative(F, gram.basis, X, gram=gram) for k, F in Fs.items()}


def left_states(X):
    return X.paths[:, :-1], X.grid.left_nodes[None, :]


class TestBasis:
    def test_uniform_edges(self):
        b = IntegrandBasis.uniform(TimeGrid(1.0, 256), 16, 3)
        assert b.K == 64 and b.edges[0] == 0 and b.edges[-1] == 256
        assert all(e2 - e1 == 16 for e1, e2 in zip(b.edges, b.edges[1:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            IntegrandBasis(8, (0, 5, 3, 8))
        with pytest.raises(ValueError):
            IntegrandBasis(8, (0, 8), features="spline")
        with pytest.raises(ValueError):
            IntegrandBasis(8, (0, 8), extras=("running_min",))

    def test_predictable(self, brownian_small):
        """Changing the path after t_i leaves column i untouched."""
        X = brownian_small
        b = IntegrandBasis.uniform(X.grid, 8, 3, extras=("running_max", "running_mean")).bind(X)
        coef = np.random.default_rng(0).standard_normal(b.K)
        base = b.evaluate(coef, X).values
        paths = X.paths.copy()
        paths[:, 41:] += 1.0
        from stochfactor.paths import PathEnsemble
        Y = PathEnsemble(X.grid, paths, X.label)
        moved = b.evaluate(coef, Y).values
        assert np.array_equal(base[:, :41], moved[:, :41])

    def test_description_roundtrip(self, brownian_small):
        b = IntegrandBasis.uniform(brownian_small.grid, 4, 2, features="hat", knots=5).bind(brownian_small)
        assert IntegrandBasis.from_description(json.loads(json.dumps(b.describe()))) == b


class TestGram:
    def test_single_constant(self, X):
        g = build_gram(IntegrandBasis.uniform(X.grid, 1, 0), X, SPEC)
        assert abs(g.G[0, 0] - 1) <= 4 * g.G_se[0, 0]

    def test_disjoint_bins_orthogonal(self, X):
        g = build_gram(IntegrandBasis.uniform(X.grid, 16, 0), X, SPEC)
        off = ~np.eye(16, dtype=bool)
        assert np.all(np.abs(g.G[off]) <= 4 * g.G_se[off])
        assert np.allclose(g.E[off], 0.0)

    def test_isometry(self, gram):
        assert gram.isometry_report().passed

    def test_ridge_default(self, gram):
        a = gram.active
        assert gram.ridge >= 1e-8 * np.trace(gram.G[np.ix_(a, a)]) / a.sum() * (1 - 1e-12)
        assert gram.condition < 1e12

    def test_empty_bins_dropped(self):
        X = simulate_brownian(TimeGrid(1.0, 8), 1000, SEED)
        # degree-2 features at t=0 are all constant: the x and x^2 columns of bin 0 vanish
        g = build_gram(IntegrandBasis(8, (0, 1, 8), 2), X, SPEC)
        assert g.active.tolist() == [True, False, False, True, True, True]

    def test_singular_with_fixed_ridge(self):
        # seven features per bin on three paths: rank deficient
        X = simulate_brownian(TimeGrid(1.0, 8), 3, SEED)
        with pytest.raises(GramSingularError):
            build_gram(IntegrandBasis.uniform(X.grid, 8, 6), X, SPEC, ridge=0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_basis(self, brownian_small):
        from stochfactor.paths import PathEnsemble
        P = brownian_small.paths[:10].copy()
        P[0, 5] = np.inf
        with pytest.raises(FloatingPointError):
            build_gram(IntegrandBasis.uniform(brownian_small.grid, 2, 1), PathEnsemble(brownian_small.grid, P, "x"))


class TestCovariantDerivative:
    def test_bt_is_one(self, X, gram, reps):
        phi = reps[1]["bt"].evaluate(X).values
        per_bin = [phi[:, gram.basis.bin_steps(b)].mean() for b in range(16)]
        assert max(abs(v - 1) for v in per_bin) <= 0.02

    def test_bt2_is_two_b(self, X, reps):
        x, t = left_states(X)
        assert relative_l2_error(reps[1]["bt2"].evaluate(X).values, 2 * x) <= 0.03

    def test_exp_martingale_needs_quintic(self, X, reps):
        """Cubics leave a truncation error of about 0.14 at t=1; degree 5 clears 0.05."""
        x, t = left_states(X)
        F = reps[0]["exp"]
        target = np.exp(x - t / 2)
        assert relative_l2_error(reps[1]["exp"].evaluate(X).values, target) > 0.05
        rep5 = covariant_derivative(F, IntegrandBasis.uniform(X.grid, 16, 5), X)
        assert relative_l2_error(rep5.evaluate(X).values, target) <= 0.05

    def test_linearity(self, X, gram, reps):
        Fs, R = reps
        a, b = 1.7, -0.6
        c = covariant_derivative(a * Fs["bt2"] + b * Fs["exp"], gram.basis, X, gram=gram).coefficients
        expect = a * R["bt2"].coefficients + b * R["exp"].coefficients
        assert np.allclose(c, expect, rtol=1e-12, atol=1e-12 * np.abs(expect).max())

    def test_boundedness(self, X, gram, reps):
        C = gram.operator_norm()
        for k, F in reps[0].items():
            norm = math.sqrt(reps[1][k].energy_norm_sq())
            assert norm <= (1 + 1e-6) * C * np.std(F), k

    def test_constant(self, X, gram):
        rep = covariant_derivative(np.full(X.M, 3.5), gram.basis, X, gram=gram)
        assert np.all(np.abs(rep.coefficients) <= 1e-12)

    def test_json_roundtrip(self, X, reps):
        rep = reps[1]["bt2"]
        back = type(rep).from_dict(json.loads(rep.to_json()))
        assert np.array_equal(back.coefficients, rep.coefficients)
        sub = simulate_brownian(X.grid, 100, SEED + 1)
        assert np.array_equal(back.evaluate(sub).values, rep.evaluate(sub).values)

    def test_length_mismatch(self, X, gram):
        with pytest.raises(ValueError):
            covariant_derivative(np.zeros(10), gram.basis, X, gram=gram)


class TestProjection:
    @pytest.fixture(scope="class")
    @classmethod
    def small(cls):
        X = simulate_brownian(TimeGrid(1.0, 64), 20_000, SEED)
        return X, IntegrandBasis.uniform(X.grid, 16, 1).bind(X)

    def test_future_value(self, small):
        X, b = small
        u = np.repeat(X.terminal[:, None], X.grid.N, axis=1)
        p = predictable_projection(u, b, X)
        assert relative_l2_error(p.values, X.paths[:, :-1]) <= 0.03

    def test_future_increment(self, small):
        X, b = small
        u = X.terminal[:, None] - X.paths[:, :-1]
        p = predictable_projection(u, b, X)
        assert math.sqrt(np.mean(np.sum(p.values ** 2, axis=1) * X.grid.dt)) <= 0.03

    def test_basis_element_unchanged(self, small):
        X, b = small
        coef = np.zeros(b.K)
        coef[5] = 1.3
        u = b.evaluate(coef, X).values
        assert np.max(np.abs(predictable_projection(u, b, X).values - u)) <= 1e-8

    def test_idempotent(self, small):
        X, b = small
        u = np.sin(X.terminal)[:, None] * np.ones((1, X.grid.N))
        p1 = predictable_projection(u, b, X).values
        p2 = predictable_projection(p1, b, X).values
        assert np.max(np.abs(p2 - p1)) <= 1e-8

    def test_singular_bin_falls_back(self):
        X = simulate_brownian(TimeGrid(1.0, 8), 200, SEED)
        b = IntegrandBasis(8, (0, 1, 8), 2)
        p = predictable_projection(np.ones((200, 8)), b, X)
        assert p.notes and "bin 0" in p.notes[0]
        assert np.allclose(p.values, 1.0)

    def test_shape_mismatch(self, small):
        X, b = small
        with pytest.raises(ValueError):
            predictable_projection(np.zeros((3, 3)), b, X)


class TestClarkOcone:
    @pytest.mark.parametrize("key,tol", [("bt", 1e-3), ("bt2", 0.01), ("exp", 0.01), ("call", 0.02)])
    def test_residual(self, X, reps, key, tol):
        _, r = clark_ocone_reconstruct(reps[0][key], reps[1][key], X, tolerance=tol)
        assert r.passed, r.line()

    def test_call_hat_basis_tracks_digital(self):
        """Monomials in the state cannot follow the steep digital near T; hat functions can."""
        X = simulate_brownian(TimeGrid(1.0, 128), 20_000, SEED)
        F = np.maximum(X.terminal, 0.0)
        rep = covariant_derivative(F, IntegrandBasis.uniform(X.grid, 16, features="hat", knots=17), X)
        x, t = left_states(X)
        assert relative_l2_error(rep.evaluate(X).values, stats.norm.cdf(x / np.sqrt(1 - t))) <= 0.05
        assert clark_ocone_reconstruct(F, rep, X, tolerance=0.02)[1].passed

    def test_constant_functional(self, X, gram):
        F = np.full(X.M, 2.0)
        rep = covariant_derivative(F, gram.basis, X, gram=gram)
        Fhat, r = clark_ocone_reconstruct(F, rep, X)
        assert r.tolerance == 1e-12 and r.passed
        assert np.allclose(Fhat.values, 2.0)

    def test_extra_randomness_leaves_orthogonal_residual(self, X, gram):
        indep = simulate_brownian(X.grid, X.M, SEED, purpose="independent").terminal
        F = X.terminal + indep
        _, r = clark_ocone_reconstruct(F, covariant_derivative(F, gram.basis, X, gram=gram), X)
        # only B_T is representable: half of the variance stays in the residual
        assert abs(r.estimate - 0.5) <= 0.02


class TestVarianceIdentity:
    @pytest.mark.parametrize("key,target", [("bt", 1.0), ("bt2", 2.0), ("exp", math.e - 1)])
    def test_identity_and_oracle(self, X, reps, key, target):
        rep = reps[1][key]
        r = variance_identity_check(reps[0][key], rep, SPEC, X)
        assert r.passed, r.line()
        phi = rep.evaluate(X)
        e = energy_norm(phi, SPEC, X)
        assert abs(e.value - target) <= 4 * (e.se + math.sqrt(2 * target ** 2 / X.M)) + r.metadata["residual_slack"]


class TestAdjointness:
    def test_examples(self, X, reps):
        Fs, R = reps
        one = AdaptedProcessSample.constant(X)
        bt = AdaptedProcessSample.from_state(X, lambda t, x: x)
        r1, = adjointness_check(Fs["bt"], R["bt"], [one], SPEC, X)
        r2, r3 = adjointness_check(Fs["bt2"], R["bt2"], [one, bt], SPEC, X)
        for r in (r1, r2, r3):
            assert r.passed, r.line()
        assert abs(r1.target - 1) <= 0.02
        assert abs(r2.target) <= 0.02
        assert abs(r3.target - 1) <= 0.03

    def test_random_span_integrands(self, X, reps, gram):
        tests = random_span_coefficients(gram.basis, 5, SEED)
        for r in adjointness_check(reps[0]["exp"], reps[1]["exp"], tests, SPEC, X):
            assert r.passed, r.line()

    def test_coefficient_and_process_paths_agree(self, reps, gram):
        X = simulate_brownian(TimeGrid(1.0, 256), 2000, SEED + 3)
        c = random_span_coefficients(gram.basis, 1, SEED)[0]
        F = X.terminal ** 2
        rep = covariant_derivative(F, gram.basis, X)
        a, = adjointness_check(F, rep, [c], SPEC, X)
        b, = adjointness_check(F, rep, [gram.basis.evaluate(c, X)], SPEC, X)
        assert a.estimate == pytest.approx(b.estimate, rel=1e-10)
        assert a.target == pytest.approx(b.target, rel=1e-10)


class TestMalliavin:
    def test_identity(self, X, reps):
        assert malliavin_crosscheck(lambda x: x, lambda x: np.ones_like(x), X, reps[1]["bt"], 0.02).passed

    def test_square(self, X, reps):
        assert malliavin_crosscheck(lambda x: x * x, lambda x: 2 * x, X, reps[1]["bt2"], 0.03).passed

    def test_sine_degree_five(self, X):
        b = IntegrandBasis.uniform(X.grid, 16, 5)
        rep = covariant_derivative(np.sin(X.terminal), b, X)
        assert malliavin_crosscheck(np.sin, np.cos, X, rep, 0.05).passed

    @given(st.floats(-3, 3), st.floats(0.01, 2.0))
    def test_conditional_mean_cosine(self, x, v):
        got = gaussian_conditional_mean(np.cos, np.array([x]), v)[0]
        assert got == pytest.approx(math.cos(x) * math.exp(-v / 2), abs=1e-12)

    def test_conditional_mean_cdf(self):
        got = gaussian_conditional_mean(stats.norm.cdf, np.array([0.0]), 1.0)
        assert got[0] == pytest.approx(0.5, abs=1e-12)


def test_leibniz_fails_for_brownian_square(brownian_small):
    X = brownian_small
    BT = X.terminal
    d = leibniz_defect(BT, BT, IntegrandBasis.uniform(X.grid, 8, 3), X)
    # D(B_T^2) = 2B_t while 2 B_T D(B_T) = 2B_T; the gap has energy 4 int (T - t) dt = 2
    assert abs(d.value - 2.0) <= 0.2


def test_relative_l2():
    assert relative_l2_error(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.0
    assert relative_l2_error(np.array([2.0]), np.array([1.0])) == 1.0
