import math
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from stochfactor.randomness import (BLOCK_PATHS, THREADS_ENV, StreamKey, make_stream, map_blocks,
                                    sample_gaussian, sample_stable, stream_id, thread_count)


class TestStreams:
    def test_same_key_same_draws(self):
        a = make_stream(42, 0).random(100)
        b = make_stream(42, 0).random(100)
        assert np.array_equal(a, b)

    def test_distinct_ids_differ(self):
        assert not np.array_equal(make_stream(42, 0).random(100), make_stream(42, 1).random(100))

    def test_streams_uncorrelated(self):
        x = sample_gaussian(make_stream(42, 0), 100_000)
        y = sample_gaussian(make_stream(42, 1), 100_000)
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.02

    def test_rejects_out_of_range_seed(self):
        with pytest.raises(ValueError):
            make_stream(-1, 0)
        with pytest.raises(ValueError):
            StreamKey(0, 2 ** 64)

    def test_stream_key_generator_matches_make_stream(self):
        key = StreamKey.for_purpose(5, "W", 3)
        assert key.stream_id == stream_id("W", 3)
        assert np.array_equal(key.generator().random(5), make_stream(5, stream_id("W", 3)).random(5))

    @given(st.text(max_size=20), st.integers(0, 10 ** 6))
    def test_stream_id_is_stable_64bit(self, purpose, index):
        s = stream_id(purpose, index)
        assert 0 <= s < 2 ** 64
        assert s == stream_id(purpose, index)

    def test_purposes_separate(self):
        assert stream_id("W", 0) != stream_id("L", 0)
        assert stream_id("W", 0) != stream_id("W", 1)


class TestGaussian:
    @pytest.fixture(scope="class")
    @classmethod
    def draws(cls):
        return sample_gaussian(make_stream(1, 0), 10 ** 6)

    def test_mean(self, draws):
        assert abs(draws.mean()) <= 4 / math.sqrt(1e6)

    def test_variance(self, draws):
        assert abs(draws.var() - 1) <= 4 * math.sqrt(2 / 1e6)

    def test_skewness(self, draws):
        assert abs(stats.skew(draws)) <= 4 * math.sqrt(6 / 1e6)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            sample_gaussian(make_stream(1, 0), 0)


def _charfn(x, xi):
    c = np.cos(xi * x)
    return c.mean(), c.std(ddof=1) / math.sqrt(len(x))


class TestStable:
    def test_charfn_gamma_15(self):
        est, se = _charfn(sample_stable(make_stream(3, 0), 1.5, 1.0, 100_000), 1.0)
        assert abs(est - math.exp(-1)) <= 4 * se

    def test_cauchy_median_symmetric(self):
        x = sample_stable(make_stream(3, 1), 1.0, 1.0, 100_000)
        # median of a unit Cauchy sample has asymptotic sd pi / (2 sqrt(n))
        assert abs(np.median(x)) <= 4 * math.pi / (2 * math.sqrt(len(x)))

    def test_charfn_gamma_19_half(self):
        est, se = _charfn(sample_stable(make_stream(3, 2), 1.9, 1.0, 100_000), 0.5)
        assert abs(est - math.exp(-0.5 ** 1.9)) <= 4 * se

    @pytest.mark.parametrize("gamma", [0.5, 0.8, 1.0, 1.3, 1.7, 1.95])
    def test_charfn_grid(self, gamma):
        x = sample_stable(make_stream(11, int(gamma * 100)), gamma, 0.7, 100_000)
        for xi in np.linspace(0.2, 2.0, 10):
            est, se = _charfn(x, xi)
            assert abs(est - math.exp(-0.7 * xi ** gamma)) <= 4 * se

    @pytest.mark.parametrize("gamma", [0.0, 2.0, -1.0, 2.5, float("nan")])
    def test_rejects_bad_gamma(self, gamma):
        with pytest.raises(ValueError):
            sample_stable(make_stream(0, 0), gamma, 1.0, 10)

    def test_rejects_bad_scale(self):
        with pytest.raises(ValueError):
            sample_stable(make_stream(0, 0), 1.5, 0.0, 10)


class TestBlocks:
    def test_independent_of_thread_count(self, monkeypatch):
        fn = lambda rng, rows: sample_gaussian(rng, (rows, 3))
        monkeypatch.setenv(THREADS_ENV, "1")
        a = map_blocks(3 * BLOCK_PATHS + 17, 9, "W", fn)
        monkeypatch.setenv(THREADS_ENV, "4")
        assert thread_count() == 4
        b = map_blocks(3 * BLOCK_PATHS + 17, 9, "W", fn)
        assert np.array_equal(a, b)

    def test_prefix_stable_across_M(self):
        fn = lambda rng, rows: sample_gaussian(rng, rows)
        a = map_blocks(BLOCK_PATHS + 5, 9, "W", fn)
        b = map_blocks(2 * BLOCK_PATHS, 9, "W", fn)
        assert np.array_equal(a[:BLOCK_PATHS], b[:BLOCK_PATHS])

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "many")
        with pytest.raises(ValueError):
            thread_count()
