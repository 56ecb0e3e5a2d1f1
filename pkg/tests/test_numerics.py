import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scer.numerics import (
    NotPositiveDefiniteError,
    cholesky,
    pooled_covariance,
    sigma_norm,
    solve_spd,
    std_normal_cdf,
)

from oracles import phi_series, random_spd


class TestStdNormalCdf:
    def test_zero(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_oracle_upper_quantile(self):
        assert phi_series(1.959963985) == pytest.approx(0.975, abs=1e-9)
        assert abs(std_normal_cdf(1.959963985) - phi_series(1.959963985)) <= 1e-10

    def test_deep_tail(self):
        v = std_normal_cdf(-8.0)
        assert 0.0 < v <= 1e-14
        assert abs(v - phi_series(-8.0)) <= 1e-10

    @pytest.mark.parametrize("x", np.linspace(-9, 9, 73))
    def test_matches_series(self, x):
        assert abs(std_normal_cdf(x) - phi_series(x)) <= 1e-10

    def test_symmetry_random(self):
        rng = np.random.default_rng(0)
        for x in rng.uniform(-10, 10, size=1000):
            assert abs(std_normal_cdf(x) + std_normal_cdf(-x) - 1.0) <= 1e-12

    def test_strictly_increasing(self):
        xs = np.linspace(-8, 6, 1751)  # above ~7 Phi rounds to 1.0 in float64
        vals = [std_normal_cdf(x) for x in xs]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
    def test_non_finite(self, bad):
        with pytest.raises(ValueError):
            std_normal_cdf(bad)


class TestSigmaNorm:
    def test_identity_is_euclidean(self):
        assert sigma_norm([3, 4], np.eye(2)) == 5.0

    def test_diagonal(self):
        assert sigma_norm([1, 1], np.diag([4.0, 1.0])) == pytest.approx(math.sqrt(5), abs=1e-15)

    def test_zero(self):
        assert sigma_norm([0, 0], np.diag([4.0, 1.0])) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            sigma_norm([1, 2, 3], np.eye(2))

    def test_indefinite(self):
        with pytest.raises(np.linalg.LinAlgError):
            sigma_norm([1, 0], np.diag([-1.0, 1.0]))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(-50, 50))
    def test_homogeneous(self, v, c):
        s = np.diag(np.arange(1, len(v) + 1, dtype=float))
        assert sigma_norm(np.array(v) * c, s) == pytest.approx(abs(c) * sigma_norm(v, s), rel=1e-12, abs=1e-12)

    def test_identity_random(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            v = rng.standard_normal(rng.integers(1, 10))
            assert abs(sigma_norm(v, np.eye(len(v))) - np.linalg.norm(v)) <= 1e-12


class TestPooledCovariance:
    def test_two_points(self):
        np.testing.assert_array_equal(pooled_covariance([[1, 0], [-1, 0]], ridge=0), [[1, 0], [0, 0]])
        np.testing.assert_allclose(
            pooled_covariance([[1, 0], [-1, 0]], ridge=1e-4), [[1.0001, 0], [0, 0.0001]], rtol=0, atol=1e-15
        )

    def test_constant_samples(self):
        x = np.tile([2.0, -1.0, 3.0], (7, 1))
        np.testing.assert_allclose(pooled_covariance(x, ridge=0.3), 0.3 * np.eye(3), atol=1e-15)

    def test_law_of_large_numbers(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((10000, 2)) * np.sqrt([2.0, 1.0])
        np.testing.assert_allclose(pooled_covariance(x, ridge=0), np.diag([2.0, 1.0]), atol=0.1)

    def test_divides_by_n(self):
        x = np.array([[0.0], [2.0], [4.0]])
        assert pooled_covariance(x, ridge=0)[0, 0] == pytest.approx(8.0 / 3.0)

    def test_too_few(self):
        with pytest.raises(ValueError):
            pooled_covariance([[1.0, 2.0]], ridge=0)

    def test_symmetric_and_factorizable(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = int(rng.integers(2, 12))
            x = rng.standard_normal((int(rng.integers(2, 6)), p))  # rank deficient
            s = pooled_covariance(x, ridge=1e-6)
            assert np.array_equal(s, s.T)
            cholesky(s)

    def test_default_ridge(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        s = pooled_covariance(x)
        assert s[1, 1] == pytest.approx(1e-4 * 1.0 / 2)


class TestSolveSpd:
    def test_identity(self):
        np.testing.assert_array_equal(solve_spd(np.eye(2), [2.0, 3.0]), [2.0, 3.0])

    def test_diagonal(self):
        np.testing.assert_allclose(solve_spd(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])

    def test_random_residual(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            s = random_spd(rng, 5)
            v = rng.standard_normal(5)
            u = solve_spd(s, v)
            resid = np.max(np.abs(s @ u - v))
            assert resid <= 1e-8 * (np.max(np.abs(s)) * np.max(np.abs(u)) + np.max(np.abs(v)))

    def test_names_failing_minor(self):
        s = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
        with pytest.raises(NotPositiveDefiniteError) as exc:
            solve_spd(s, [1.0, 1.0, 1.0])
        assert exc.value.minor == 3
        assert "order 3" in str(exc.value)

    def test_cholesky_reconstruction(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            s = random_spd(rng, int(rng.integers(1, 9)))
            L = cholesky(s)
            assert np.allclose(L, np.tril(L))
            assert np.max(np.abs(L @ L.T - s)) <= 1e-9 * np.max(np.abs(s))
