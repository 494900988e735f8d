"""Forward-mode derivative engine checks against finite differences."""

import math

import numpy as np
import pytest

from hybridlap import adiff
from hybridlap.adiff import Dual, constant, grad, seed, smoothmin, softplus, value


def central_diff(fn, x, h=1e-6):
    """Central finite-difference gradient of scalar fn at x (1-D array)."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        hp = h * max(1.0, abs(x[i]))
        xp = x.copy(); xp[i] += hp
        xm = x.copy(); xm[i] -= hp
        g[i] = (fn(xp) - fn(xm)) / (2.0 * hp)
    return g


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1.0)


class TestDualBasics:
    def test_seed_and_value(self):
        xs = seed([2.0, 3.0, 5.0])
        assert [value(x) for x in xs] == [2.0, 3.0, 5.0]
        assert np.array_equal(xs[1].dot, [0.0, 1.0, 0.0])

    def test_seed_offset(self):
        xs = seed([1.0, 2.0], n=5, offset=2)
        assert np.array_equal(xs[0].dot, [0, 0, 1, 0, 0])
        assert np.array_equal(xs[1].dot, [0, 0, 0, 1, 0])

    def test_constant_has_zero_derivative(self):
        c = constant(7.5, 3)
        assert value(c) == 7.5
        assert np.array_equal(c.dot, np.zeros(3))

    def test_polynomial_gradient_exact(self):
        x, y = seed([3.0, -2.0])
        f = x * x * y + 4.0 * x - y / 2.0 + 1.0
        assert value(f) == 3.0 * 3.0 * -2.0 + 12.0 + 1.0 + 1.0
        assert np.allclose(grad(f, 2), [2 * 3.0 * -2.0 + 4.0, 9.0 - 0.5])

    def test_division_both_sides(self):
        x, = seed([4.0], n=1)
        f = 3.0 / x
        assert np.allclose(grad(f, 1), [-3.0 / 16.0])
        g = x / 8.0
        assert np.allclose(grad(g, 1), [0.125])

    def test_pow_and_neg_and_abs(self):
        x, = seed([2.0], n=1)
        assert np.allclose(grad(x ** 3.0, 1), [12.0])
        assert np.allclose(grad(-x, 1), [-1.0])
        y, = seed([-2.0], n=1)
        assert value(abs(y)) == 2.0
        assert np.allclose(grad(abs(y), 1), [-1.0])

    def test_comparisons_use_values(self):
        x, y = seed([1.0, 2.0])
        assert x < y and y > x and x <= 1.0 and y >= 2.0
        assert float(x) == 1.0


class TestElementaryFunctions:
    def test_sqrt_exp_log_on_floats(self):
        assert adiff.sqrt(9.0) == 3.0
        assert adiff.exp(0.0) == 1.0
        assert adiff.log(1.0) == 0.0
        assert adiff.log1p(0.0) == 0.0

    def test_composite_gradient_matches_fd(self):
        rng = np.random.default_rng(42)

        def f_duals(z):
            a, b, c = seed(list(z))
            out = adiff.sqrt(a * a + 0.5) * adiff.exp(b / 10.0) \
                + adiff.log(c + 3.0) / (a + 4.0)
            return out

        def f_plain(z):
            a, b, c = z
            return math.sqrt(a * a + 0.5) * math.exp(b / 10.0) \
                + math.log(c + 3.0) / (a + 4.0)

        for _ in range(40):
            z = rng.uniform([-2.0, -5.0, -1.0], [2.0, 5.0, 4.0])
            g_ad = grad(f_duals(z), 3)
            g_fd = central_diff(f_plain, z)
            for i in range(3):
                assert rel_err(g_ad[i], g_fd[i]) < 1e-6


class TestSoftplus:
    def test_upper_envelope_of_relu(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            x = rng.uniform(-50.0, 50.0)
            w = rng.uniform(1e-3, 2.0)
            sp = softplus(x, w)
            assert sp >= max(x, 0.0)
            assert sp <= max(x, 0.0) + w * math.log(2.0) + 1e-12

    def test_large_arguments_do_not_overflow(self):
        assert softplus(1e6, 0.01) == 1e6
        assert softplus(-1e6, 0.01) == 0.0

    def test_derivative_is_sigmoid(self):
        x, = seed([0.0], n=1)
        sp = softplus(x, 1.0)
        assert np.allclose(grad(sp, 1), [0.5])
        y, = seed([3.0], n=1)
        d = grad(softplus(y, 0.5), 1)[0]
        assert 0.99 < d <= 1.0


class TestSmoothmin:
    def test_lower_envelope_of_min(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = rng.uniform(-10.0, 10.0)
            b = rng.uniform(-10.0, 10.0)
            w = rng.uniform(1e-4, 1.0)
            sm = smoothmin(a, b, w)
            assert sm <= min(a, b) + 1e-12
            assert sm >= min(a, b) - w * math.log(2.0) - 1e-12

    def test_symmetry(self):
        assert smoothmin(1.0, 4.0, 0.2) == pytest.approx(smoothmin(4.0, 1.0, 0.2))

    def test_far_apart_tracks_smaller(self):
        assert smoothmin(1.0, 100.0, 0.1) == pytest.approx(1.0, abs=1e-12)

    def test_derivative_blends(self):
        x, = seed([0.0], n=1)
        sm = smoothmin(x, 0.0, 1.0)
        # at the crossover both branches contribute equally
        assert np.allclose(grad(sm, 1), [0.5])

    def test_gradient_matches_fd_near_kink(self):
        w = 0.05

        def f(z):
            return smoothmin(z[0], 2.0 - z[0], w)

        for x0 in (0.9, 0.999, 1.0, 1.001, 1.1):
            x, = seed([x0], n=1)
            g_ad = grad(smoothmin(x, 2.0 - x, w), 1)[0]
            g_fd = central_diff(f, np.array([x0]), h=1e-7)[0]
            assert rel_err(g_ad, g_fd) < 1e-5
