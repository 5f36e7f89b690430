import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from diffincl import (
    F0, G0, Finf, Ginf, GradInterval, ModelError, add_quadratic, builtin, eval_model, grad_interval,
    lebourg_check, linear_model, model_from_spec, scale, sum_models, truncate, zero_model,
)
from diffincl.function_model import FunctionModel


def f0(t):
    return np.sqrt(t) * (0.5 + np.sin(1.0 / t))


def finf(t):
    return np.sqrt(t) * (0.5 + np.sin(t))


def F0_oracle(s):
    # t = 1/x turns the integral into a Fourier tail on [1/s, inf)
    a = 1.0 / s
    smooth = 0.5 * (2.0 / 3.0) * a ** -1.5
    b = a + 400.0
    near, _ = integrate.quad(lambda x: x ** -2.5 * np.sin(x), a, b, limit=2000, epsabs=1e-16, epsrel=1e-13)
    far, _ = integrate.quad(lambda x: x ** -2.5, b, np.inf, weight="sin", wvar=1.0)
    return smooth + near + far


def Finf_oracle(s):
    v, _ = integrate.quad(finf, 0.0, s, limit=500, epsabs=1e-13, epsrel=1e-13)
    return v


class TestValues:
    def test_zero_at_origin(self):
        for m in (F0(), Finf(), G0(2), Ginf(2)):
            assert eval_model(m, 0.0) == 0.0

    def test_zero_extension(self):
        for m in (F0(), Finf(), G0(0.5), Ginf(3), add_quadratic(F0(), 2.0)):
            assert eval_model(m, -1.0) == 0.0
            assert tuple(grad_interval(m, -0.5)) == (0.0, 0.0)

    @pytest.mark.parametrize("s", [0.25, 0.1, 0.031, 0.0042, 1.3e-4])
    def test_F0_against_fourier_quadrature(self, s):
        assert eval_model(F0(), s) == pytest.approx(F0_oracle(s), rel=1e-10, abs=1e-16)

    @pytest.mark.parametrize("s", [0.5, 3.0, 17.2, 95.0])
    def test_Finf_against_quadrature(self, s):
        assert eval_model(Finf(), s) == pytest.approx(Finf_oracle(s), rel=1e-10)

    def test_G0_and_Ginf_closed_forms(self):
        s = 0.3
        assert eval_model(G0(2), s) == pytest.approx(math.log1p(s ** 4) * max(0.0, math.cos(1 / s)))
        assert eval_model(Ginf(2), math.pi) == pytest.approx(0.0, abs=1e-12)
        assert eval_model(Ginf(2), 2.0) == pytest.approx(4.0 * math.sin(2.0))

    def test_increment_matches_value_difference(self):
        F = F0()
        a = np.array([0.01, 0.2, 0.0031, 0.05])
        b = np.array([0.011, 0.21, 0.0031 + 1e-9, 0.04])
        inc = F.increment(a, b)
        ref = np.array([F0_oracle(y) - F0_oracle(x) for x, y in zip(a, b)])
        assert np.allclose(inc, ref, rtol=1e-8, atol=1e-18)


class TestGradients:
    @pytest.mark.parametrize("t", [0.013, 0.2, 0.77])
    def test_F0_smooth_point(self, t):
        g = grad_interval(F0(), t)
        assert g.lo == g.hi == pytest.approx(f0(t), rel=1e-14)

    @pytest.mark.parametrize("t", [0.4, 5.0, 41.0])
    def test_Finf_smooth_point(self, t):
        g = grad_interval(Finf(), t)
        assert g.lo == g.hi == pytest.approx(finf(t), rel=1e-14)

    def test_gradient_at_origin_is_hull_with_zero(self):
        lo, hi = grad_interval(linear_model(3.0), 0.0)
        assert (lo, hi) == (0.0, 3.0)

    def test_G0_kink(self):
        # cos(1/s) = 0 with the positive part switching on to the right
        kk = 3
        s_star = 1.0 / (math.pi / 2 + 2 * kk * math.pi)
        G = G0(2)
        g = grad_interval(G, s_star)
        h = 1e-7
        right = (eval_model(G, s_star + h) - eval_model(G, s_star)) / h
        left = (eval_model(G, s_star) - eval_model(G, s_star - h)) / h
        assert g.lo == pytest.approx(min(left, right), abs=1e-6 * abs(right))
        assert g.hi == pytest.approx(max(left, right), rel=1e-5)
        assert g.lo == 0.0

    def test_Ginf_kink_at_pi(self):
        g = grad_interval(Ginf(2), math.pi)
        assert g.lo == pytest.approx(-math.pi ** 2, rel=1e-12)
        assert g.hi == pytest.approx(0.0, abs=1e-12)
        h = 1e-7
        G = Ginf(2)
        left = (eval_model(G, math.pi) - eval_model(G, math.pi - h)) / h
        assert left == pytest.approx(g.lo, rel=1e-5)

    def test_interval_rejects_inverted(self):
        with pytest.raises(ModelError):
            GradInterval(1.0, 0.0)


class TestCombinators:
    def test_sum_with_zero_is_identity(self):
        s = np.linspace(-0.1, 0.5, 101)
        F = F0()
        S = sum_models(F, zero_model())
        assert np.array_equal(S.value(s), F.value(s))
        assert all(np.array_equal(a, b) for a, b in zip(S.grad(s), F.grad(s)))

    def test_sum_smooth_point_matches_central_differences(self):
        S = sum_models(F0(), G0(2))
        t, h = 0.23, 1e-6
        fd = (eval_model(S, t + h) - eval_model(S, t - h)) / (2 * h)
        g = grad_interval(S, t)
        assert g.lo == g.hi
        assert g.lo == pytest.approx(fd, rel=1e-6)

    def test_scale_negative_swaps_endpoints(self):
        lo, hi = grad_interval(scale(Ginf(2), -2.0), math.pi)
        assert (lo, hi) == pytest.approx((0.0, 2 * math.pi ** 2))

    def test_add_quadratic(self):
        assert eval_model(add_quadratic(zero_model(), 3.0), 2.0) == 6.0
        t = 0.3
        g = grad_interval(add_quadratic(F0(), 1.0), t)
        assert g.lo == g.hi == pytest.approx(f0(t) + t)
        s = np.linspace(-1, 1, 41)
        assert np.array_equal(add_quadratic(F0(), 0.0).value(s), F0().value(s))

    def test_truncate_chain_rule(self):
        eta = 0.5
        A = add_quadratic(linear_model(-2.0), 2.0)  # grad -2 + 2s, so [-1, -1] at eta
        T = truncate(A, eta)
        assert eval_model(T, 0.8) == eval_model(A, eta)
        assert tuple(grad_interval(T, 0.8)) == (0.0, 0.0)
        assert tuple(grad_interval(T, eta / 2)) == tuple(grad_interval(A, eta / 2))
        assert tuple(grad_interval(T, eta)) == (-1.0, 0.0)

    def test_truncate_hull_of_interval(self):
        class Box(FunctionModel):
            def _value_pos(self, s):
                return -1.5 * s

            def _grad_pos(self, s):
                return np.full_like(s, -2.0), np.full_like(s, -1.0)

        assert tuple(grad_interval(truncate(Box(), 1.0), 1.0)) == (-2.0, 0.0)

    def test_model_from_spec(self):
        m = model_from_spec({"sum": ["F0", {"scale": [0.5, {"name": "G0", "p": 2}]}]})
        assert eval_model(m, 0.2) == pytest.approx(eval_model(F0(), 0.2) + 0.5 * eval_model(G0(2), 0.2))
        with pytest.raises(ModelError):
            model_from_spec("H7")
        with pytest.raises(ModelError):
            model_from_spec({"name": "G0"})
        with pytest.raises(ModelError):
            builtin("G0")

    def test_singletons_cached(self):
        assert F0() is F0()
        assert Finf() is Finf()


class TestLebourg:
    def test_F0_interval(self):
        assert lebourg_check(F0(), 0.1, 0.2, 1000)

    @given(st.floats(-5, 5), st.floats(0.01, 3.0))
    @settings(max_examples=50, deadline=None)
    def test_linear_exact(self, a, w):
        assert lebourg_check(linear_model(1.7), a, a + w, 50)

    def test_corrupted_gradient_fails(self):
        class Shifted(FunctionModel):
            def _value_pos(self, s):
                return F0().value(s)

            def _grad_pos(self, s):
                lo, hi = F0().grad(s)
                return lo + 1.0, hi + 1.0

        assert not lebourg_check(Shifted(), 0.1, 0.2, 1000)

    @given(st.floats(1e-4, 0.5), st.floats(1e-6, 0.2))
    @settings(max_examples=60, deadline=None)
    def test_F0_random(self, a, w):
        assert lebourg_check(F0(), a, a + w, 400)

    @given(st.floats(0.0, 60.0), st.floats(1e-3, 5.0), st.sampled_from([0.5, 1.0, 2.0]))
    @settings(max_examples=60, deadline=None)
    def test_Ginf_random(self, a, w, p):
        assert lebourg_check(Ginf(p), a, a + w, 400)

    @given(st.floats(-0.5, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_lo_le_hi(self, s):
        for m in (F0(), G0(2), G0(0.5), Finf(), Ginf(2), truncate(add_quadratic(F0(), 1.0), 0.2)):
            g = grad_interval(m, s)
            assert g.lo <= g.hi
