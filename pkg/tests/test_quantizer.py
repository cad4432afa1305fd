import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffquant.quantizer import (
    ConfigError,
    EffectiveParams,
    Family,
    ParamBounds,
    Parametrization,
    Quantizer,
    QuantizerError,
    at_bitwidth,
    backward,
    bitwidth_expression,
    empirical_hessian,
    forward,
    infer_bitwidth,
    max_grad_norm_curve,
    pow2_backward,
    pow2_forward,
    project,
    quantize_tensor,
    quantize_tensor_backward,
    round_half_away,
    snap_pow2,
    uniform_backward,
    uniform_forward,
)

U3 = Parametrization.U3
LN2 = math.log(2.0)


def uniform_eff(d, q_max, b=3):
    return EffectiveParams(q_max=q_max, b=b, d=d)


def pow2_eff(q_min, q_max, b=3):
    return EffectiveParams(q_max=q_max, b=b, q_min=q_min)


class TestRounding:
    def test_half_away_from_zero(self):
        assert list(round_half_away(np.array([0.5, 1.5, -0.5, -2.5, 2.4]))) == [1, 2, -1, -3, 2]

    def test_snap_pow2(self):
        assert snap_pow2(0.3) == 0.25
        assert snap_pow2(3.0) == 4.0
        assert snap_pow2(1.0) == 1.0


class TestProjection:
    def test_stepsize_snaps_to_power_of_two(self):
        eff = project(Quantizer("U1", (3, 0.3)))
        assert eff.d == 0.25

    def test_bitwidth_rounds(self):
        assert project(Quantizer("U1", (3.4, 0.25))).b == 3
        assert project(Quantizer("U1", (3.5, 0.25))).b == 4

    def test_u1_derives_q_max(self):
        assert project(Quantizer("U1", (3, 0.25))).q_max == pytest.approx(0.75)

    def test_u2_derives_snapped_stepsize(self):
        eff = project(Quantizer("U2", (3, 0.75)))
        assert eff.d == 0.25 and eff.q_max == 0.75

    def test_u3_infers_bitwidth(self):
        eff = project(Quantizer("U3", (2.0**-3, 0.875)))
        assert eff.b == 4 and eff.q_max == 0.875

    def test_unsigned_uses_all_bits(self):
        eff = project(Quantizer("U1", (3, 0.25), signed=False))
        assert eff.q_max == pytest.approx(7 * 0.25)

    def test_p2_derives_q_max(self):
        eff = project(Quantizer("P2", (3, 0.25)))
        assert eff.q_max == 2.0

    def test_p1_derives_q_min(self):
        eff = project(Quantizer("P1", (3, 2.0)))
        assert eff.q_min == 0.25

    def test_with_zero_costs_a_bit(self):
        eff = project(Quantizer("P2", (3, 0.25), with_zero=True))
        assert eff.q_max == 0.5

    def test_q_max_snaps_for_pow2(self):
        assert project(Quantizer("P3", (0.25, 3.0))).q_max == 4.0

    def test_degenerate_range(self):
        with pytest.raises(QuantizerError):
            project(Quantizer("P3", (2.0, 2.0), bounds=ParamBounds(qmin_max=4.0)))

    def test_clips_into_bounds(self):
        eff = project(Quantizer("U3", (1e-9, 1e9)))
        bounds = ParamBounds()
        assert eff.d == bounds.d_min and eff.q_max == bounds.qmax_max

    def test_non_finite_latent(self):
        with pytest.raises(QuantizerError):
            project(Quantizer("U3", (math.nan, 1.0)))

    def test_bad_bounds(self):
        with pytest.raises(ConfigError):
            ParamBounds(d_min=1.0, d_max=0.5)
        with pytest.raises(ConfigError):
            ParamBounds(b_min=1)

    def test_with_zero_only_for_pow2(self):
        with pytest.raises(ConfigError):
            Quantizer("U3", (0.25, 1.0), with_zero=True)

    @given(st.sampled_from(list(Parametrization)),
           st.floats(2, 8), st.floats(2.0**-6, 2.0))
    def test_idempotent(self, param, a, b):
        if param.learns_bitwidth:
            latent = (a, b)
        elif param is U3:
            latent = (b / 8, b)
        else:
            latent = (b / 64, b)
        q = Quantizer(param, latent)
        eff = project(q)
        if param is U3:
            again = project(q.with_latent((eff.d, eff.q_max)))
        elif param is Parametrization.P3:
            again = project(q.with_latent((eff.q_min, eff.q_max)))
        else:
            second = {"U1": eff.d, "U2": eff.q_max, "P1": eff.q_max, "P2": eff.q_min}
            again = project(q.with_latent((eff.b, second[param.value])))
        assert again == eff


class TestUniformForward:
    eff = uniform_eff(0.25, 0.75)

    @pytest.mark.parametrize("x, expected", [(0.3, 0.25), (-0.9, -0.75), (0.125, 0.25),
                                             (-0.125, -0.25), (0.0, 0.0), (0.75, 0.75)])
    def test_examples(self, x, expected):
        assert uniform_forward(x, self.eff) == expected

    def test_unsigned_zeroes_negatives(self):
        assert uniform_forward(-0.3, self.eff, signed=False) == 0.0

    @given(st.floats(-10, 10), st.integers(-4, 4))
    def test_power_of_two_homogeneity(self, x, k):
        s = 2.0**k
        scaled = uniform_forward(x * s, uniform_eff(0.25 * s, 0.75 * s))
        assert scaled == uniform_forward(x, self.eff) * s


class TestUniformBackward:
    def test_u3_inner(self):
        g = uniform_backward(0.3, uniform_eff(0.25, 0.75), U3)
        assert g.grad_input == 1.0
        assert g.grad_theta[0] == pytest.approx(-0.2)
        assert g.grad_theta[1] == 0.0

    def test_u3_clip(self):
        g = uniform_backward(-1.0, uniform_eff(0.25, 0.75), U3)
        assert g.grad_input == 0.0
        assert tuple(g.grad_theta) == (0.0, -1.0)

    def test_u3_boundary_is_inner(self):
        g = uniform_backward(0.75, uniform_eff(0.25, 0.75), U3)
        assert g.grad_input == 1.0 and g.grad_theta[1] == 0.0

    def test_u1_clip(self):
        g = uniform_backward(1.0, uniform_eff(0.25, 0.75), Parametrization.U1)
        assert g.grad_theta[0] == pytest.approx(4 * LN2 * 0.25)
        assert g.grad_theta[1] == pytest.approx(3.0)

    def test_u2_inner(self):
        g = uniform_backward(0.3, uniform_eff(0.25, 0.75), Parametrization.U2)
        assert g.grad_theta[0] == pytest.approx(-(4 * LN2 / 3) * (0.25 - 0.3))
        assert g.grad_theta[1] == pytest.approx((0.25 - 0.3) / 0.75)

    @settings(max_examples=200)
    @given(st.floats(-20, 20), st.integers(-6, 2), st.floats(0.1, 8))
    def test_u3_bounds(self, x, k, q_max):
        g = uniform_backward(x, uniform_eff(2.0**k, q_max), U3).grad_theta
        assert abs(g[0]) <= 0.5
        assert g[1] in (-1.0, 0.0, 1.0)
        assert g[0] == 0.0 or g[1] == 0.0

    @given(st.floats(1.01, 5.0), st.integers(2, 6))
    def test_clip_region_matches_lattice_difference_in_q_max(self, x, k):
        # the saturation level d*round(q_max/d) moves linearly along q_max = k*d
        d = 0.25
        qm = k * d
        up = uniform_forward(x + 2, uniform_eff(d, qm + d))
        down = uniform_forward(x + 2, uniform_eff(d, qm - d))
        fd = (up - down) / (2 * d)
        for param in (Parametrization.U2, U3):
            g = uniform_backward(x + 2, uniform_eff(d, qm), param).grad_theta[1]
            assert g == pytest.approx(fd, rel=1e-6)

    def test_grad_input_is_clip_derivative(self):
        x = np.linspace(-2, 2, 401)
        x = x[np.abs(np.abs(x) - 0.75) > 1e-3]
        g = uniform_backward(x, uniform_eff(0.25, 0.75), U3).grad_input
        h = 1e-6
        fd = (np.clip(x + h, -0.75, 0.75) - np.clip(x - h, -0.75, 0.75)) / (2 * h)
        np.testing.assert_allclose(g, fd, atol=1e-9)


class TestPow2:
    eff = pow2_eff(0.25, 2.0)

    @pytest.mark.parametrize("x, expected", [(1.3, 1.0), (0.1, 0.25), (-5.0, -2.0),
                                             (0.0, 0.0), (0.25, 0.25), (2.0, 2.0)])
    def test_forward(self, x, expected):
        assert pow2_forward(x, self.eff) == expected

    def test_with_zero_threshold(self):
        assert pow2_forward(0.15, self.eff, with_zero=True) == 0.0
        assert pow2_forward(0.18, self.eff, with_zero=True) == 0.25

    def test_unsigned(self):
        assert pow2_forward(-1.3, self.eff, signed=False) == 0.0

    def test_p3_small(self):
        g = pow2_backward(0.1, self.eff, Parametrization.P3)
        assert g.grad_input == 0.0 and tuple(g.grad_theta) == (1.0, 0.0)

    def test_p3_middle(self):
        g = pow2_backward(1.3, self.eff, Parametrization.P3)
        assert g.grad_input == pytest.approx(1 / 1.3)
        assert tuple(g.grad_theta) == (0.0, 0.0)

    def test_p3_clip_keeps_sign(self):
        g = pow2_backward(-5.0, self.eff, Parametrization.P3)
        assert tuple(g.grad_theta) == (0.0, -1.0)

    def test_p1_small(self):
        g = pow2_backward(0.05, self.eff, Parametrization.P1)
        assert g.grad_theta[0] == pytest.approx(-0.5 * LN2**2 * 2.0)
        assert g.grad_theta[1] == pytest.approx(0.125)

    @settings(max_examples=200)
    @given(st.floats(-50, 50))
    def test_p3_one_nonzero_component(self, x):
        g = pow2_backward(x, self.eff, Parametrization.P3).grad_theta
        assert g[0] == 0.0 or g[1] == 0.0


class TestBitwidth:
    def test_uniform(self):
        assert infer_bitwidth(uniform_eff(2.0**-3, 0.875), Family.UNIFORM) == 4
        assert infer_bitwidth(uniform_eff(0.25, 1.0), Family.UNIFORM) == 4

    def test_pow2(self):
        assert infer_bitwidth(pow2_eff(0.25, 2.0), Family.POW2) == 3

    def test_unsigned_and_zero(self):
        assert infer_bitwidth(uniform_eff(2.0**-3, 0.875), Family.UNIFORM, signed=False) == 3
        assert infer_bitwidth(pow2_eff(0.25, 2.0), Family.POW2, signed=False, with_zero=True) == 3

    def test_invalid(self):
        with pytest.raises(QuantizerError):
            infer_bitwidth(pow2_eff(2.0, 2.0), Family.POW2)

    @given(st.integers(-10, 2), st.floats(2.0**-10, 100.0))
    def test_ceiling_of_expression(self, k, q_max):
        eff = uniform_eff(2.0**k, q_max)
        smooth = bitwidth_expression(eff, Family.UNIFORM)
        assert infer_bitwidth(eff, Family.UNIFORM) == math.ceil(smooth)

    @given(st.sampled_from(["U1", "U2", "P1", "P2"]), st.integers(2, 8), st.booleans())
    def test_roundtrip_with_b_latent(self, param, b, signed):
        n = b - int(signed)
        if n < 1 + int(param[0] == "P"):
            return
        # U2 is only self-consistent when q_max is a whole number of steps
        second = {"U1": 0.25, "U2": (2**n - 1) * 0.25, "P1": 2.0, "P2": 0.25}[param]
        q = Quantizer(param, (b, second), signed=signed)
        eff = project(q)
        assert infer_bitwidth(eff, q.family, signed) == b


class TestTensor:
    q = Quantizer("U3", (0.25, 0.75))

    def test_quantize(self):
        out, _ = quantize_tensor(np.array([0.3, -0.9, 0.125]), self.q)
        np.testing.assert_array_equal(out, [0.25, -0.75, 0.25])

    def test_empty(self):
        out, ctx = quantize_tensor(np.array([]), self.q)
        gx, gt = quantize_tensor_backward(np.array([]), ctx)
        assert out.size == 0 and gx.size == 0 and tuple(gt) == (0.0, 0.0)

    def test_zero_with_zero_code(self):
        out, _ = quantize_tensor(np.array([0.0]), Quantizer("P3", (0.25, 2.0), with_zero=True))
        assert out[0] == 0.0

    def test_backward_scales(self):
        _, ctx = quantize_tensor(np.array([0.3]), self.q)
        gx, gt = quantize_tensor_backward(np.array([2.0]), ctx)
        assert gx[0] == 2.0
        np.testing.assert_allclose(gt, [-0.4, 0.0])

    def test_backward_sums(self):
        _, ctx = quantize_tensor(np.array([0.3, -1.0]), self.q)
        _, gt = quantize_tensor_backward(np.ones(2), ctx)
        np.testing.assert_allclose(gt, [-0.2, -1.0])

    def test_zero_upstream(self):
        _, ctx = quantize_tensor(np.array([0.3, -1.0]), self.q)
        gx, gt = quantize_tensor_backward(np.zeros(2), ctx)
        assert not gx.any() and not np.any(gt)

    def test_shape_mismatch(self):
        _, ctx = quantize_tensor(np.array([0.3, -1.0]), self.q)
        with pytest.raises(ValueError):
            quantize_tensor_backward(np.ones(3), ctx)

    def test_non_finite(self):
        with pytest.raises(QuantizerError):
            quantize_tensor(np.array([np.inf]), self.q)

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=20))
    def test_linear_accumulation(self, xs):
        x = np.array(xs)
        _, ctx = quantize_tensor(x, self.q)
        _, total = quantize_tensor_backward(np.ones_like(x), ctx)
        parts = sum(backward(np.array([v]), self.q).grad_theta[:, 0] for v in xs)
        np.testing.assert_allclose(total, parts, atol=1e-12)


class TestAnalysis:
    def test_u3_curve_is_one(self):
        q = Quantizer("U3", (1.0, 1.0), bounds=ParamBounds(d_max=16, qmax_max=2.0**10))
        rows = max_grad_norm_curve(q, range(2, 9), np.linspace(-300, 300, 60001))
        np.testing.assert_allclose(rows[:, 1], 1.0)

    def test_u1_b4_norm(self):
        q = Quantizer("U1", (4, 1.0), bounds=ParamBounds(d_max=16))
        rows = max_grad_norm_curve(q, [4], np.linspace(-10, 10, 20001))
        assert rows[0, 1] == pytest.approx(math.hypot(7, 8 * LN2), rel=1e-9)

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            max_grad_norm_curve(Quantizer("U3", (1.0, 1.0)), [2], [])

    def test_at_bitwidth_keeps_stepsize(self):
        q = at_bitwidth(Quantizer("U2", (2, 1.0)), 5)
        eff = project(q)
        assert eff.b == 5 and eff.d == 1.0 and eff.q_max == 15.0

    def test_hessian_diagonal(self, gaussian):
        for q in (Quantizer("U3", (0.25, 0.75)), Quantizer("P3", (0.25, 2.0))):
            h = empirical_hessian(q, gaussian)
            assert h[0, 1] == 0.0 and h[1, 0] == 0.0

    def test_hessian_u2_coupled(self, gaussian):
        h = empirical_hessian(Quantizer("U2", (3, 0.75)), gaussian)
        assert abs(h[0, 1]) > 0

    def test_hessian_empty(self):
        with pytest.raises(ValueError):
            empirical_hessian(Quantizer("U3", (0.25, 0.75)), [])

    def test_generic_forward_matches_family(self):
        x = np.linspace(-3, 3, 101)
        q = Quantizer("P3", (0.25, 2.0))
        np.testing.assert_array_equal(forward(x, q), pow2_forward(x, project(q)))
