import numpy as np
import pytest

import bialign as ba
from bialign.flow import AlignParams
from bialign.gradcheck import _safe_flow


def _align_params(c_s, c_t, seed=0, gated=True, flow_std=0.0, bias=0.0):
    flow_w = (
        ba.zeros((2, c_s + c_t, 3, 3))
        if flow_std == 0.0
        else ba.randn((2, c_s + c_t, 3, 3), seed=seed, stddev=flow_std)
    )
    return AlignParams(
        flow_weight=flow_w,
        flow_bias=ba.full((2, 1, 1, 1), bias),
        gate_weight=ba.zeros((1, c_t, 3, 3)) if gated else None,
        gate_bias=ba.zeros((1, 1, 1, 1)) if gated else None,
    )


def test_flow_field_zero_params_gives_zero_flow():
    f_s = ba.randn((1, 3, 6, 6), seed=1)
    f_t = ba.randn((1, 3, 6, 6), seed=2)
    flow = ba.make_flow_field(f_s, f_t, ba.zeros((2, 6, 3, 3)), ba.zeros((2, 1, 1, 1)))
    assert np.all(flow.data == 0.0)


def test_flow_field_upsamples_smaller_input():
    f_s = ba.randn((1, 3, 2, 2), seed=1)
    f_t = ba.randn((1, 3, 8, 8), seed=2)
    flow = ba.make_flow_field(f_s, f_t, ba.zeros((2, 6, 3, 3)), ba.zeros((2, 1, 1, 1)))
    assert flow.shape == (1, 2, 8, 8)


def test_flow_field_batch_mismatch():
    with pytest.raises(ba.ShapeError):
        ba.make_flow_field(
            ba.zeros((1, 3, 4, 4)), ba.zeros((2, 3, 4, 4)),
            ba.zeros((2, 6, 3, 3)), ba.zeros((2, 1, 1, 1)),
        )


def test_gate_zero_params_halves_flow():
    flow = ba.randn((1, 2, 5, 5), seed=3)
    f_t = ba.randn((1, 4, 5, 5), seed=4)
    gated = ba.apply_gate(flow, f_t, ba.zeros((1, 4, 3, 3)), ba.zeros((1, 1, 1, 1)))
    assert np.allclose(gated.data, 0.5 * flow.data, atol=1e-7)


def test_gate_saturated_high_keeps_flow():
    flow = ba.randn((1, 2, 5, 5), seed=5)
    f_t = ba.randn((1, 4, 5, 5), seed=6)
    gated = ba.apply_gate(flow, f_t, ba.zeros((1, 4, 3, 3)), ba.full((1, 1, 1, 1), 30.0))
    assert np.allclose(gated.data, flow.data, atol=1e-6)


def test_gate_saturated_low_kills_flow():
    flow = ba.randn((1, 2, 5, 5), seed=7)
    f_t = ba.randn((1, 4, 5, 5), seed=8)
    gated = ba.apply_gate(flow, f_t, ba.zeros((1, 4, 3, 3)), ba.full((1, 1, 1, 1), -30.0))
    assert np.allclose(gated.data, 0.0, atol=1e-6)
    warped = ba.warp_bilinear(f_t, gated)
    assert np.allclose(warped.data, f_t.data, atol=1e-4)


def test_gate_values_strictly_inside_unit_interval():
    f_t = ba.randn((1, 3, 6, 6), seed=9, stddev=2.0)
    flow = ba.full((1, 2, 6, 6), 1.0)
    gate_w = ba.randn((1, 3, 3, 3), seed=10, stddev=0.5)
    gated = ba.apply_gate(flow, f_t, gate_w, ba.zeros((1, 1, 1, 1)))
    # gated flow magnitude never exceeds the raw flow magnitude
    assert np.all(np.abs(gated.data) <= np.abs(flow.data) + 1e-7)
    assert np.all(np.abs(gated.data) > 0.0)


def test_warp_zero_flow_is_bit_exact_identity():
    f = ba.randn((2, 3, 6, 7), seed=11)
    out = ba.warp_bilinear(f, ba.zeros((2, 2, 6, 7)))
    assert np.array_equal(out.data, f.data)


def test_warp_integer_shift_on_ramp():
    w = 6
    ramp = np.tile(np.arange(w, dtype=np.float32), (1, 1, 4, 1))
    f = ba.Tensor(ramp)
    flow = np.zeros((1, 2, 4, w), dtype=np.float32)
    flow[0, 0] = 1.0  # sample one pixel to the right
    out = ba.warp_bilinear(f, ba.Tensor(flow))
    assert np.allclose(out.data[0, 0, :, : w - 1], ramp[0, 0, :, 1:])
    # border column clamps to the last in-range sample
    assert np.allclose(out.data[0, 0, :, w - 1], w - 1)


def test_warp_half_pixel_shift_on_ramp():
    w = 6
    ramp = np.tile(np.arange(w, dtype=np.float32), (1, 1, 4, 1))
    f = ba.Tensor(ramp)
    flow = np.zeros((1, 2, 4, w), dtype=np.float32)
    flow[0, 0] = 0.5
    out = ba.warp_bilinear(f, ba.Tensor(flow))
    assert np.allclose(out.data[0, 0, :, : w - 1], ramp[0, 0, :, : w - 1] + 0.5)


def test_warp_output_bounded_by_input_range():
    f = ba.randn((1, 3, 8, 8), seed=12)
    flow = ba.randn((1, 2, 8, 8), seed=13, stddev=3.0)
    out = ba.warp_bilinear(f, flow)
    assert out.data.min() >= f.data.min() - 1e-6
    assert out.data.max() <= f.data.max() + 1e-6


def test_warp_shape_mismatch():
    with pytest.raises(ba.ShapeError):
        ba.warp_bilinear(ba.zeros((1, 3, 4, 4)), ba.zeros((1, 2, 5, 4)))


def test_warp_gradients_match_finite_differences():
    f = ba.randn((1, 3, 6, 6), seed=14)
    flow = _safe_flow((1, 2, 6, 6), seed=15)
    w = ba.randn((1, 3, 6, 6), seed=16)

    def probe_flow(t):
        return ba.sum_all(ba.mul_elem(ba.warp_bilinear(f, t), w))

    def probe_image(t):
        return ba.sum_all(ba.mul_elem(ba.warp_bilinear(t, flow), w))

    assert ba.finite_diff_check(probe_flow, flow) <= 1e-3
    assert ba.finite_diff_check(probe_image, f) <= 1e-3


def test_gfam_zero_params_is_identity_on_target():
    f_s = ba.randn((1, 3, 8, 8), seed=17)
    f_t = ba.randn((1, 3, 8, 8), seed=18)
    out = ba.gfam(f_s, f_t, _align_params(3, 3))
    assert np.array_equal(out.data, f_t.data)


def test_gfam_output_size_is_larger_input():
    f_s = ba.randn((1, 3, 2, 2), seed=19)
    f_t = ba.randn((1, 3, 8, 8), seed=20)
    out = ba.gfam(f_s, f_t, _align_params(3, 3))
    assert out.shape == (1, 3, 8, 8)
    # warp_source mode warps the (upsampled) source instead
    out_src = ba.gfam(f_s, f_t, _align_params(3, 3), mode="warp_source")
    assert out_src.shape == (1, 3, 8, 8)


def test_gfam_requires_gate_params():
    with pytest.raises(ba.ShapeError):
        ba.gfam(
            ba.zeros((1, 2, 4, 4)), ba.zeros((1, 2, 4, 4)),
            _align_params(2, 2, gated=False),
        )


def test_fam_equals_gate_saturated_gfam():
    f_s = ba.randn((1, 3, 8, 8), seed=21)
    f_t = ba.randn((1, 3, 8, 8), seed=22)
    params = _align_params(3, 3, seed=23, flow_std=0.2, bias=0.3)
    params.gate_bias = ba.full((1, 1, 1, 1), 40.0)  # sigmoid == 1.0 in float64
    gated = ba.gfam(f_s, f_t, params)
    ungated = ba.fam(f_s, f_t, params)
    assert np.array_equal(gated.data, ungated.data)


def test_fam_differs_from_gfam_at_moderate_gate():
    f_s = ba.randn((1, 3, 8, 8), seed=24)
    f_t = ba.randn((1, 3, 8, 8), seed=25)
    params = _align_params(3, 3, seed=26, flow_std=0.2, bias=0.4)
    assert not np.array_equal(ba.gfam(f_s, f_t, params).data, ba.fam(f_s, f_t, params).data)


def test_fam_zero_flow_params_is_identity():
    f_s = ba.randn((1, 3, 6, 6), seed=27)
    f_t = ba.randn((1, 3, 6, 6), seed=28)
    out = ba.fam(f_s, f_t, _align_params(3, 3, gated=False))
    assert np.array_equal(out.data, f_t.data)


def test_gfam_gradcheck_through_module():
    f_s = ba.randn((1, 2, 6, 6), seed=29)
    f_t = ba.randn((1, 2, 6, 6), seed=30)
    params = _align_params(2, 2, seed=31, flow_std=0.05, bias=0.4)
    w = ba.randn((1, 2, 6, 6), seed=32)

    def probe(t):
        return ba.sum_all(ba.mul_elem(ba.gfam(t, f_t, params), w))

    assert ba.finite_diff_check(probe, f_s) <= 1e-3
