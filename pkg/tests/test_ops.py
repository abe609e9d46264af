import numpy as np
import pytest

import bialign as ba


def test_conv_all_ones_center_and_corner():
    x = ba.full((1, 1, 3, 3), 1.0)
    w = ba.full((1, 1, 3, 3), 1.0)
    b = ba.zeros((1, 1, 1, 1))
    out = ba.conv2d(x, w, b, stride=1, padding=1)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_1x1_identity():
    x = ba.randn((1, 1, 4, 4), seed=1)
    w = ba.full((1, 1, 1, 1), 1.0)
    b = ba.zeros((1, 1, 1, 1))
    out = ba.conv2d(x, w, b)
    assert np.array_equal(out.data, x.data)


def test_conv_stride2_output_size():
    x = ba.randn((1, 3, 8, 8), seed=1)
    w = ba.randn((4, 3, 3, 3), seed=2)
    b = ba.zeros((4, 1, 1, 1))
    out = ba.conv2d(x, w, b, stride=2, padding=1)
    assert out.shape == (1, 4, 4, 4)


def test_conv_errors():
    x = ba.randn((1, 3, 4, 4), seed=1)
    b = ba.zeros((2, 1, 1, 1))
    with pytest.raises(ba.ShapeError):
        ba.conv2d(x, ba.randn((2, 4, 3, 3), seed=2), b)  # channel mismatch
    with pytest.raises(ba.ShapeError):
        ba.conv2d(x, ba.randn((2, 3, 2, 2), seed=2), b)  # even kernel
    with pytest.raises(ba.ShapeError):
        ba.conv2d(x, ba.randn((2, 3, 3, 3), seed=2), b, stride=3)
    with pytest.raises(ba.ShapeError):
        ba.conv2d(ba.randn((1, 3, 2, 2), seed=1), ba.randn((2, 3, 5, 5), seed=2), b)


def test_conv_translation_equivariance_interior():
    x = ba.randn((1, 2, 9, 9), seed=3)
    shifted = ba.Tensor(np.roll(x.data, 1, axis=3))
    w = ba.randn((3, 2, 3, 3), seed=4)
    b = ba.randn((3, 1, 1, 1), seed=5, stddev=0.1)
    out = ba.conv2d(x, w, b, stride=1, padding=1)
    out_shifted = ba.conv2d(shifted, w, b, stride=1, padding=1)
    # away from the wrap-around columns, shifting input shifts output
    assert np.allclose(out_shifted.data[:, :, :, 2:-1], out.data[:, :, :, 1:-2], atol=1e-6)


def test_batchnorm_constant_channel_is_zeroed():
    x = ba.full((2, 3, 4, 4), 7.0)
    gamma = ba.full((1, 3, 1, 1), 1.0)
    beta = ba.zeros((1, 3, 1, 1))
    stats = (np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32))
    out = ba.batchnorm2d(x, gamma, beta, stats, mode="train")
    assert np.allclose(out.data, 0.0)


def test_batchnorm_gamma_zero_gives_beta():
    x = ba.randn((2, 3, 4, 4), seed=1)
    gamma = ba.zeros((1, 3, 1, 1))
    beta = ba.full((1, 3, 1, 1), 0.25)
    stats = (np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32))
    out = ba.batchnorm2d(x, gamma, beta, stats, mode="train")
    assert np.allclose(out.data, 0.25)


def test_batchnorm_normalizes_moments():
    x = ba.randn((4, 3, 8, 8), seed=2, stddev=3.0)
    gamma = ba.full((1, 3, 1, 1), 1.0)
    beta = ba.zeros((1, 3, 1, 1))
    stats = (np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32))
    out = ba.batchnorm2d(x, gamma, beta, stats, mode="train").data.astype(np.float64)
    for c in range(3):
        vals = out[:, c]
        assert abs(vals.mean()) < 1e-4
        assert abs(vals.var() - 1.0) < 1e-4


def test_batchnorm_updates_running_stats():
    x = ba.randn((4, 2, 8, 8), seed=3, stddev=2.0)
    gamma = ba.full((1, 2, 1, 1), 1.0)
    beta = ba.zeros((1, 2, 1, 1))
    mean = np.zeros(2, dtype=np.float32)
    var = np.ones(2, dtype=np.float32)
    ba.batchnorm2d(x, gamma, beta, (mean, var), mode="train", momentum=0.1)
    batch_mean = x.data.astype(np.float64).mean(axis=(0, 2, 3))
    batch_var = x.data.astype(np.float64).var(axis=(0, 2, 3))
    assert np.allclose(mean, 0.1 * batch_mean, atol=1e-6)
    assert np.allclose(var, 0.9 + 0.1 * batch_var, atol=1e-5)


def test_batchnorm_eval_is_deterministic_affine():
    x = ba.randn((2, 3, 4, 4), seed=4)
    gamma = ba.randn((1, 3, 1, 1), seed=5)
    beta = ba.randn((1, 3, 1, 1), seed=6)
    stats = (np.full(3, 0.5, dtype=np.float32), np.full(3, 2.0, dtype=np.float32))
    a = ba.batchnorm2d(x, gamma, beta, stats, mode="eval")
    b = ba.batchnorm2d(x, gamma, beta, stats, mode="eval")
    assert np.array_equal(a.data, b.data)


def test_batchnorm_rejects_degenerate_batch():
    x = ba.randn((1, 3, 1, 1), seed=1)
    gamma = ba.full((1, 3, 1, 1), 1.0)
    beta = ba.zeros((1, 3, 1, 1))
    stats = (np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32))
    with pytest.raises(ba.ShapeError):
        ba.batchnorm2d(x, gamma, beta, stats, mode="train")


def test_relu_and_sigmoid_values():
    x = ba.tensor([-1.0, 0.0, 2.0])
    out = ba.relu(x)
    assert out.data.reshape(-1).tolist() == [0.0, 0.0, 2.0]
    s = ba.sigmoid(ba.tensor([0.0]))
    assert s.data.reshape(-1)[0] == pytest.approx(0.5)


def test_sigmoid_gradient_at_zero():
    x = ba.tensor([0.0], requires_grad=True)
    ba.reset_tape()
    ba.backward(ba.sum_all(ba.sigmoid(x)))
    assert x.grad.reshape(-1)[0] == pytest.approx(0.25)


def test_relu_subgradient_at_zero_is_zero():
    x = ba.tensor([0.0], requires_grad=True)
    ba.reset_tape()
    ba.backward(ba.sum_all(ba.relu(x)))
    assert x.grad.reshape(-1)[0] == 0.0


def test_sigmoid_extreme_inputs_are_finite():
    s = ba.sigmoid(ba.tensor([-500.0, 500.0]))
    assert s.is_finite()
    assert s.data.reshape(-1)[0] == pytest.approx(0.0, abs=1e-6)
    assert s.data.reshape(-1)[1] == pytest.approx(1.0, abs=1e-6)


def test_resize_identity_is_bit_exact():
    x = ba.randn((2, 3, 5, 7), seed=7)
    out = ba.bilinear_resize(x, 5, 7)
    assert np.array_equal(out.data, x.data)


def test_resize_preserves_constants():
    x = ba.full((1, 2, 4, 4), 5.0)
    up = ba.bilinear_resize(x, 9, 13)
    assert np.array_equal(up.data, np.full((1, 2, 9, 13), 5.0, dtype=np.float32))


def test_resize_2x2_to_3x3_center():
    x = ba.tensor([[0.0, 1.0], [2.0, 3.0]])
    out = ba.bilinear_resize(x, 3, 3)
    assert out.data[0, 0, 1, 1] == pytest.approx(1.5)


def test_resize_down_then_up_constant():
    x = ba.full((1, 1, 8, 8), 2.25)
    down = ba.bilinear_resize(x, 3, 3)
    up = ba.bilinear_resize(down, 8, 8)
    assert np.array_equal(up.data, x.data)


def test_resize_half_pixel_mapping_also_supported():
    x = ba.tensor([[0.0, 1.0], [2.0, 3.0]])
    out = ba.bilinear_resize(x, 4, 4, align_corners=False)
    assert out.shape == (1, 1, 4, 4)
    assert out.data[0, 0, 0, 0] == pytest.approx(0.0)


def test_concat_and_slice_roundtrip():
    a = ba.randn((1, 2, 4, 4), seed=1)
    b = ba.randn((1, 3, 4, 4), seed=2)
    cat = ba.concat_channels(a, b)
    assert cat.shape == (1, 5, 4, 4)
    from bialign.ops import slice_channels

    assert np.array_equal(slice_channels(cat, 0, 2).data, a.data)
    assert np.array_equal(slice_channels(cat, 2, 5).data, b.data)


def test_concat_backward_splits_ones():
    a = ba.randn((1, 2, 3, 3), seed=1, requires_grad=True)
    b = ba.randn((1, 3, 3, 3), seed=2, requires_grad=True)
    ba.reset_tape()
    ba.backward(ba.sum_all(ba.concat_channels(a, b)))
    assert np.all(a.grad == 1.0)
    assert np.all(b.grad == 1.0)


def test_concat_spatial_mismatch():
    with pytest.raises(ba.ShapeError):
        ba.concat_channels(ba.zeros((1, 1, 3, 3)), ba.zeros((1, 1, 4, 3)))


def test_pool_identity_when_bins_match():
    x = ba.randn((1, 2, 3, 3), seed=3)
    out = ba.adaptive_avg_pool(x, 3)
    assert np.array_equal(out.data, x.data)


def test_pool_global_mean():
    x = ba.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ba.adaptive_avg_pool(x, 1)
    assert out.data.reshape(-1)[0] == pytest.approx(2.5)


def test_pool_quadrant_means_on_ramp():
    ramp = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = ba.adaptive_avg_pool(ba.Tensor(ramp), 2)
    assert np.allclose(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_pool_rejects_bins_above_size():
    with pytest.raises(ba.ShapeError):
        ba.adaptive_avg_pool(ba.zeros((1, 1, 2, 2)), 3)


def test_log_softmax_equal_logits():
    x = ba.tensor(np.zeros((1, 2, 1, 1), dtype=np.float32))
    out = ba.log_softmax_channel(x)
    assert np.allclose(out.data, np.log(0.5))


def test_log_softmax_extreme_logits_stable():
    x = ba.Tensor(np.array([1000.0, 0.0], dtype=np.float32).reshape(1, 2, 1, 1))
    out = ba.log_softmax_channel(x)
    assert out.is_finite()
    assert out.data[0, 0, 0, 0] == pytest.approx(0.0, abs=1e-6)
    assert out.data[0, 1, 0, 0] == pytest.approx(-1000.0)


def test_log_softmax_exp_sums_to_one():
    x = ba.randn((2, 5, 3, 3), seed=8, stddev=2.0)
    out = ba.log_softmax_channel(x)
    sums = np.exp(out.data.astype(np.float64)).sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-6)


def test_log_softmax_needs_two_channels():
    with pytest.raises(ba.ShapeError):
        ba.log_softmax_channel(ba.zeros((1, 1, 2, 2)))
