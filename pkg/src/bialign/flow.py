"""Flow-field feature alignment: flow generation, gating, bilinear warping.

A flow field is a 2-channel tensor at the target feature's resolution;
channel 0 is the horizontal displacement dx and channel 1 the vertical
displacement dy, both in pixel units.  Warping samples the input at
``p + flow(p)`` with 4-neighbor bilinear weights, clamping out-of-range
sample coordinates to the border, so a zero flow is the exact identity
at every pixel.

``gfam`` composes the three steps (flow from the concatenated pair, a
sigmoid pixel gate from the target feature, the warp); ``fam`` is the same
composition with the gate pinned to 1.  With zero-initialized flow and gate
convolutions both reduce to the identity on the (size-matched) warped
feature, which makes an aligned model start out equal to the plain
concatenation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ops import bilinear_resize, concat_channels, conv2d, sigmoid
from .tensor import ShapeError, Tensor, as64, from64, mul_elem, record


@dataclass
class AlignParams:
    """Convolution parameters for one alignment module.

    flow_weight is (2, c_s + c_t, 3, 3); gate_weight (1, c_t, 3, 3) is None
    for the ungated variant.
    """

    flow_weight: Tensor
    flow_bias: Tensor
    gate_weight: Optional[Tensor] = None
    gate_bias: Optional[Tensor] = None


def _to_common_size(f_s: Tensor, f_t: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinearly upsample the smaller-spatial input to the larger one's size."""
    hs, ws = f_s.shape[2:]
    ht, wt = f_t.shape[2:]
    if (hs, ws) == (ht, wt):
        return f_s, f_t
    if hs * ws < ht * wt:
        return bilinear_resize(f_s, ht, wt), f_t
    return f_s, bilinear_resize(f_t, hs, ws)


def make_flow_field(f_s: Tensor, f_t: Tensor, flow_weight: Tensor, flow_bias: Tensor) -> Tensor:
    """Predict a 2-channel flow field from a source/target feature pair.

    The smaller input is upsampled to the larger one's size, the two are
    concatenated source-first, and a single 3x3 convolution produces the
    flow at the common resolution.
    """
    if f_s.shape[0] != f_t.shape[0]:
        raise ShapeError(f"make_flow_field: batch mismatch {f_s.shape} vs {f_t.shape}")
    if flow_weight.shape[0] != 2:
        raise ShapeError("make_flow_field: flow convolution must have 2 output channels")
    f_s, f_t = _to_common_size(f_s, f_t)
    cat = concat_channels(f_s, f_t)
    return conv2d(cat, flow_weight, flow_bias, stride=1, padding=1)


def apply_gate(flow: Tensor, f_t: Tensor, gate_weight: Tensor, gate_bias: Tensor) -> Tensor:
    """Scale a flow field by a per-pixel sigmoid gate computed from f_t."""
    if flow.shape[2:] != f_t.shape[2:]:
        raise ShapeError(f"apply_gate: resolution mismatch {flow.shape} vs {f_t.shape}")
    if gate_weight.shape[0] != 1:
        raise ShapeError("apply_gate: gate convolution must have 1 output channel")
    gate = sigmoid(conv2d(f_t, gate_weight, gate_bias, stride=1, padding=1))
    return mul_elem(flow, gate)  # gate broadcasts over the two flow channels


def warp_bilinear(f: Tensor, flow: Tensor) -> Tensor:
    """Sample f at p + flow(p) with 4-neighbor bilinear interpolation.

    Sample coordinates are clamped to the image border, so zero flow returns
    f bit-for-bit and outputs always lie within [min(f), max(f)].  Gradients
    are produced for both f and the flow; the flow gradient is zero wherever
    the clamp is active.
    """
    n, c, h, w = f.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"warp_bilinear: flow must be ({n},2,{h},{w}), got {flow.shape}")

    f64 = as64(f)
    flow64 = as64(flow)
    dx = flow64[:, 0]
    dy = flow64[:, 1]
    base_x = np.arange(w, dtype=np.float64).reshape(1, 1, w)
    base_y = np.arange(h, dtype=np.float64).reshape(1, h, 1)
    sx_raw = base_x + dx
    sy_raw = base_y + dy
    sx = np.clip(sx_raw, 0.0, w - 1.0)
    sy = np.clip(sy_raw, 0.0, h - 1.0)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.minimum(x0, w - 1)
    y0 = np.minimum(y0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0

    nn = np.arange(n)[:, None, None]
    f00 = f64[nn, :, y0, x0].transpose(0, 3, 1, 2)  # (n, c, h, w)
    f10 = f64[nn, :, y0, x1].transpose(0, 3, 1, 2)
    f01 = f64[nn, :, y1, x0].transpose(0, 3, 1, 2)
    f11 = f64[nn, :, y1, x1].transpose(0, 3, 1, 2)

    wxe = wx[:, None]
    wye = wy[:, None]
    out64 = (
        (1.0 - wxe) * (1.0 - wye) * f00
        + wxe * (1.0 - wye) * f10
        + (1.0 - wxe) * wye * f01
        + wxe * wye * f11
    )
    out = from64(out64)

    def bwd(g):
        g_f = None
        if f.requires_grad:
            g_f = np.zeros((n, c, h * w), dtype=np.float64)
            corners = (
                (y0, x0, (1.0 - wx) * (1.0 - wy)),
                (y0, x1, wx * (1.0 - wy)),
                (y1, x0, (1.0 - wx) * wy),
                (y1, x1, wx * wy),
            )
            ch_idx = np.arange(c)[:, None]
            for yy, xx, wgt in corners:
                contrib = g * wgt[:, None]  # (n, c, h, w)
                flat = (yy * w + xx).reshape(n, h * w)
                for b in range(n):
                    np.add.at(g_f[b], (ch_idx, flat[b][None, :]), contrib[b].reshape(c, h * w))
            g_f = g_f.reshape(n, c, h, w)
        g_flow = None
        if flow.requires_grad:
            in_x = (sx_raw >= 0.0) & (sx_raw <= w - 1.0)
            in_y = (sy_raw >= 0.0) & (sy_raw <= h - 1.0)
            d_dx = (1.0 - wye) * (f10 - f00) + wye * (f11 - f01)
            d_dy = (1.0 - wxe) * (f01 - f00) + wxe * (f11 - f10)
            g_flow = np.zeros((n, 2, h, w), dtype=np.float64)
            g_flow[:, 0] = (g * d_dx).sum(axis=1) * in_x
            g_flow[:, 1] = (g * d_dy).sum(axis=1) * in_y
        return g_f, g_flow

    return record(out, (f, flow), bwd)


def gfam(f_s: Tensor, f_t: Tensor, params: AlignParams, mode: str = "warp_target") -> Tensor:
    """Gated flow alignment: flow + sigmoid gate + bilinear warp.

    The default mode warps the (size-matched) target feature by the gated
    flow; "warp_source" warps the source feature instead.  Output spatial
    dims equal the larger of the two inputs'.
    """
    if params.gate_weight is None or params.gate_bias is None:
        raise ShapeError("gfam: params carry no gate convolution (use fam instead)")
    f_s_c, f_t_c = _to_common_size(f_s, f_t)
    flow = make_flow_field(f_s_c, f_t_c, params.flow_weight, params.flow_bias)
    gated = apply_gate(flow, f_t_c, params.gate_weight, params.gate_bias)
    return _warp_by_mode(f_s_c, f_t_c, gated, mode)


def fam(f_s: Tensor, f_t: Tensor, params: AlignParams, mode: str = "warp_target") -> Tensor:
    """Ungated flow alignment: gfam with the gate fixed to 1 everywhere."""
    f_s_c, f_t_c = _to_common_size(f_s, f_t)
    flow = make_flow_field(f_s_c, f_t_c, params.flow_weight, params.flow_bias)
    return _warp_by_mode(f_s_c, f_t_c, flow, mode)


def _warp_by_mode(f_s: Tensor, f_t: Tensor, flow: Tensor, mode: str) -> Tensor:
    if mode == "warp_target":
        return warp_bilinear(f_t, flow)
    if mode == "warp_source":
        return warp_bilinear(f_s, flow)
    raise ValueError(f"unknown warp mode {mode!r}")
