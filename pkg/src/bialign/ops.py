"""Differentiable network building blocks on NCHW tensors.

Conventions used by every op here:

* forward math runs in float64 and rounds once to float32 on output,
  backward rules run entirely in float64;
* every resampling op (``bilinear_resize`` and the warp in ``flow``) maps
  coordinates with the align-corners rule ``src = dst * (in - 1) / (out - 1)``,
  so a same-size resize is the bit-exact identity;
* accumulation orders are fixed, so repeated runs are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as64, from64, record


# ---------------------------------------------------------------------------
# Convolution (im2col + GEMM)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[
                :, :, ki : ki + stride * out_h : stride, kj : kj + stride * out_w : stride
            ]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution with zero padding.

    weight is (out_c, in_c, kh, kw) with odd kh/kw, bias is (out_c,1,1,1),
    stride is 1 or 2.  Output spatial size is floor((s + 2p - k)/stride) + 1.
    """
    n, in_c, h, w = x.shape
    out_c, w_in_c, kh, kw = weight.shape
    if w_in_c != in_c:
        raise ShapeError(f"conv2d: input has {in_c} channels, weight expects {w_in_c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if bias.shape != (out_c, 1, 1, 1):
        raise ShapeError(f"conv2d: bias must be ({out_c},1,1,1), got {bias.shape}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d: non-positive output size {out_h}x{out_w}")

    xp = np.zeros((n, in_c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = as64(x)
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)  # (n, in_c*kh*kw, L)
    w2 = as64(weight).reshape(out_c, in_c * kh * kw)
    out64 = np.matmul(w2, cols)  # (n, out_c, L)
    out64 += as64(bias).reshape(1, out_c, 1)
    out = from64(out64.reshape(n, out_c, out_h, out_w))

    def bwd(g):
        g2 = g.reshape(n, out_c, out_h * out_w)
        g_bias = g2.sum(axis=(0, 2)).reshape(out_c, 1, 1, 1) if bias.requires_grad else None
        g_weight = None
        if weight.requires_grad:
            g_weight = np.einsum("nol,nkl->ok", g2, cols).reshape(weight.shape)
        g_x = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)  # (n, in_c*kh*kw, L)
            dcols = dcols.reshape(n, in_c, kh, kw, out_h, out_w)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[
                        :, :, ki : ki + stride * out_h : stride, kj : kj + stride * out_w : stride
                    ] += dcols[:, :, ki, kj]
            g_x = dxp[:, :, padding : padding + h, padding : padding + w]
        return g_x, g_weight, g_bias

    return record(out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# Batch normalization


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_stats: tuple[np.ndarray, np.ndarray],
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with batch moments over (n, h, w), updates the
    running (mean, var) arrays in place, and records gradients for x, gamma
    and beta.  Eval mode is the deterministic affine map using the running
    stats.  Variance is the biased (1/m) estimator in both the batch and the
    running update.
    """
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(f"batchnorm2d: gamma/beta must be (1,{c},1,1)")
    running_mean, running_var = running_stats
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm2d: running stats must have shape ({c},)")

    x64 = as64(x)
    g64 = as64(gamma)
    b64 = as64(beta)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d: train mode needs more than one value per channel")
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        running_mean[:] = ((1.0 - momentum) * running_mean + momentum * mean).astype(np.float32)
        running_var[:] = ((1.0 - momentum) * running_var + momentum * var).astype(np.float32)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x64 - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = from64(g64 * xhat + b64)

        def bwd(g):
            dxhat = g * g64
            g_beta = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) if beta.requires_grad else None
            g_gamma = (
                (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) if gamma.requires_grad else None
            )
            g_x = None
            if x.requires_grad:
                inv = inv_std.reshape(1, c, 1, 1)
                sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                g_x = inv / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            return g_x, g_gamma, g_beta

        return record(out, (x, gamma, beta), bwd)

    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
        xhat = (x64 - running_mean.astype(np.float64).reshape(1, c, 1, 1)) * inv_std.reshape(
            1, c, 1, 1
        )
        out = from64(g64 * xhat + b64)

        def bwd(g):
            g_beta = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) if beta.requires_grad else None
            g_gamma = (
                (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) if gamma.requires_grad else None
            )
            g_x = g * g64 * inv_std.reshape(1, c, 1, 1) if x.requires_grad else None
            return g_x, g_gamma, g_beta

        return record(out, (x, gamma, beta), bwd)

    raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# Activations


def relu(x: Tensor) -> Tensor:
    x64 = as64(x)
    mask = x64 > 0  # derivative at exactly 0 is defined as 0
    out = from64(np.where(mask, x64, 0.0))

    def bwd(g):
        return (g * mask,)

    return record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x64 = as64(x)
    s = np.empty_like(x64)
    pos = x64 >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x64[pos]))
    e = np.exp(x64[~pos])
    s[~pos] = e / (1.0 + e)
    out = from64(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Bilinear resize


def _resize_matrix(out_size: int, in_size: int, align_corners: bool) -> np.ndarray:
    """Row-stochastic (out, in) interpolation matrix for one axis."""
    a = np.zeros((out_size, in_size), dtype=np.float64)
    if align_corners:
        if out_size == 1 or in_size == 1:
            # Degenerate axes sample coordinate 0.
            a[:, 0] = 1.0
            return a
        src = np.arange(out_size, dtype=np.float64) * (in_size - 1) / (out_size - 1)
    else:
        src = (np.arange(out_size, dtype=np.float64) + 0.5) * in_size / out_size - 0.5
        src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    rows = np.arange(out_size)
    a[rows, i0] += 1.0 - frac
    a[rows, i1] += frac
    return a


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = True) -> Tensor:
    """Bilinear interpolation to (out_h, out_w).

    The library-wide convention is align_corners=True (src = dst*(in-1)/(out-1)),
    under which resizing to the input size is the bit-exact identity.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target size {out_h}x{out_w} must be >= 1")
    n, c, h, w = x.shape
    ah = _resize_matrix(out_h, h, align_corners)
    aw = _resize_matrix(out_w, w, align_corners)
    x64 = as64(x)
    out64 = np.einsum("oi,ncij,pj->ncop", ah, x64, aw, optimize=True)
    out = from64(out64)

    def bwd(g):
        return (np.einsum("oi,ncop,pj->ncij", ah, g, aw, optimize=True),)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Channel concatenation


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    out = from64(np.concatenate([as64(a), as64(b)], axis=1))

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return record(out, (a, b), bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    n, c, h, w = x.shape
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {c} channels")
    out = from64(as64(x)[:, start:stop].copy())

    def bwd(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[:, start:stop] = g
        return (gx,)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Adaptive average pooling


def _bin_bounds(size: int, bins: int):
    starts = (np.arange(bins) * size) // bins
    ends = -((-((np.arange(bins) + 1) * size)) // bins)  # ceil division
    return starts, ends


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Average pooling to a (bins x bins) grid.

    Cell (i, j) averages rows [floor(i*h/bins), ceil((i+1)*h/bins)) and the
    analogous column range.  Requires bins <= h and bins <= w.
    """
    n, c, h, w = x.shape
    if bins > h or bins > w:
        raise ShapeError(f"adaptive_avg_pool: bins={bins} exceeds input {h}x{w}")
    if bins < 1:
        raise ShapeError("adaptive_avg_pool: bins must be >= 1")
    rs, re = _bin_bounds(h, bins)
    cs, ce = _bin_bounds(w, bins)
    x64 = as64(x)
    out64 = np.empty((n, c, bins, bins), dtype=np.float64)
    for i in range(bins):
        for j in range(bins):
            out64[:, :, i, j] = x64[:, :, rs[i] : re[i], cs[j] : ce[j]].mean(axis=(2, 3))
    out = from64(out64)

    def bwd(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        for i in range(bins):
            for j in range(bins):
                area = (re[i] - rs[i]) * (ce[j] - cs[j])
                gx[:, :, rs[i] : re[i], cs[j] : ce[j]] += (g[:, :, i : i + 1, j : j + 1] / area)
        return (gx,)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Log-softmax over channels


def log_softmax_channel(x: Tensor) -> Tensor:
    """Per-pixel log-softmax over the channel axis, max-subtracted for stability."""
    n, c, h, w = x.shape
    if c < 2:
        raise ShapeError(f"log_softmax_channel: needs >= 2 channels, got {c}")
    x64 = as64(x)
    xmax = x64.max(axis=1, keepdims=True)
    shifted = x64 - xmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ls = shifted - lse
    out = from64(ls)

    def bwd(g):
        softmax = np.exp(ls)
        return (g - softmax * g.sum(axis=1, keepdims=True),)

    return record(out, (x,), bwd)
