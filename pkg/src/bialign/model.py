"""Two-path segmentation network with bidirectional flow alignment.

Topology (shapes for an (n, 3, h, w) input, h and w divisible by 32):

* detail branch ("spatial path"): three stride-2 conv3x3 + BN + ReLU
  blocks, output (n, spatial_widths[-1], h/8, w/8);
* semantic branch ("context path"): stride-2 stem conv + four residual
  stages whose entry blocks have stride 2, then pyramid pooling, output
  (n, context_stage_widths[-1], h/32, w/32), projected with a 1x1 conv to
  the detail width and bilinearly upsampled to 1/8;
* alignment: per config, zero, one or two flow-alignment modules between
  the two 1/8 features (gated or ungated, one per direction);
* head: channel concat -> conv3x3 + BN + ReLU -> 1x1 classifier -> x8
  bilinear upsample to full-resolution class logits; a parallel 1x1 conv +
  sigmoid on the detail feature gives the boundary indicator map, also
  upsampled x8.

Flow and gate convolutions are zero-initialized, so any aligned variant
starts out numerically identical to the plain-concatenation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ops
from .flow import AlignParams, fam, gfam
from .rng import RandomStream
from .tensor import ShapeError, Tensor, add

ALIGNMENT_MODES = (
    "none",
    "gfam_cp_to_sp",
    "gfam_sp_to_cp",
    "fam_bidirectional",
    "gfam_bidirectional",
)


@dataclass
class ModelConfig:
    num_classes: int = 5
    spatial_widths: tuple[int, int, int] = (16, 32, 64)
    context_stem_width: int = 16
    context_stage_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    alignment: str = "gfam_bidirectional"
    spatial_loss_enabled: bool = True
    warp_mode: str = "warp_target"

    def __post_init__(self):
        self.spatial_widths = tuple(int(v) for v in self.spatial_widths)
        self.context_stage_widths = tuple(int(v) for v in self.context_stage_widths)
        self.ppm_bins = tuple(int(v) for v in self.ppm_bins)
        if self.alignment not in ALIGNMENT_MODES:
            raise ValueError(f"alignment must be one of {ALIGNMENT_MODES}, got {self.alignment!r}")
        if self.warp_mode not in ("warp_target", "warp_source"):
            raise ValueError(f"warp_mode must be warp_target or warp_source, got {self.warp_mode!r}")
        if len(self.spatial_widths) != 3 or len(self.context_stage_widths) != 4:
            raise ValueError("spatial_widths needs 3 entries, context_stage_widths needs 4")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")


class ParameterSet:
    """Named map of trainable tensors with deterministic (sorted) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def tensors(self):
        return [self._params[name] for name in self.names()]

    def total_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def clear_grads(self) -> None:
        for t in self._params.values():
            t.grad = None


@dataclass
class BatchNormState:
    """Running (mean, var) arrays per BN layer, keyed by layer name."""

    stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, name: str, channels: int) -> None:
        self.stats[name] = (
            np.zeros(channels, dtype=np.float32),
            np.ones(channels, dtype=np.float32),
        )

    def get(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.stats[name]

    def copy(self) -> "BatchNormState":
        out = BatchNormState()
        out.stats = {k: (m.copy(), v.copy()) for k, (m, v) in self.stats.items()}
        return out


# ---------------------------------------------------------------------------
# Parameter initialization


def _he_normal(stream: RandomStream, shape) -> Tensor:
    out_c, in_c, kh, kw = shape
    std = np.sqrt(2.0 / (in_c * kh * kw))
    return Tensor(stream.normal(shape, std).astype(np.float32))


def _add_conv(params: ParameterSet, state: Optional[BatchNormState], seed: int,
              name: str, in_c: int, out_c: int, k: int, bn: bool, zero: bool = False):
    if zero:
        weight = Tensor(np.zeros((out_c, in_c, k, k), dtype=np.float32))
    else:
        weight = _he_normal(RandomStream(seed, key=name + ".weight"), (out_c, in_c, k, k))
    params.add(name + ".weight", weight)
    params.add(name + ".bias", Tensor(np.zeros((out_c, 1, 1, 1), dtype=np.float32)))
    if bn:
        params.add(name + ".bn.gamma", Tensor(np.ones((1, out_c, 1, 1), dtype=np.float32)))
        params.add(name + ".bn.beta", Tensor(np.zeros((1, out_c, 1, 1), dtype=np.float32)))
        if state is not None:
            state.add(name + ".bn", out_c)


def _stage_block_names(cfg: ModelConfig):
    for s in range(4):
        for b in range(cfg.blocks_per_stage):
            yield s, b, f"cp.stage{s + 1}.block{b + 1}"


def init_parameters(cfg: ModelConfig, seed: int) -> tuple[ParameterSet, BatchNormState]:
    """Deterministic initialization.

    Conv weights are He-normal (stddev sqrt(2 / fan_in)) from a per-name
    substream of the given seed, so two configs sharing a layer name get
    bit-identical values for it; biases and BN beta start at 0, BN gamma at
    1, and all alignment (flow/gate) convolutions start at exactly zero.
    """
    params = ParameterSet()
    state = BatchNormState()

    in_c = 3
    for i, width in enumerate(cfg.spatial_widths):
        _add_conv(params, state, seed, f"sp.block{i + 1}", in_c, width, 3, bn=True)
        in_c = width
    c_sp = cfg.spatial_widths[-1]

    _add_conv(params, state, seed, "cp.stem", 3, cfg.context_stem_width, 3, bn=True)
    in_c = cfg.context_stem_width
    for s, b, base in _stage_block_names(cfg):
        width = cfg.context_stage_widths[s]
        block_in = in_c if b == 0 else width
        _add_conv(params, state, seed, base + ".conv1", block_in, width, 3, bn=True)
        _add_conv(params, state, seed, base + ".conv2", width, width, 3, bn=True)
        if b == 0:
            # Entry block halves resolution (and may change width): projection shortcut.
            _add_conv(params, state, seed, base + ".shortcut", block_in, width, 1, bn=True)
        if b == cfg.blocks_per_stage - 1:
            in_c = width
    c_cp = cfg.context_stage_widths[-1]

    branch_c = c_cp // len(cfg.ppm_bins)
    for bins in cfg.ppm_bins:
        _add_conv(params, state, seed, f"cp.ppm.branch{bins}", c_cp, branch_c, 1, bn=True)
    ppm_cat = c_cp + branch_c * len(cfg.ppm_bins)
    _add_conv(params, state, seed, "cp.ppm.bottleneck", ppm_cat, c_cp, 3, bn=True)
    _add_conv(params, state, seed, "cp.proj", c_cp, c_sp, 1, bn=True)

    for direction in _alignment_directions(cfg):
        base = f"align.{direction}"
        _add_conv(params, None, seed, base + ".flow", 2 * c_sp, 2, 3, bn=False, zero=True)
        if cfg.alignment != "fam_bidirectional":
            _add_conv(params, None, seed, base + ".gate", c_sp, 1, 3, bn=False, zero=True)

    _add_conv(params, state, seed, "head.fuse", 2 * c_sp, c_sp, 3, bn=True)
    _add_conv(params, None, seed, "head.cls", c_sp, cfg.num_classes, 1, bn=False)
    _add_conv(params, None, seed, "head.ind", c_sp, 1, 1, bn=False)
    return params, state


def _alignment_directions(cfg: ModelConfig) -> list[str]:
    return {
        "none": [],
        "gfam_cp_to_sp": ["cp_to_sp"],
        "gfam_sp_to_cp": ["sp_to_cp"],
        "fam_bidirectional": ["cp_to_sp", "sp_to_cp"],
        "gfam_bidirectional": ["cp_to_sp", "sp_to_cp"],
    }[cfg.alignment]


# ---------------------------------------------------------------------------
# Forward passes


def _conv_bn_relu(x, params, state, name, stride, padding, mode):
    y = ops.conv2d(x, params[name + ".weight"], params[name + ".bias"], stride, padding)
    y = ops.batchnorm2d(
        y, params[name + ".bn.gamma"], params[name + ".bn.beta"], state.get(name + ".bn"), mode
    )
    return ops.relu(y)


def spatial_path_forward(
    x: Tensor, params: ParameterSet, state: BatchNormState, mode: str = "train"
) -> Tensor:
    """Three stride-2 conv+BN+ReLU blocks; output is 1/8 resolution."""
    n, c, h, w = x.shape
    if h % 8 or w % 8:
        raise ShapeError(f"spatial path input must be divisible by 8, got {h}x{w}")
    y = x
    for i in range(3):
        y = _conv_bn_relu(y, params, state, f"sp.block{i + 1}", stride=2, padding=1, mode=mode)
    return y


def _residual_block(x, params, state, base, stride, has_shortcut, mode):
    y = _conv_bn_relu(x, params, state, base + ".conv1", stride=stride, padding=1, mode=mode)
    y = ops.conv2d(y, params[base + ".conv2.weight"], params[base + ".conv2.bias"], 1, 1)
    y = ops.batchnorm2d(
        y,
        params[base + ".conv2.bn.gamma"],
        params[base + ".conv2.bn.beta"],
        state.get(base + ".conv2.bn"),
        mode,
    )
    if has_shortcut:
        sc = ops.conv2d(x, params[base + ".shortcut.weight"], params[base + ".shortcut.bias"], stride, 0)
        sc = ops.batchnorm2d(
            sc,
            params[base + ".shortcut.bn.gamma"],
            params[base + ".shortcut.bn.beta"],
            state.get(base + ".shortcut.bn"),
            mode,
        )
    else:
        sc = x
    return ops.relu(add(y, sc))


def context_path_forward(
    x: Tensor, params: ParameterSet, cfg: ModelConfig, state: BatchNormState, mode: str = "train"
) -> Tensor:
    """Stem + four stride-2 residual stages + pyramid pooling; output 1/32."""
    n, c, h, w = x.shape
    if h % 32 or w % 32:
        raise ShapeError(f"context path input must be divisible by 32, got {h}x{w}")
    y = _conv_bn_relu(x, params, state, "cp.stem", stride=2, padding=1, mode=mode)
    for s, b, base in _stage_block_names(cfg):
        stride = 2 if b == 0 else 1
        y = _residual_block(y, params, state, base, stride, has_shortcut=(b == 0), mode=mode)

    # Pyramid pooling: per-bin global context, upsampled and fused back.
    fh, fw = y.shape[2:]
    cat = y
    for bins in cfg.ppm_bins:
        branch = ops.adaptive_avg_pool(y, bins)
        branch = _conv_bn_relu(branch, params, state, f"cp.ppm.branch{bins}", 1, 0, mode)
        branch = ops.bilinear_resize(branch, fh, fw)
        cat = ops.concat_channels(cat, branch)
    return _conv_bn_relu(cat, params, state, "cp.ppm.bottleneck", 1, 1, mode)


def _aligned_pair(f_sp, f_cp, params, cfg):
    """Apply the configured alignment modules; returns the fusion inputs."""
    mode = cfg.warp_mode

    def align(direction, f_s, f_t):
        base = f"align.{direction}"
        ap = AlignParams(
            flow_weight=params[base + ".flow.weight"],
            flow_bias=params[base + ".flow.bias"],
            gate_weight=params[base + ".gate.weight"] if base + ".gate.weight" in params else None,
            gate_bias=params[base + ".gate.bias"] if base + ".gate.bias" in params else None,
        )
        if cfg.alignment == "fam_bidirectional":
            return fam(f_s, f_t, ap, mode)
        return gfam(f_s, f_t, ap, mode)

    out_sp, out_cp = f_sp, f_cp
    if cfg.alignment in ("gfam_cp_to_sp", "fam_bidirectional", "gfam_bidirectional"):
        out_sp = align("cp_to_sp", f_cp, f_sp)
    if cfg.alignment in ("gfam_sp_to_cp", "fam_bidirectional", "gfam_bidirectional"):
        out_cp = align("sp_to_cp", f_sp, f_cp)
    return out_sp, out_cp


def bialignnet_forward(
    x: Tensor,
    params: ParameterSet,
    cfg: ModelConfig,
    state: BatchNormState,
    mode: str = "train",
    return_internals: bool = False,
):
    """Full forward pass.

    Returns (s_logits, d) at input resolution: class logits of shape
    (n, num_classes, h, w) and the boundary indicator (n, 1, h, w).  With
    return_internals=True a dict of alignment intermediates (flow fields,
    gate maps, aligned features) is returned as a third element.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    f_sp = spatial_path_forward(x, params, state, mode)
    f_cp32 = context_path_forward(x, params, cfg, state, mode)
    f_cp = _conv_bn_relu(f_cp32, params, state, "cp.proj", 1, 0, mode)
    f_cp = ops.bilinear_resize(f_cp, h // 8, w // 8)

    internals: dict[str, Tensor] = {}
    if return_internals:
        internals["f_sp"] = f_sp
        internals["f_cp"] = f_cp
        _capture_alignment_internals(f_sp, f_cp, params, cfg, internals)

    a_sp, a_cp = _aligned_pair(f_sp, f_cp, params, cfg)
    fused = ops.concat_channels(a_sp, a_cp)
    fused = _conv_bn_relu(fused, params, state, "head.fuse", 1, 1, mode)
    logits8 = ops.conv2d(fused, params["head.cls.weight"], params["head.cls.bias"], 1, 0)
    s_logits = ops.bilinear_resize(logits8, h, w)

    d8 = ops.sigmoid(ops.conv2d(f_sp, params["head.ind.weight"], params["head.ind.bias"], 1, 0))
    d = ops.bilinear_resize(d8, h, w)

    if return_internals:
        internals["aligned_sp"] = a_sp
        internals["aligned_cp"] = a_cp
        return s_logits, d, internals
    return s_logits, d


def _capture_alignment_internals(f_sp, f_cp, params, cfg, internals):
    from .flow import apply_gate, make_flow_field
    from .ops import conv2d as _conv
    from .ops import sigmoid as _sig

    for direction in _alignment_directions(cfg):
        base = f"align.{direction}"
        f_s, f_t = (f_cp, f_sp) if direction == "cp_to_sp" else (f_sp, f_cp)
        flow = make_flow_field(f_s, f_t, params[base + ".flow.weight"], params[base + ".flow.bias"])
        internals[f"flow.{direction}"] = flow
        if base + ".gate.weight" in params:
            gate = _sig(_conv(f_t, params[base + ".gate.weight"], params[base + ".gate.bias"], 1, 1))
            internals[f"gate.{direction}"] = gate
            internals[f"gated_flow.{direction}"] = apply_gate(
                flow, f_t, params[base + ".gate.weight"], params[base + ".gate.bias"]
            )


# ---------------------------------------------------------------------------
# Analytic MAC counting


def count_flops(cfg: ModelConfig, input_h: int, input_w: int) -> dict[str, int]:
    """Multiply-accumulate counts per module for one image.

    Counted: convolutions (k*k*in_c*out_c per output element), BN (1 per
    element), bilinear resize and warp (4 per output element), pooling
    (1 per input element).  Activations are free.  Returned keys:
    spatial_path, context_path, alignment, head, total.
    """
    if input_h % 32 or input_w % 32:
        raise ShapeError(f"input size must be divisible by 32, got {input_h}x{input_w}")

    def conv_macs(in_c, out_c, k, oh, ow):
        return k * k * in_c * out_c * oh * ow

    def bn_macs(c, oh, ow):
        return c * oh * ow

    h, w = input_h, input_w
    c_sp = cfg.spatial_widths[-1]
    c_cp = cfg.context_stage_widths[-1]

    sp = 0
    in_c = 3
    sh, sw = h, w
    for width in cfg.spatial_widths:
        sh, sw = sh // 2, sw // 2
        sp += conv_macs(in_c, width, 3, sh, sw) + bn_macs(width, sh, sw)
        in_c = width

    cp = 0
    ch, cw = h // 2, w // 2
    cp += conv_macs(3, cfg.context_stem_width, 3, ch, cw) + bn_macs(cfg.context_stem_width, ch, cw)
    in_c = cfg.context_stem_width
    for s in range(4):
        width = cfg.context_stage_widths[s]
        ch, cw = ch // 2, cw // 2
        for b in range(cfg.blocks_per_stage):
            block_in = in_c if b == 0 else width
            cp += conv_macs(block_in, width, 3, ch, cw) + bn_macs(width, ch, cw)
            cp += conv_macs(width, width, 3, ch, cw) + bn_macs(width, ch, cw)
            if b == 0:
                cp += conv_macs(block_in, width, 1, ch, cw) + bn_macs(width, ch, cw)
        in_c = width
    fh, fw = h // 32, w // 32
    branch_c = c_cp // len(cfg.ppm_bins)
    for bins in cfg.ppm_bins:
        cp += c_cp * fh * fw  # pooling reads every input element once
        cp += conv_macs(c_cp, branch_c, 1, bins, bins) + bn_macs(branch_c, bins, bins)
        cp += 4 * branch_c * fh * fw  # upsample back to the feature grid
    ppm_cat = c_cp + branch_c * len(cfg.ppm_bins)
    cp += conv_macs(ppm_cat, c_cp, 3, fh, fw) + bn_macs(c_cp, fh, fw)
    cp += conv_macs(c_cp, c_sp, 1, fh, fw) + bn_macs(c_sp, fh, fw)
    ah, aw = h // 8, w // 8
    cp += 4 * c_sp * ah * aw  # upsample of the projected context feature to 1/8

    align = 0
    for _ in _alignment_directions(cfg):
        align += conv_macs(2 * c_sp, 2, 3, ah, aw)  # flow conv
        if cfg.alignment != "fam_bidirectional":
            align += conv_macs(c_sp, 1, 3, ah, aw)  # gate conv
        align += 4 * c_sp * ah * aw  # warp

    head = conv_macs(2 * c_sp, c_sp, 3, ah, aw) + bn_macs(c_sp, ah, aw)
    head += conv_macs(c_sp, cfg.num_classes, 1, ah, aw)
    head += 4 * cfg.num_classes * h * w  # logits upsample
    head += conv_macs(c_sp, 1, 1, ah, aw) + 4 * h * w  # indicator conv + upsample

    total = sp + cp + align + head
    return {
        "spatial_path": sp,
        "context_path": cp,
        "alignment": align,
        "head": head,
        "total": total,
    }


def table3_config(base: ModelConfig, row: str) -> ModelConfig:
    """The six ablation rows as configs derived from a base."""
    rows = {
        "CP + SP (baseline)": ("none", False),
        "CP + SP + GFAM (CP->SP)": ("gfam_cp_to_sp", False),
        "CP + SP + GFAM (SP->CP)": ("gfam_sp_to_cp", False),
        "CP + SP + FAM (bidirection)": ("fam_bidirectional", False),
        "CP + SP + GFAM (bidirection)": ("gfam_bidirectional", False),
        "CP + SP + GFAM (bidirection) + SL": ("gfam_bidirectional", True),
    }
    alignment, sl = rows[row]
    return replace(base, alignment=alignment, spatial_loss_enabled=sl)


TABLE3_ROWS = (
    "CP + SP (baseline)",
    "CP + SP + GFAM (CP->SP)",
    "CP + SP + GFAM (SP->CP)",
    "CP + SP + FAM (bidirection)",
    "CP + SP + GFAM (bidirection)",
    "CP + SP + GFAM (bidirection) + SL",
)
