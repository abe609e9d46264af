import numpy as np
import pytest

import bialign as ba
from bialign.losses import LossConfig
from bialign.model import (
    TABLE3_ROWS,
    BatchNormState,
    ModelConfig,
    bialignnet_forward,
    count_flops,
    init_parameters,
    table3_config,
)

TINY = ModelConfig(
    num_classes=3,
    spatial_widths=(4, 4, 8),
    context_stem_width=4,
    context_stage_widths=(4, 4, 8, 8),
    ppm_bins=(1,),
    alignment="gfam_bidirectional",
)


def _expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form conv/BN parameter sum, written out independently."""

    def conv_bn(in_c, out_c, k, bn=True):
        return k * k * in_c * out_c + out_c + (2 * out_c if bn else 0)

    total = 0
    in_c = 3
    for width in cfg.spatial_widths:
        total += conv_bn(in_c, width, 3)
        in_c = width
    c_sp = cfg.spatial_widths[-1]

    total += conv_bn(3, cfg.context_stem_width, 3)
    in_c = cfg.context_stem_width
    for s in range(4):
        width = cfg.context_stage_widths[s]
        for b in range(cfg.blocks_per_stage):
            block_in = in_c if b == 0 else width
            total += conv_bn(block_in, width, 3) + conv_bn(width, width, 3)
            if b == 0:
                total += conv_bn(block_in, width, 1)
        in_c = width
    c_cp = cfg.context_stage_widths[-1]

    branch = c_cp // len(cfg.ppm_bins)
    total += len(cfg.ppm_bins) * conv_bn(c_cp, branch, 1)
    total += conv_bn(c_cp + branch * len(cfg.ppm_bins), c_cp, 3)
    total += conv_bn(c_cp, c_sp, 1)

    directions = {"none": 0, "gfam_cp_to_sp": 1, "gfam_sp_to_cp": 1,
                  "fam_bidirectional": 2, "gfam_bidirectional": 2}[cfg.alignment]
    total += directions * conv_bn(2 * c_sp, 2, 3, bn=False)
    if cfg.alignment not in ("none", "fam_bidirectional"):
        total += directions * conv_bn(c_sp, 1, 3, bn=False)

    total += conv_bn(2 * c_sp, c_sp, 3)
    total += conv_bn(c_sp, cfg.num_classes, 1, bn=False)
    total += conv_bn(c_sp, 1, 1, bn=False)
    return total


def test_spatial_path_shapes():
    params, state = init_parameters(ModelConfig(), seed=0)
    x = ba.randn((1, 3, 64, 64), seed=1)
    out = ba.spatial_path_forward(x, params, state)
    assert out.shape == (1, 64, 8, 8)


def test_spatial_path_rejects_indivisible():
    params, state = init_parameters(ModelConfig(), seed=0)
    with pytest.raises(ba.ShapeError):
        ba.spatial_path_forward(ba.randn((1, 3, 20, 20), seed=1), params, state)


def test_context_path_shapes():
    # batch 2: the bin-1 pyramid branch pools to 1x1, and train-mode BN needs
    # more than one value per channel
    cfg = ModelConfig(ppm_bins=(1, 2))
    params, state = init_parameters(cfg, seed=0)
    x = ba.randn((2, 3, 64, 64), seed=1)
    out = ba.context_path_forward(x, params, cfg, state)
    assert out.shape == (2, 128, 2, 2)


def test_param_count_matches_closed_form():
    for cfg in (ModelConfig(), ModelConfig(alignment="none"), TINY,
                ModelConfig(alignment="fam_bidirectional", ppm_bins=(1, 2)),
                ModelConfig(blocks_per_stage=2)):
        params, _ = init_parameters(cfg, seed=0)
        assert params.total_count() == _expected_param_count(cfg)


def test_init_deterministic_and_structured():
    p1, _ = init_parameters(TINY, seed=9)
    p2, _ = init_parameters(TINY, seed=9)
    for (n1, t1), (n2, t2) in zip(p1.items(), p2.items()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)
    p3, _ = init_parameters(TINY, seed=10)
    assert not np.array_equal(p1["sp.block1.weight"].data, p3["sp.block1.weight"].data)

    for name, t in p1.items():
        if name.startswith("align."):
            assert np.all(t.data == 0.0), name
        if name.endswith(".bn.gamma"):
            assert np.all(t.data == 1.0), name
        if name.endswith(".bn.beta") or name.endswith(".bias"):
            assert np.all(t.data == 0.0), name


def test_he_normal_scale():
    params, _ = init_parameters(ModelConfig(), seed=0)
    w = params["cp.stage4.block1.conv2.weight"]  # 128 -> 128, fan_in 1152
    assert w.data.std() == pytest.approx(np.sqrt(2.0 / 1152.0), rel=0.1)


@pytest.mark.parametrize("alignment", ["none", "gfam_cp_to_sp", "gfam_sp_to_cp",
                                       "fam_bidirectional", "gfam_bidirectional"])
def test_every_alignment_trains_with_finite_gradients(alignment):
    cfg = ModelConfig(
        num_classes=3, spatial_widths=(4, 4, 8), context_stem_width=4,
        context_stage_widths=(4, 4, 8, 8), ppm_bins=(1,), alignment=alignment,
    )
    params, state = init_parameters(cfg, seed=3)
    x = ba.randn((2, 3, 32, 32), seed=4, stddev=0.5)
    labels = np.floor(
        np.abs(ba.randn((1, 1, 2, 32 * 32), seed=5).data.reshape(2, 32, 32)) * 2
    ).astype(np.int32) % 3
    b = ba.extract_edge_map(labels)

    ba.reset_tape()
    s_logits, d = bialignnet_forward(x, params, cfg, state, mode="train")
    assert s_logits.shape == (2, 3, 32, 32)
    assert d.shape == (2, 1, 32, 32)
    loss, _ = ba.total_loss(s_logits, d, b, labels, LossConfig())
    ba.backward(loss)
    for name, t in params.items():
        assert t.grad is not None, name
        assert np.isfinite(t.grad).all(), name


def test_gfam_bidirectional_equals_baseline_at_init():
    base_cfg = ModelConfig(ppm_bins=(1, 2), alignment="none")
    gfam_cfg = ModelConfig(ppm_bins=(1, 2), alignment="gfam_bidirectional")
    x = ba.randn((1, 3, 64, 64), seed=6, stddev=0.5)

    outs = []
    for cfg in (base_cfg, gfam_cfg):
        params, state = init_parameters(cfg, seed=7)
        with ba.no_grad():
            s_logits, d = bialignnet_forward(x, params, cfg, state, mode="train")
        outs.append((s_logits.data, d.data))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1])

    # the equality is a property of the zero-initialized alignment, so it
    # holds for any input, including mirrored ones
    flipped = ba.Tensor(x.data[:, :, :, ::-1].copy())
    for cfg in (base_cfg, gfam_cfg):
        params, state = init_parameters(cfg, seed=7)
        with ba.no_grad():
            s_logits, _ = bialignnet_forward(flipped, params, cfg, state, mode="train")
        outs.append(s_logits.data)
    assert np.array_equal(outs[2], outs[3])


def test_eval_forward_is_idempotent():
    params, state = init_parameters(TINY, seed=8)
    x = ba.randn((1, 3, 32, 32), seed=9)
    with ba.no_grad():
        a, da = bialignnet_forward(x, params, TINY, state, mode="eval")
        b, db = bialignnet_forward(x, params, TINY, state, mode="eval")
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(da.data, db.data)


def test_warp_source_mode_runs():
    cfg = ModelConfig(
        num_classes=3, spatial_widths=(4, 4, 8), context_stem_width=4,
        context_stage_widths=(4, 4, 8, 8), ppm_bins=(1,),
        alignment="gfam_bidirectional", warp_mode="warp_source",
    )
    params, state = init_parameters(cfg, seed=1)
    with ba.no_grad():
        s_logits, d = bialignnet_forward(ba.randn((1, 3, 32, 32), seed=2), params, cfg, state)
    assert s_logits.shape == (1, 3, 32, 32)


def test_indicator_values_in_unit_interval():
    params, state = init_parameters(TINY, seed=11)
    with ba.no_grad():
        _, d = bialignnet_forward(ba.randn((1, 3, 32, 32), seed=12), params, TINY, state,
                                  mode="eval")
    assert np.all(d.data > 0.0) and np.all(d.data < 1.0)


def test_return_internals_exposes_flows_and_gates():
    params, state = init_parameters(TINY, seed=13)
    with ba.no_grad():
        _, _, internals = bialignnet_forward(
            ba.randn((1, 3, 32, 32), seed=14), params, TINY, state,
            mode="eval", return_internals=True,
        )
    assert internals["flow.cp_to_sp"].shape == (1, 2, 4, 4)
    assert internals["gate.sp_to_cp"].shape == (1, 1, 4, 4)
    assert np.all(internals["flow.cp_to_sp"].data == 0.0)  # zero init


# ---------------------------------------------------------------------------
# MAC counting


def test_single_conv_mac_formula():
    # 3x3 conv, 16 -> 16 channels, 8x8 output
    assert 3 * 3 * 16 * 16 * 8 * 8 == 147456


def test_count_flops_spatial_path_closed_form():
    cfg = ModelConfig()
    macs = count_flops(cfg, 64, 64)
    expected = 0
    in_c, size = 3, 64
    for width in cfg.spatial_widths:
        size //= 2
        expected += 3 * 3 * in_c * width * size * size + width * size * size
        in_c = width
    assert macs["spatial_path"] == expected


def test_count_flops_scales_linearly_in_pixels():
    cfg = ModelConfig(ppm_bins=(1, 2))
    a = count_flops(cfg, 64, 64)
    b = count_flops(cfg, 64, 128)
    assert b["spatial_path"] == 2 * a["spatial_path"]
    assert b["alignment"] == 2 * a["alignment"]
    assert b["head"] == 2 * a["head"]
    # PPM branch convolutions work on fixed bin grids, so the context path is
    # linear only up to that constant term
    assert abs(b["context_path"] - 2 * a["context_path"]) / a["context_path"] < 0.01


def test_alignment_overhead_under_two_percent():
    from bialign.train import ABLATION_BASE, FULL_SCALE_BASE, FULL_SCALE_INPUT

    base = count_flops(table3_config(ABLATION_BASE, TABLE3_ROWS[0]), 64, 64)["total"]
    full = count_flops(table3_config(ABLATION_BASE, TABLE3_ROWS[4]), 64, 64)["total"]
    assert (full - base) / base < 0.02

    fs_base = count_flops(table3_config(FULL_SCALE_BASE, TABLE3_ROWS[0]), *FULL_SCALE_INPUT)
    fs_full = count_flops(table3_config(FULL_SCALE_BASE, TABLE3_ROWS[4]), *FULL_SCALE_INPUT)
    assert (fs_full["total"] - fs_base["total"]) / fs_base["total"] < 0.02


def test_table3_rows_parameter_relations():
    base = ModelConfig(ppm_bins=(1, 2))
    counts = {}
    for row in TABLE3_ROWS:
        params, _ = init_parameters(table3_config(base, row), seed=0)
        counts[row] = params.total_count()
    c_sp = base.spatial_widths[-1]
    gate_params = 3 * 3 * c_sp * 1 + 1
    assert counts["CP + SP + GFAM (bidirection)"] - counts["CP + SP + FAM (bidirection)"] == 2 * gate_params
    assert counts["CP + SP (baseline)"] < counts["CP + SP + GFAM (CP->SP)"]
    assert counts["CP + SP + GFAM (CP->SP)"] == counts["CP + SP + GFAM (SP->CP)"]
    assert counts["CP + SP + GFAM (bidirection)"] == counts["CP + SP + GFAM (bidirection) + SL"]
    assert counts["CP + SP + FAM (bidirection)"] > counts["CP + SP + GFAM (CP->SP)"]


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(alignment="bogus")
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(spatial_widths=(4, 4))
    with pytest.raises(ValueError):
        ModelConfig(warp_mode="sideways")


def test_forward_divisibility_error():
    params, state = init_parameters(TINY, seed=1)
    with pytest.raises(ba.ShapeError):
        bialignnet_forward(ba.randn((1, 3, 48, 48), seed=2), params, TINY, state)


def test_batchnorm_state_copy_is_deep():
    _, state = init_parameters(TINY, seed=1)
    clone = state.copy()
    mean, _ = state.get("sp.block1.bn")
    mean[:] = 5.0
    assert np.all(clone.get("sp.block1.bn")[0] == 0.0)
