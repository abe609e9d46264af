"""Training loop, evaluation, the six-row ablation harness, visual dumps."""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, replace

import numpy as np

from . import netpbm
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import IGNORE_INDEX, Sample, augment, load_split
from .edges import extract_edge_map
from .losses import LossConfig, ohem_ce, total_loss
from .metrics import ConfusionMatrix, miou, pixel_accuracy
from .model import (
    TABLE3_ROWS,
    BatchNormState,
    ModelConfig,
    ParameterSet,
    bialignnet_forward,
    count_flops,
    init_parameters,
    table3_config,
)
from .optim import NumericError, TrainConfig, init_velocity, poly_lr, sgd_momentum_step
from .rng import RandomStream
from .tensor import Tensor, backward, no_grad, reset_tape

METRICS_HEADER = "iter,lr,loss_total,loss_bce,loss_hard,loss_ohem,val_miou"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics_rows: list[str]
    final_loss: float


def _batch(samples: list[Sample]) -> tuple[Tensor, np.ndarray]:
    images = np.concatenate([s.image.data for s in samples], axis=0)
    labels = np.stack([s.labels for s in samples], axis=0)
    return Tensor(images), labels


def _loss_for_config(s_logits, d, labels, model_cfg, loss_cfg):
    edge = extract_edge_map(labels)
    if model_cfg.spatial_loss_enabled:
        return total_loss(s_logits, d, edge, labels, loss_cfg)
    loss = ohem_ce(s_logits, labels, loss_cfg)
    return loss, {"bce": 0.0, "hard": 0.0, "ohem": loss.item()}


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset_root,
    ckpt_path=None,
    loss_cfg: LossConfig | None = None,
    eval_split: str | None = "val",
    log=None,
) -> TrainResult:
    """Run the full schedule; returns the final checkpoint and metric rows.

    Each iteration draws a shuffled batch, augments it, runs forward +
    backward, and takes one SGD step at the poly learning rate.  A non-finite
    loss or gradient raises NumericError; any checkpoint written at an
    earlier eval point is left on disk.
    """
    loss_cfg = loss_cfg or LossConfig()
    samples = load_split(dataset_root, "train")
    crop = samples[0].labels.shape
    params, bn_state = init_parameters(model_cfg, train_cfg.seed)
    velocity = init_velocity(params)
    shuffle = RandomStream(train_cfg.seed, key="shuffle")
    order: list[int] = []

    rows = [METRICS_HEADER]
    final_loss = float("nan")
    for it in range(train_cfg.total_iters):
        batch = []
        for slot in range(train_cfg.batch_size):
            if not order:
                order = list(shuffle.permutation(len(samples)))
            sample = samples[order.pop(0)]
            batch.append(
                augment(
                    sample,
                    seed=_derive_seed(train_cfg.seed, it, slot),
                    scale_range=(train_cfg.aug_scale_min, train_cfg.aug_scale_max),
                    crop=crop,
                    hflip_prob=train_cfg.aug_hflip_prob,
                )
            )
        images, labels = _batch(batch)

        reset_tape()
        params.clear_grads()
        s_logits, d = bialignnet_forward(images, params, model_cfg, bn_state, mode="train")
        loss, parts = _loss_for_config(s_logits, d, labels, model_cfg, loss_cfg)
        final_loss = loss.item()
        if not np.isfinite(final_loss):
            raise NumericError(f"loss became non-finite at iteration {it}")
        backward(loss)
        grads = {name: t.grad for name, t in params.items()}
        lr = poly_lr(it, train_cfg)
        sgd_momentum_step(params, grads, velocity, lr, train_cfg)

        val_cell = ""
        if train_cfg.eval_every and (it + 1) % train_cfg.eval_every == 0:
            if eval_split is not None and _split_exists(dataset_root, eval_split):
                ckpt = Checkpoint(it + 1, model_cfg, params, velocity, bn_state)
                report = evaluate_checkpoint(ckpt, dataset_root, eval_split)
                val_cell = f"{report.miou:.6f}"
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, ckpt)
        row = (
            f"{it},{lr:.8f},{final_loss:.6f},"
            f"{parts['bce']:.6f},{parts['hard']:.6f},{parts['ohem']:.6f},{val_cell}"
        )
        rows.append(row)
        if log is not None:
            log(row)

    ckpt = Checkpoint(train_cfg.total_iters, model_cfg, params, velocity, bn_state)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, ckpt)
    return TrainResult(checkpoint=ckpt, metrics_rows=rows, final_loss=final_loss)


def _derive_seed(seed: int, it: int, slot: int) -> int:
    return (seed * 1_000_003 + it) * 1_000 + slot


def _split_exists(root, split: str) -> bool:
    return os.path.isdir(os.path.join(str(root), split))


@dataclass
class EvalReport:
    miou: float
    per_class_iou: np.ndarray
    pixel_accuracy: float
    confusion: ConfusionMatrix

    def text(self) -> str:
        lines = [f"mIoU: {self.miou:.4f}", f"pixel accuracy: {self.pixel_accuracy:.4f}"]
        for k, v in enumerate(self.per_class_iou):
            cell = "  (absent)" if np.isnan(v) else f"  {v:.4f}"
            lines.append(f"class {k}:{cell}")
        return "\n".join(lines)


def predict_labels(
    ckpt: Checkpoint, image: Tensor
) -> np.ndarray:
    """Eval-mode argmax class map, shape (n, h, w)."""
    with no_grad():
        s_logits, _ = bialignnet_forward(
            image, ckpt.params, ckpt.model_cfg, ckpt.bn_state, mode="eval"
        )
    return np.argmax(s_logits.data, axis=1).astype(np.int32)


def evaluate_checkpoint(ckpt: Checkpoint, dataset_root, split: str = "val") -> EvalReport:
    samples = load_split(dataset_root, split)
    cm = ConfusionMatrix(ckpt.model_cfg.num_classes)
    for sample in samples:
        pred = predict_labels(ckpt, sample.image)
        cm.add(pred[0], sample.labels, ignore_index=IGNORE_INDEX)
    mean_iou, per_class = miou(cm)
    return EvalReport(mean_iou, per_class, pixel_accuracy(cm), cm)


def evaluate(ckpt_path, dataset_root, split: str = "val") -> EvalReport:
    return evaluate_checkpoint(load_checkpoint(ckpt_path), dataset_root, split)


# ---------------------------------------------------------------------------
# Ablation harness


# Wider-than-default semantic branch so the relative alignment cost of the
# trained configs stays representative of the full-size network.
ABLATION_BASE = ModelConfig(
    context_stem_width=32,
    context_stage_widths=(32, 64, 128, 256),
    ppm_bins=(1, 2),
)

# Reference full-size configuration used to report the alignment overhead
# at deployment scale (1024x1024 input, DFNet-class widths).
FULL_SCALE_BASE = ModelConfig(
    spatial_widths=(64, 64, 64),
    context_stem_width=64,
    context_stage_widths=(64, 128, 256, 512),
    blocks_per_stage=2,
    ppm_bins=(1, 2, 3, 6),
)
FULL_SCALE_INPUT = (1024, 1024)


@dataclass
class AblationRow:
    label: str
    miou: float
    delta: float
    param_count: int
    macs: int


@dataclass
class AblationResult:
    rows: list[AblationRow]
    overhead_ratio: float
    full_scale_overhead_ratio: float

    def text(self) -> str:
        width = max(len(r.label) for r in self.rows)
        lines = [
            f"{'config'.ljust(width)}  {'mIoU':>7}  {'delta':>7}  {'params':>9}  {'MACs':>12}"
        ]
        for r in self.rows:
            lines.append(
                f"{r.label.ljust(width)}  {r.miou:7.4f}  {r.delta:+7.4f}  "
                f"{r.param_count:9d}  {r.macs:12d}"
            )
        lines.append("")
        lines.append(
            f"alignment MAC overhead vs baseline: {self.overhead_ratio * 100:.3f}% "
            f"(desk scale), {self.full_scale_overhead_ratio * 100:.3f}% (full scale)"
        )
        return "\n".join(lines)


def ablate(
    dataset_root,
    base_model_cfg: ModelConfig | None = None,
    base_train_cfg: TrainConfig | None = None,
    eval_split: str = "train",
    log=None,
) -> AblationResult:
    """Train all six ablation configurations under identical seeds/budgets."""
    base_model_cfg = base_model_cfg or ABLATION_BASE
    base_train_cfg = base_train_cfg or TrainConfig(total_iters=120, batch_size=4, eval_every=0)
    sample = load_split(dataset_root, "train")[0]
    h, w = sample.labels.shape

    rows: list[AblationRow] = []
    baseline_miou = None
    for label in TABLE3_ROWS:
        cfg = table3_config(base_model_cfg, label)
        result = train(cfg, base_train_cfg, dataset_root, eval_split=None)
        report = evaluate_checkpoint(result.checkpoint, dataset_root, eval_split)
        if baseline_miou is None:
            baseline_miou = report.miou
        params, _ = init_parameters(cfg, base_train_cfg.seed)
        rows.append(
            AblationRow(
                label=label,
                miou=report.miou,
                delta=report.miou - baseline_miou,
                param_count=params.total_count(),
                macs=count_flops(cfg, h, w)["total"],
            )
        )
        if log is not None:
            log(f"{label}: mIoU {report.miou:.4f}")

    macs_base = count_flops(table3_config(base_model_cfg, TABLE3_ROWS[0]), h, w)["total"]
    macs_full = count_flops(table3_config(base_model_cfg, TABLE3_ROWS[4]), h, w)["total"]
    fs_base = count_flops(table3_config(FULL_SCALE_BASE, TABLE3_ROWS[0]), *FULL_SCALE_INPUT)
    fs_full = count_flops(table3_config(FULL_SCALE_BASE, TABLE3_ROWS[4]), *FULL_SCALE_INPUT)
    return AblationResult(
        rows=rows,
        overhead_ratio=(macs_full - macs_base) / macs_base,
        full_scale_overhead_ratio=(fs_full["total"] - fs_base["total"]) / fs_base["total"],
    )


# ---------------------------------------------------------------------------
# Visual dumps


def _palette(num_classes: int) -> np.ndarray:
    colors = [np.array([0.18, 0.18, 0.20])]
    for k in range(1, num_classes):
        colors.append(np.array(colorsys.hsv_to_rgb((k * 0.618034) % 1.0, 0.60, 0.85)))
    return np.stack(colors)


def flow_to_rgb(flow: np.ndarray) -> np.ndarray:
    """(2, h, w) flow -> (3, h, w) color wheel: hue = angle, value = magnitude."""
    dx, dy = flow[0].astype(np.float64), flow[1].astype(np.float64)
    mag = np.hypot(dx, dy)
    scale = mag.max()
    value = mag / scale if scale > 0 else np.zeros_like(mag)
    hue = (np.arctan2(dy, dx) / (2.0 * np.pi)) % 1.0
    out = np.zeros((3,) + flow.shape[1:], dtype=np.float32)
    for i in range(flow.shape[1]):
        for j in range(flow.shape[2]):
            out[:, i, j] = colorsys.hsv_to_rgb(hue[i, j], 1.0, value[i, j])
    return out


def dump_visuals(ckpt: Checkpoint, sample: Sample, out_dir) -> list[str]:
    """Write prediction, flow-field, gate, and indicator images; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    with no_grad():
        s_logits, d, internals = bialignnet_forward(
            sample.image, ckpt.params, ckpt.model_cfg, ckpt.bn_state,
            mode="eval", return_internals=True,
        )
    written = []

    pred = np.argmax(s_logits.data[0], axis=0)
    palette = _palette(ckpt.model_cfg.num_classes)
    path = os.path.join(out_dir, "prediction.ppm")
    netpbm.write_ppm(path, palette[pred].transpose(2, 0, 1))
    written.append(path)

    path = os.path.join(out_dir, "indicator.pgm")
    netpbm.write_pgm(path, np.rint(d.data[0, 0] * 255.0).astype(np.uint8))
    written.append(path)

    for key, t in internals.items():
        if key.startswith("flow."):
            path = os.path.join(out_dir, key.replace(".", "_") + ".ppm")
            netpbm.write_ppm(path, flow_to_rgb(t.data[0]))
            written.append(path)
        elif key.startswith("gate."):
            path = os.path.join(out_dir, key.replace(".", "_") + ".pgm")
            netpbm.write_pgm(path, np.rint(t.data[0, 0] * 255.0).astype(np.uint8))
            written.append(path)
    return written
