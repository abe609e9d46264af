"""Training objectives: pixel cross-entropy, hard-mining variants, edge BCE.

The combined objective is

    total = lambda_bce * bce(d, b) + hard_pixel_loss(s, g, d) + ohem_ce(s, g)

where s is the segmentation logits, g the labels, d the boundary indicator
predicted by the detail branch, and b the edge map derived from g.  Pixels
labeled ignore_index never contribute loss or gradient.

Hard selections (OHEM, edge-guided mining) are treated as constants: the
chosen pixel set is computed from forward values and gradients flow only
through the kept pixels' cross-entropy, which is the usual straight-through
treatment of top-k mining.  Ties at the selection boundary are broken by
row-major pixel index so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import log_softmax_channel
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as64,
    from64,
    mul_const,
    record,
    scale,
    sum_all,
)


@dataclass
class LossConfig:
    lambda_bce: float = 25.0
    t_b: float = 0.8
    hard_keep_fraction: float = 1.0 / 16.0
    ohem_prob_threshold: float = 0.7
    ohem_min_kept_fraction: float = 1.0 / 16.0
    ignore_index: int = 255

    def __post_init__(self):
        if not 0.0 < self.t_b < 1.0:
            raise ValueError(f"t_b must be in (0,1), got {self.t_b}")
        if not 0.0 < self.hard_keep_fraction <= 1.0:
            raise ValueError("hard_keep_fraction must be in (0,1]")
        if not 0.0 < self.ohem_min_kept_fraction <= 1.0:
            raise ValueError("ohem_min_kept_fraction must be in (0,1]")
        if self.lambda_bce <= 0.0:
            raise ValueError("lambda_bce must be positive")


_PROB_EPS = 1e-7  # probability clamp ahead of any log


def _zero_scalar() -> Tensor:
    return Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))


def _check_labels(logits: Tensor, labels: np.ndarray, ignore_index: int) -> np.ndarray:
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels must be ({n},{h},{w}), got {labels.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} outside [0, {c})")
    return valid


def cross_entropy_pixelwise(
    logits: Tensor, labels: np.ndarray, ignore_index: int = 255
) -> tuple[Tensor, Tensor]:
    """Per-pixel -log softmax probability of the true class.

    Returns (per-pixel loss tensor of shape (n,1,h,w), scalar mean over the
    valid pixels).  Ignored pixels contribute 0 to both.
    """
    valid = _check_labels(logits, labels, ignore_index)
    ls = log_softmax_channel(logits)
    n, c, h, w = logits.shape
    safe_labels = np.where(valid, labels, 0)

    nn = np.arange(n)[:, None, None]
    yy = np.arange(h)[None, :, None]
    xx = np.arange(w)[None, None, :]
    picked = as64(ls)[nn, safe_labels, yy, xx]
    per_pixel64 = np.where(valid, -picked, 0.0)[:, None]
    per_pixel = from64(per_pixel64)

    def bwd(g):
        gls = np.zeros((n, c, h, w), dtype=np.float64)
        contrib = -g[:, 0] * valid
        np.add.at(gls, (nn, safe_labels, yy, xx), contrib)
        return (gls,)

    per_pixel = record(per_pixel, (ls,), bwd)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return per_pixel, _zero_scalar()
    return per_pixel, scale(sum_all(per_pixel), 1.0 / n_valid)


def _true_class_probs(per_pixel_ce: Tensor) -> np.ndarray:
    """exp(-ce) as float64, i.e. the softmax probability of the labeled class."""
    return np.exp(-per_pixel_ce.data.astype(np.float64))


def ohem_ce(logits: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Cross-entropy averaged over hard pixels only.

    Hard means the true-class probability falls below cfg.ohem_prob_threshold;
    if fewer than ceil(valid * ohem_min_kept_fraction) qualify, the largest
    losses are taken up to that count instead.
    """
    valid = _check_labels(logits, labels, cfg.ignore_index)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _zero_scalar()
    per_pixel, _ = cross_entropy_pixelwise(logits, labels, cfg.ignore_index)
    probs = _true_class_probs(per_pixel)[:, 0]
    selected = valid & (probs < cfg.ohem_prob_threshold)
    min_kept = min(n_valid, math.ceil(n_valid * cfg.ohem_min_kept_fraction))
    if int(selected.sum()) < min_kept:
        ce_flat = np.where(valid, per_pixel.data[:, 0].astype(np.float64), -np.inf).reshape(-1)
        # Stable sort on -loss keeps row-major order among ties.
        order = np.argsort(-ce_flat, kind="stable")[:min_kept]
        selected = np.zeros(ce_flat.size, dtype=bool)
        selected[order] = True
        selected = selected.reshape(valid.shape)
    k = int(selected.sum())
    mask = selected[:, None].astype(np.float64)
    return scale(sum_all(mul_const(per_pixel, mask)), 1.0 / k)


def bce(d: Tensor, b: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between indicator d in (0,1) and targets b.

    d is clamped to [1e-7, 1 - 1e-7] inside the op (float64), so saturated
    float32 indicator values cannot produce infinities; the gradient is zero
    where the clamp is active.
    """
    b64 = np.asarray(b, dtype=np.float64)
    if b64.shape != d.data.shape:
        raise ShapeError(f"bce: target shape {b64.shape} != indicator shape {d.shape}")
    d64 = as64(d)
    clamped = np.clip(d64, _PROB_EPS, 1.0 - _PROB_EPS)
    size = d.size
    total = -float(np.sum(b64 * np.log(clamped) + (1.0 - b64) * np.log1p(-clamped)))
    out = from64(np.full((1, 1, 1, 1), total / size, dtype=np.float64))

    def bwd(g):
        inside = (d64 > _PROB_EPS) & (d64 < 1.0 - _PROB_EPS)
        gd = (-b64 / clamped + (1.0 - b64) / (1.0 - clamped)) / size
        return (g.reshape(-1)[0] * gd * inside,)

    return record(out, (d,), bwd)


def hard_pixel_loss(logits: Tensor, labels: np.ndarray, d: Tensor, cfg: LossConfig) -> Tensor:
    """Cross-entropy over the hardest pixels among those the indicator flags.

    Candidates are valid pixels with d > t_b.  Among them the K lowest
    true-class probabilities are kept, K = min(|candidates|,
    ceil(valid * hard_keep_fraction)); the loss is the mean -log probability
    over the kept set, 0 if there are no candidates.
    """
    valid = _check_labels(logits, labels, cfg.ignore_index)
    if d.shape != (logits.shape[0], 1, logits.shape[2], logits.shape[3]):
        raise ShapeError(f"indicator must be (n,1,h,w), got {d.shape}")
    n_valid = int(valid.sum())
    candidates = valid & (d.data[:, 0].astype(np.float64) > cfg.t_b)
    n_cand = int(candidates.sum())
    if n_valid == 0 or n_cand == 0:
        return _zero_scalar()
    per_pixel, _ = cross_entropy_pixelwise(logits, labels, cfg.ignore_index)
    probs = _true_class_probs(per_pixel)[:, 0]
    k = min(n_cand, math.ceil(n_valid * cfg.hard_keep_fraction))
    prob_flat = np.where(candidates, probs, np.inf).reshape(-1)
    order = np.argsort(prob_flat, kind="stable")[:k]
    kept = np.zeros(prob_flat.size, dtype=bool)
    kept[order] = True
    mask = kept.reshape(candidates.shape)[:, None].astype(np.float64)
    return scale(sum_all(mul_const(per_pixel, mask)), 1.0 / k)


def total_loss(
    s_logits: Tensor,
    d: Tensor,
    b: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
) -> tuple[Tensor, dict[str, float]]:
    """lambda * bce + hard_pixel_loss + ohem_ce, with a component breakdown."""
    l_bce = bce(d, b)
    l_hard = hard_pixel_loss(s_logits, labels, d, cfg)
    l_ohem = ohem_ce(s_logits, labels, cfg)
    total = add(add(scale(l_bce, cfg.lambda_bce), l_hard), l_ohem)
    parts = {"bce": l_bce.item(), "hard": l_hard.item(), "ohem": l_ohem.item()}
    return total, parts
