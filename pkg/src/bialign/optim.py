"""SGD with momentum, weight decay, and the polynomial LR schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ParameterSet


class NumericError(FloatingPointError):
    """A gradient or loss became NaN/Inf; the step is aborted."""


@dataclass
class TrainConfig:
    total_iters: int = 300
    batch_size: int = 8
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    seed: int = 0
    eval_every: int = 50
    # Augmentation draws per training sample; defaults follow the standard
    # flip / [0.5, 2.0] rescale / crop recipe.
    aug_scale_min: float = 0.5
    aug_scale_max: float = 2.0
    aug_hflip_prob: float = 0.5

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """base_lr * (1 - iter/total)^power; strictly decreasing, 0 at the end."""
    if iteration < 0 or iteration > cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    return cfg.base_lr * (1.0 - iteration / cfg.total_iters) ** cfg.poly_power


def init_velocity(params: ParameterSet) -> dict[str, np.ndarray]:
    return {name: np.zeros(t.shape, dtype=np.float32) for name, t in params.items()}


def _decayed(name: str) -> bool:
    # Decay applies to conv weights only, not biases or BN affine parameters.
    return name.endswith(".weight")


def sgd_momentum_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    cfg: TrainConfig,
) -> None:
    """v <- momentum*v + (grad + wd*param);  param <- param - lr*v.

    Math runs in float64 and results are stored back as float32.  Raises
    NumericError (before touching any state) if a gradient is not finite.
    """
    for name, _ in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        if _decayed(name) and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data.astype(np.float64)
        v = cfg.momentum * velocity[name].astype(np.float64) + g
        velocity[name] = v.astype(np.float32)
        p.data = (p.data.astype(np.float64) - lr * velocity[name].astype(np.float64)).astype(
            np.float32
        )
