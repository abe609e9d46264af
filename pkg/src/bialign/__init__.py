"""Two-path segmentation with bidirectional gated flow alignment.

A self-contained numpy library: NCHW tensors with tape-based reverse-mode
differentiation, the network building blocks, flow-field feature alignment,
hard-pixel-mining losses, synthetic scene data, and a small training and
evaluation harness.
"""

from .tensor import (
    ShapeError,
    TapeError,
    Tensor,
    add,
    backward,
    finite_diff_check,
    full,
    mean_all,
    mul_elem,
    no_grad,
    randn,
    reset_tape,
    scale,
    sum_all,
    tensor,
    zeros,
)
from .ops import (
    adaptive_avg_pool,
    batchnorm2d,
    bilinear_resize,
    concat_channels,
    conv2d,
    log_softmax_channel,
    relu,
    sigmoid,
)
from .flow import AlignParams, apply_gate, fam, gfam, make_flow_field, warp_bilinear
from .edges import extract_edge_map
from .losses import LossConfig, bce, cross_entropy_pixelwise, hard_pixel_loss, ohem_ce, total_loss
from .model import (
    ModelConfig,
    ParameterSet,
    bialignnet_forward,
    context_path_forward,
    count_flops,
    init_parameters,
    spatial_path_forward,
)
from .data import SceneSpec, Sample, augment, generate_scene
from .metrics import ConfusionMatrix, miou, pixel_accuracy
from .optim import TrainConfig, poly_lr, sgd_momentum_step
from .train import ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AlignParams",
    "ConfusionMatrix",
    "LossConfig",
    "ModelConfig",
    "ParameterSet",
    "Sample",
    "SceneSpec",
    "ShapeError",
    "TapeError",
    "Tensor",
    "TrainConfig",
    "ablate",
    "adaptive_avg_pool",
    "add",
    "apply_gate",
    "augment",
    "backward",
    "batchnorm2d",
    "bce",
    "bialignnet_forward",
    "bilinear_resize",
    "concat_channels",
    "context_path_forward",
    "conv2d",
    "count_flops",
    "cross_entropy_pixelwise",
    "evaluate",
    "extract_edge_map",
    "fam",
    "finite_diff_check",
    "full",
    "generate_scene",
    "gfam",
    "hard_pixel_loss",
    "init_parameters",
    "log_softmax_channel",
    "make_flow_field",
    "mean_all",
    "miou",
    "mul_elem",
    "no_grad",
    "ohem_ce",
    "pixel_accuracy",
    "poly_lr",
    "randn",
    "relu",
    "reset_tape",
    "scale",
    "sgd_momentum_step",
    "sigmoid",
    "spatial_path_forward",
    "sum_all",
    "tensor",
    "total_loss",
    "train",
    "warp_bilinear",
    "zeros",
]
