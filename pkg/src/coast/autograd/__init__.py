from .gradcheck import NonFiniteError, grad_check
from .losses import (
    EPS_PROB,
    NormalizationError,
    bce_with_logits,
    cross_entropy,
    kl_divergence,
    kl_map,
    one_hot,
    softmax_cross_entropy,
)
from .ops import (
    InvalidShapeError,
    channel_affine,
    channel_stats,
    concat,
    conv2d,
    downsample_nearest,
    dropout,
    leaky_relu,
    log_softmax,
    relu,
    softmax,
    upsample_nearest,
)
from .tensor import DEFAULT_DTYPE, Tape, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "DEFAULT_DTYPE",
    "EPS_PROB",
    "InvalidShapeError",
    "NonFiniteError",
    "NormalizationError",
    "Tape",
    "Tensor",
    "as_tensor",
    "bce_with_logits",
    "channel_affine",
    "channel_stats",
    "concat",
    "conv2d",
    "cross_entropy",
    "downsample_nearest",
    "dropout",
    "grad_check",
    "is_grad_enabled",
    "kl_divergence",
    "kl_map",
    "leaky_relu",
    "log_softmax",
    "no_grad",
    "one_hot",
    "relu",
    "softmax",
    "softmax_cross_entropy",
    "upsample_nearest",
]
