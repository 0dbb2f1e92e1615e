"""Segmentation losses over NKHW maps."""
from __future__ import annotations

import numpy as np

from .ops import log_softmax
from .tensor import Tensor

EPS_PROB = 1e-8


class NormalizationError(ValueError):
    pass


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """[N,H,W] integer labels -> [N,K,H,W] one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes})")
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)


def _check_target(logits_shape, target: np.ndarray) -> None:
    if target.shape != logits_shape:
        raise ValueError(f"target shape {target.shape} does not match prediction shape {logits_shape}")
    if not np.all((target == 0) | (target == 1)) or not np.all(target.sum(axis=1) == 1):
        raise ValueError("target must be one-hot along the class axis")


def _pixel_weights(weights, shape) -> np.ndarray | None:
    if weights is None:
        return None
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    if w.shape != (shape[0],) + tuple(shape[2:]):
        raise ValueError(f"pixel weights shape {w.shape} does not match {shape}")
    if np.any(w < 0):
        raise ValueError("pixel weights must be nonnegative")
    return w


def _as_target(target) -> np.ndarray:
    return target.data if isinstance(target, Tensor) else np.asarray(target)


def softmax_cross_entropy(logits: Tensor, target, pixel_weights=None) -> Tensor:
    """Mean over pixels of w * -log softmax(logits)[target]."""
    target = _as_target(target)
    _check_target(logits.shape, target)
    w = _pixel_weights(pixel_weights, logits.shape)
    nll = -(log_softmax(logits, axis=1) * target).sum(axis=1)
    if w is not None:
        nll = nll * w
    return nll.mean()


def cross_entropy(probs: Tensor, target, pixel_weights=None) -> Tensor:
    """Cross entropy on an already-normalized probability map.

    Probabilities are clamped at ``EPS_PROB`` inside the log. Weights are
    treated as constants.
    """
    target = _as_target(target)
    _check_target(probs.shape, target)
    w = _pixel_weights(pixel_weights, probs.shape)
    nll = -(probs.clamp_min(EPS_PROB).log() * target).sum(axis=1)
    if w is not None:
        nll = nll * w
    return nll.mean()


def _check_distribution(p: Tensor, name: str, tol: float = 1e-6) -> None:
    sums = p.data.sum(axis=1)
    if np.any(p.data < 0) or not np.allclose(sums, 1.0, rtol=0.0, atol=tol):
        raise NormalizationError(f"{name} is not a per-pixel distribution (sums deviate by {np.abs(sums - 1).max():.3g})")


def kl_map(p: Tensor, q: Tensor) -> Tensor:
    """Per-pixel KL(p || q) -> [N,H,W]; 0*log 0 = 0 and q clamped at EPS_PROB."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    return (p.xlogx() - p * q.clamp_min(EPS_PROB).log()).sum(axis=1)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    return kl_map(p, q).mean()


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross entropy against a constant label in {0, 1}."""
    x = logits.data
    # softplus(x) - t*x, computed stably
    sp = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray((sp - target * x).mean())
    sig = 1.0 / (1.0 + np.exp(-x))
    scale = 1.0 / x.size

    def backward(g):
        return (g * (sig - target) * scale,)

    return Tensor._make(out, (logits,), backward, "bce")
