"""Finite-difference gradient checks over every differentiable building block."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import (
    Tensor,
    bce_with_logits,
    channel_affine,
    channel_stats,
    concat,
    conv2d,
    cross_entropy,
    downsample_nearest,
    grad_check,
    kl_divergence,
    leaky_relu,
    log_softmax,
    relu,
    softmax,
    softmax_cross_entropy,
    upsample_nearest,
)
from .crossdonorm import cross_stylize
from .segnet import EncoderConfig, ModelBundle, ModelConfig
from .selftrain import consistency_loss, kd_loss, rectified_cross_pl_loss, rectified_pl_loss
from .trainer import Batch, TrainConfig, total_objective

GRAD_TOLERANCE = 1e-4


def _shape(rng: np.random.Generator, max_n=2, max_c=4, max_hw=8, even=True) -> tuple[int, int, int, int]:
    """Random [N, C, H, W] bounded by 2 x 4 x 8 x 8."""
    hw = int(rng.choice([2, 4, 6, 8])) if even else int(rng.integers(3, max_hw + 1))
    return int(rng.integers(1, max_n + 1)), int(rng.integers(2, max_c + 1)), hw, hw


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    def t(shape, scale=1.0, shift=0.0):
        return Tensor(rng.standard_normal(shape) * scale + shift)

    s = _shape(rng)
    n, c, h, w = s
    labels = rng.integers(0, c, (n, h, w))
    onehot = np.eye(c)[labels].transpose(0, 3, 1, 2)
    weights = rng.uniform(0.1, 1.0, (n, h, w))
    teacher = softmax(t(s))
    kernel = t((3, c, 3, 3), 0.5)
    probe, probe_up = t(s), t(s[:2] + (2 * h, 2 * w))
    cases = {
        "arithmetic": (lambda a, b: ((a * b + a / (b * b + 1.0)) - b).sum(), [t(s), t(s)]),
        "exp_log_sqrt": (lambda a: ((a * a + 1.0).log() + (a * 0.3).exp() + (a * a + 0.5).sqrt()).mean(), [t(s)]),
        "leaky_relu": (lambda a: (leaky_relu(a, 0.2) * a).sum(), [t(s)]),
        "relu": (lambda a: (relu(a) * a).sum(), [t(s)]),
        "conv2d": (lambda x, k: (conv2d(x, k) ** 2).mean(), [t(s), kernel]),
        "conv2d_stride2": (lambda x, k: (conv2d(x, k, stride=2) ** 2).mean(), [t(s), Tensor(kernel.data.copy())]),
        "upsample": (lambda x: (upsample_nearest(x, 2) * probe_up).sum(), [t(s)]),
        "downsample": (lambda x: (downsample_nearest(x, 2) ** 2).sum(), [t(s)]),
        "channel_affine": (lambda x, g, b: (channel_affine(x, g, b) ** 2).mean(), [t(s), t((c,)), t((c,))]),
        "concat": (lambda a, b: (concat([a, b], axis=1) ** 2).sum(), [t(s), t(s)]),
        "softmax": (lambda x: (softmax(x) * probe).sum(), [t(s)]),
        "log_softmax": (lambda x: (log_softmax(x) * probe).sum(), [t(s)]),
        "channel_stats": (lambda x: sum((v**2).sum() for v in channel_stats(x)), [t(s, 1.5)]),
        "cross_stylize": (lambda a, b: (cross_stylize(a, b)[0] ** 2).mean(), [t(s, 1.3, 0.5), t(s, 0.8, -1.0)]),
        "softmax_cross_entropy": (lambda x: softmax_cross_entropy(x, onehot, weights), [t(s)]),
        "cross_entropy": (lambda x: cross_entropy(softmax(x), onehot, weights), [t(s)]),
        "kl_divergence": (lambda a, b: kl_divergence(softmax(a), softmax(b)), [t(s), t(s)]),
        "bce_with_logits": (lambda x: bce_with_logits(x, 1.0) + bce_with_logits(x, 0.0) * 0.5, [t(s)]),
        "rectified_pl_loss": (lambda x: rectified_pl_loss(softmax(x), labels, weights), [t(s)]),
        "rectified_cross_pl_loss": (lambda x: rectified_cross_pl_loss(softmax(x), labels, weights), [t(s)]),
        "kd_loss_soft": (lambda x: kd_loss(softmax(x), teacher, "soft"), [t(s)]),
        "kd_loss_hard": (lambda x: kd_loss(softmax(x), teacher, "hard"), [t(s)]),
        "consistency_loss": (lambda x: consistency_loss(softmax(x), teacher), [t(s)]),
    }
    cases.update(_objective_cases(rng))
    return cases


def _objective_cases(rng: np.random.Generator) -> dict:
    """total_objective w.r.t. parameters.

    Detached teachers and rectification weights are stop-gradients by design, so
    finite differences only agree on paths that avoid them: the agnostic head
    for the full objective, and every owner when KD is hard, C^A ignores its
    detached input, and rectification and consistency are off.
    """
    m, k, hw = 2, 3, 8
    bundle = ModelBundle(ModelConfig(num_targets=m, num_classes=k, encoder=EncoderConfig(widths=(4, 4, 4)), seed=int(rng.integers(1 << 16))))
    batch = Batch(
        rng.random((1, 3, hw, hw)),
        rng.integers(0, k, (1, hw, hw)),
        [rng.random((1, 3, hw, hw)) for _ in range(m)],
        [rng.integers(0, k, (1, hw, hw)) for _ in range(m)],
    )
    # zero-initialized biases put ReLU inputs exactly on the kink wherever upstream channels are dead
    for owner in bundle.segmentation_owners():
        for name, t in bundle.params[owner].items():
            if name.endswith("bias"):
                t.data[...] = rng.normal(0.0, 0.1, t.shape)
    full = TrainConfig()
    plain = TrainConfig.variant("ii", kd_mode="hard")
    blind = bundle.copy()
    blind.params["cls_A"]["weight"].data[...] = 0.0
    p = bundle.params
    q = blind.params
    return {
        "total_objective_agnostic": (
            lambda *_: total_objective(bundle, batch, full, training=False)[0],
            [p["cls_A"]["weight"], p["cls_A"]["bias"]],
        ),
        "total_objective_all_owners": (
            lambda *_: total_objective(blind, batch, plain, training=False)[0],
            [q["encoder"]["conv0.weight"], q["encoder"]["conv2.bias"], q["cls_0"]["weight"], q["cls_1"]["bias"], q["cls_A"]["bias"]],
        ),
    }


def grad_check_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per named check."""
    rng = np.random.default_rng(seed)
    return {name: grad_check(fn, args) for name, (fn, args) in _cases(rng).items()}
