"""Differentiable layer primitives on NCHW tensors."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor


class InvalidShapeError(ValueError):
    pass


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or at rate 0."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """y[n,c] = scale[c] * x[n,c] + shift[c]."""
    c = x.shape[1]
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``padding`` defaults to ``k // 2`` so stride-1 convs keep the spatial size.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidShapeError(f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise InvalidShapeError(f"conv2d channel mismatch: input {c}, weight {ci}")
    if padding is None:
        padding = kh // 2
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidShapeError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g = g.reshape(n, o, ho * wo)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward, "upsample")


def downsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Keep the top-left pixel of every ``factor`` x ``factor`` cell."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise InvalidShapeError(f"spatial size {h}x{w} not divisible by {factor}")
    out = np.ascontiguousarray(x.data[:, :, ::factor, ::factor])

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, ::factor, ::factor] = g
        return (full,)

    return Tensor._make(out, (x,), backward, "downsample")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(datas)))

    return Tensor._make(np.concatenate(datas, axis=axis), tuple(tensors), backward, "concat")


def channel_stats(z: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel mean and sqrt(population variance + eps)."""
    if z.ndim != 4:
        raise InvalidShapeError(f"channel_stats expects NCHW, got {z.shape}")
    if z.shape[2] * z.shape[3] < 1:
        raise InvalidShapeError("channel_stats needs a non-empty spatial extent")
    mu = z.mean(axis=(2, 3))
    centered = z - mu.reshape(*mu.shape, 1, 1)
    var = (centered * centered).mean(axis=(2, 3))
    return mu, (var + eps).sqrt()


def stop_gradient(x: Tensor) -> Tensor:
    return as_tensor(x).detach()
