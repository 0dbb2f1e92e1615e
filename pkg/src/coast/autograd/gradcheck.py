from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    pass


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out = float(value.data)
    if not np.isfinite(out):
        raise NonFiniteError(f"function value is not finite: {out}")
    return out


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with the tensor(s) in ``x`` as positional arguments.
    The relative error at each coordinate is ``|a - n| / max(|a|, |n|, floor)``
    so coordinates whose true gradient is ~0 are judged absolutely.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    _scalar(out)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            plus = _scalar(f(*inputs))
            flat[k] = orig - step
            minus = _scalar(f(*inputs))
            flat[k] = orig
            numeric = (plus - minus) / (2 * step)
            ak = a.reshape(-1)[k]
            err = abs(ak - numeric) / max(abs(ak), abs(numeric), floor)
            worst = max(worst, err)
    return worst
