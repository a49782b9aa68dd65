"""Central finite-difference checks for tape gradients (run in float64)."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); 0 when both vanish."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def analytic_grads(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    with Tape() as tape:
        loss = loss_fn()
    return tape.backward(loss, params)


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-4,
                 indices=None) -> np.ndarray:
    """d loss / d param by central differences, at every index or only at ``indices``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    grad = out.reshape(-1)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn().data)
        flat[i] = orig - step
        down = float(loss_fn().data)
        flat[i] = orig
        grad[i] = (up - down) / (2 * step)
    return out


def directional_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      rng: np.random.Generator, step: float = 1e-4) -> dict[str, float]:
    """Compare g . v with the central difference along a random unit direction v, per tensor."""
    grads = analytic_grads(loss_fn, params)
    errors = {}
    for name, p in params.items():
        v = rng.standard_normal(p.shape)
        v /= np.linalg.norm(v)
        orig = p.data.copy()
        p.data = orig + step * v
        up = float(loss_fn().data)
        p.data = orig - step * v
        down = float(loss_fn().data)
        p.data = orig
        numeric = (up - down) / (2 * step)
        analytic = float(np.sum(grads[name] * v))
        errors[name] = relative_error(np.array([analytic]), np.array([numeric]))
    return errors


def check_grads(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-4,
                max_entries: int | None = None, rng: np.random.Generator | None = None,
                indices: Mapping[str, np.ndarray] | None = None) -> dict[str, float]:
    """Per-tensor relative error between tape and finite-difference gradients.

    With ``max_entries`` only that many randomly chosen coordinates per tensor
    are differenced (the analytic gradient is compared on the same subset).
    ``indices`` names the flat coordinates to difference explicitly, e.g. ones
    whose perturbation does not cross a relu kink.
    """
    grads = analytic_grads(loss_fn, params)
    errors = {}
    for name, p in params.items():
        idx = None
        if indices is not None and name in indices:
            idx = np.asarray(indices[name])
        elif max_entries is not None and p.data.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(p.data.size, max_entries, replace=False)
        num = numeric_grad(loss_fn, p, step, idx)
        ana = grads[name]
        if idx is not None:
            errors[name] = relative_error(ana.reshape(-1)[idx], num.reshape(-1)[idx])
        else:
            errors[name] = relative_error(ana, num)
    return errors
