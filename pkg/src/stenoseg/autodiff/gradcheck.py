"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_tensor: int
    worst_index: tuple
    checked: int

    def __bool__(self) -> bool:  # pragma: no cover - convenience only
        return np.isfinite(self.max_rel_err)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Elementwise relative error.

    The denominator is floored at 1e-3 of ``scale`` (default: the largest
    gradient entry) so entries that are zero up to roundoff do not blow the
    ratio up.
    """
    if scale is None:
        scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)))
    floor = max(scale * 1e-3, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float, indices) -> np.ndarray:
    out = np.empty(len(indices))
    flat = t.data.reshape(-1)
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    ``inputs`` must be float64 tensors with ``requires_grad``; at most
    ``max_elements`` entries per tensor are sampled when given.  The error
    floor is set by the largest gradient over all inputs, since the
    difference quotient's roundoff scales with the loss, not with each tensor.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.grad = None
    loss = fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    samples = []
    scale = 0.0
    for t in inputs:
        analytic_full = np.zeros_like(t.data) if t.grad is None else t.grad
        size = t.data.size
        if max_elements is not None and size > max_elements:
            indices = np.sort(rng.choice(size, max_elements, replace=False))
        else:
            indices = np.arange(size)
        numeric = numeric_grad(fn, t, h, indices)
        analytic = analytic_full.reshape(-1)[indices]
        scale = max(scale, float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
        samples.append((indices, analytic, numeric))
    worst = (0.0, -1, ())
    checked = 0
    for n, (t, (indices, analytic, numeric)) in enumerate(zip(inputs, samples)):
        err = rel_error(analytic, numeric, scale)
        checked += len(indices)
        k = int(np.argmax(err))
        if err[k] > worst[0]:
            worst = (float(err[k]), n, np.unravel_index(indices[k], t.shape))
    return GradCheckResult(worst[0], worst[1], worst[2], checked)
