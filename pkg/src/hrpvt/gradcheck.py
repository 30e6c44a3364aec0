"""Central finite differences as an independent check on reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def finite_diff_grad(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central-difference estimate of d fn(x) / dx.

    ``fn`` maps a tensor to a scalar tensor. ``x.data`` is perturbed in place
    and restored after every probe. When ``indices`` (flat positions) is given
    only those entries are estimated and the rest of the result is zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x).item()
        flat[i] = orig - h
        fm = fn(x).item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``||a - b|| / max(||a||, ||b||)``; 0 if both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def autodiff_grad(fn: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    loss = fn(x)
    loss.backward()
    x.requires_grad = was
    g = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.grad = None
    return g


def check_grad(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Relative error between autodiff and finite differences for ``fn`` at ``x``."""
    analytic = autodiff_grad(fn, x)
    numeric = finite_diff_grad(fn, x, h)
    return relative_error(analytic, numeric)

