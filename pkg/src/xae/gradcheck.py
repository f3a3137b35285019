"""Central finite-difference oracle for checking reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(f, t: Tensor, eps: float = 1e-6, coords=None) -> np.ndarray:
    """d f() / d t by central differences, at ``coords`` (flat indices) or everywhere.

    Entries not in ``coords`` are left as NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = float(f().data)
        flat[i] = old - eps
        lo = float(f().data)
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor), skipping NaN entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(f, tensors, eps: float = 1e-6, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and finite differences over ``tensors``.

    ``f`` must rebuild the scalar loss from scratch on every call.  With
    ``max_coords`` only that many randomly chosen entries per tensor are probed.
    """
    for t in tensors:
        t.grad = None
    f().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, a in zip(tensors, analytic):
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        worst = max(worst, relative_error(a, numerical_grad(f, t, eps, coords)))
    return worst
