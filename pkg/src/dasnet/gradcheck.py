"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-3,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``t.data`` (float64 result).

    With ``indices`` only those flat positions are probed; the others stay zero.
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """``max|a - n| / max(max|a|, max|n|, scale)``; 0 when all of those are zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), scale)
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3,
                    max_probes: int | None = None, rng: np.random.Generator | None = None
                    ) -> dict[int, float]:
    """Relative error between backprop and finite differences for each tensor.

    ``max_probes`` caps the number of coordinates probed per tensor (randomly
    chosen with ``rng``); the error is still scaled by the full analytic gradient.
    """
    for t in tensors:
        t.grad = None
    backward(f())
    errors = {}
    for i, t in enumerate(tensors):
        analytic = np.zeros(t.shape, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        full_scale = float(np.abs(analytic).max(initial=0.0))
        idx = None
        if max_probes is not None and t.data.size > max_probes:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(t.data.size, size=max_probes, replace=False))
        numeric = numeric_grad(f, t, eps, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        errors[i] = relative_error(analytic, numeric, full_scale)
    return errors
