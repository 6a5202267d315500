"""Dense float64 helpers: temperature softmax, row argmax and a finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every function
here is pure and returns fresh arrays.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_EPS = 1e-5


def as_tensor(x) -> np.ndarray:
    """Copy ``x`` into a float64 array."""
    return np.array(x, dtype=np.float64)


def _check_logits(z, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau!r}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim not in (1, 2):
        raise ValueError(f"expected a vector or batch×classes matrix, got shape {z.shape}")
    if z.shape[-1] < 2:
        raise ValueError("softmax needs at least 2 classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite values")
    return z


def log_softmax_tau(z, tau: float = 1.0) -> np.ndarray:
    """Row-wise ``log softmax(z / tau)``, stabilised by max subtraction."""
    z = _check_logits(z, tau)
    s = z / tau
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_tau(z, tau: float = 1.0) -> np.ndarray:
    """Row-wise temperature softmax ``exp(z_k/tau) / sum_m exp(z_m/tau)``.

    Accepts a single logit vector or a ``batch×classes`` matrix.
    """
    z = _check_logits(z, tau)
    s = z / tau
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def argmax_row(t) -> np.ndarray:
    """Per-row index of the maximum; ties go to the lowest index."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("argmax of an empty tensor")
    if t.ndim == 1:
        t = t[None, :]
    # np.argmax returns the first occurrence, which is the tie rule we want.
    return np.argmax(t, axis=1)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(x))
        flat[i] = orig - eps
        down = float(f(x))
        flat[i] = orig
        g[i] = (up - down) / (2 * eps)
    return grad


def grad_close(analytic, numeric, rtol: float = 1e-5, atol: float = 1e-7) -> bool:
    """True when each entry agrees to ``rtol`` relative error or ``atol`` absolute."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    return bool(np.all((diff <= atol) | (diff <= rtol * scale)))
