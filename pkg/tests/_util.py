"""Shared test helpers: finite differences and toy-corpus construction."""
from __future__ import annotations

import numpy as np

from scesep import autograd as ag


def rel_err(a, b) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def to_f64(params) -> None:
    """Switch parameter storage to float64 in place (the reference path)."""
    for p in params:
        p.data = p.data.astype(np.float64)
        if p.grad is not None:
            p.grad = np.zeros_like(p.data)


def numeric_grad(fn, t: ag.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``t.data``."""
    g = np.zeros(t.shape)
    flat = t.data.reshape(-1)
    with ag.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(fn().item())
            flat[i] = old - h
            down = float(fn().item())
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def check_grads(fn, tensors, h: float = 1e-5) -> float:
    """Worst relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.zero_grad()
    ag.backward(fn())
    analytic = [t.grad.copy() for t in tensors]
    return max(rel_err(a, numeric_grad(fn, t, h)) for a, t in zip(analytic, tensors))


TOY_BANDS = (600.0, 1600.0, 2600.0, 3600.0)
OUT_OF_SET_BANDS = (1100.0, 3100.0)
