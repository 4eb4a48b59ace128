"""Shared test helpers: finite-difference gradient checking and tiny configs."""

from __future__ import annotations

import numpy as np

from ucm.tensor import Tensor


def fd_gradient(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued ``f`` w.r.t. every entry of x."""
    base = x.data.copy()
    flat = x.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f().item()
        flat[i] = orig - h
        down = f().item()
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    x.data[...] = base
    return g.reshape(x.shape)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, floor: float = 1e-8):
    """Componentwise |a - n| <= rel * max(|a|, |n|) + floor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    assert a.shape == n.shape
    err = np.abs(a - n)
    bound = rel * np.maximum(np.abs(a), np.abs(n)) + floor
    worst = (err - bound).max()
    assert (err <= bound).all(), f"gradient mismatch, worst excess {worst:.3e}"
