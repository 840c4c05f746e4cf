"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np


def rel_error(analytic, numeric, floor=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def sample_coords(shape, n, rng):
    """``n`` flat indices into an array of ``shape`` (all of them when it is small)."""
    size = int(np.prod(shape))
    if size <= n:
        return np.arange(size)
    return rng.choice(size, size=n, replace=False)


def numeric_grad(f, x, coords, h=1e-6):
    """d f / d x at the given flat coordinates; ``f`` must not keep references to ``x``."""
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = f()
        flat[c] = orig - h
        fm = f()
        flat[c] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def check(f, x, analytic, rng, n=100, h=1e-6, floor=1e-7):
    """Max relative error of ``analytic`` (full gradient array) vs central differences.

    ``floor`` bounds the denominator; raise it when some true gradients are
    exactly zero and the loss is O(1), so differencing noise (~1e-10) dominates.
    """
    coords = sample_coords(x.shape, n, rng)
    num = numeric_grad(f, x, coords, h)
    return float(rel_error(analytic.reshape(-1)[coords], num, floor).max())
