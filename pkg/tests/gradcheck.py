"""Finite-difference gradient reference (fourth-order central stencil)."""
import numpy as np


def numeric_grad(f, x, h=1e-4):
    """d f / d x for scalar ``f(x)``; ``h`` is scaled by max(1, |x_i|)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        xi = flat[i]
        s = h * max(1.0, abs(xi))
        vals = []
        for d in (2, 1, -1, -2):
            flat[i] = xi + d * s
            vals.append(f(x))
        flat[i] = xi
        gflat[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * s)
    return g


def max_rel_error(analytic, numeric, floor=1e-8):
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    mask = (np.abs(a) > floor) | (np.abs(n) > floor)
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - n[mask]) / np.maximum(np.abs(a[mask]), np.abs(n[mask]))))
