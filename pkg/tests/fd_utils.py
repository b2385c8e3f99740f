"""Finite-difference oracles shared across test modules.

Central differences at h=1e-6 against the real-pair gradient convention: for
complex inputs the numeric gradient is dL/dRe + 1j*dL/dIm, matching what the
tape reports.
"""

import numpy as np


def fd_gradient(f, x, h=1e-6, coords=None):
    """Central-difference gradient of scalar ``f`` at array ``x``.

    ``coords`` restricts evaluation to a list of multi-indices (useful for
    large parameter tensors); the returned array is zero elsewhere.
    """
    x = np.asarray(x)
    g = np.zeros_like(x)
    if coords is None:
        coords = list(np.ndindex(*x.shape)) if x.shape else [()]
    for idx in coords:
        e = np.zeros_like(x)
        e[idx] = h
        real = (f(x + e) - f(x - e)) / (2.0 * h)
        if np.iscomplexobj(x):
            e[idx] = 1j * h
            imag = (f(x + e) - f(x - e)) / (2.0 * h)
            g[idx] = real + 1j * imag
        else:
            g[idx] = real
    return g


def rel_err(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    denom = max(float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / denom


def sample_coords(shape, rng, k=4):
    """Up to k random multi-indices of ``shape``."""
    total = int(np.prod(shape)) if shape else 1
    if not shape:
        return [()]
    picks = rng.choice(total, size=min(k, total), replace=False)
    return [tuple(np.unravel_index(p, shape)) for p in picks]
