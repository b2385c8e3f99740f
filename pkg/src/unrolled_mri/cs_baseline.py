"""Compressed-sensing baseline: l1-wavelet regularized proximal gradient descent.

Orthonormal Haar wavelets (quadrant layout, approximation in the top-left),
complex soft thresholding as the proximal operator, and a unit step size,
which is safe because the normalized sensing model has operator norm at most
one. The objective 0.5*||Ax-y||^2 + lam*||Wx||_1 is then non-increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .mri_physics import SensingModel, adjoint_a, forward_a

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class CsConfig:
    lam: float = 1e-3
    iterations: int = 100
    levels: int = 3
    step_size: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")


def _check_extents(x: np.ndarray, levels: int) -> None:
    h, w = x.shape[-2:]
    div = 1 << levels
    if h % div or w % div:
        raise ShapeError(
            f"extents {h}x{w} must be divisible by 2^{levels} for {levels} levels"
        )


def wavelet2(x: np.ndarray, levels: int = 3) -> np.ndarray:
    """Orthonormal 2D Haar analysis over the trailing two axes."""
    _check_extents(x, levels)
    out = np.array(x, dtype=x.dtype)
    h, w = x.shape[-2:]
    for _ in range(levels):
        block = out[..., :h, :w]
        lo = (block[..., 0::2, :] + block[..., 1::2, :]) / _SQRT2
        hi = (block[..., 0::2, :] - block[..., 1::2, :]) / _SQRT2
        block = np.concatenate([lo, hi], axis=-2)
        lo = (block[..., :, 0::2] + block[..., :, 1::2]) / _SQRT2
        hi = (block[..., :, 0::2] - block[..., :, 1::2]) / _SQRT2
        out[..., :h, :w] = np.concatenate([lo, hi], axis=-1)
        h //= 2
        w //= 2
    return out


def iwavelet2(c: np.ndarray, levels: int = 3) -> np.ndarray:
    """Inverse of :func:`wavelet2` (exact up to rounding)."""
    _check_extents(c, levels)
    out = np.array(c, dtype=c.dtype)
    hh, ww = c.shape[-2:]
    sizes = [(hh >> k, ww >> k) for k in range(levels - 1, -1, -1)]
    for h, w in sizes:
        block = out[..., :h, :w]
        lo, hi = block[..., :, : w // 2], block[..., :, w // 2:]
        cols = np.empty_like(block)
        cols[..., :, 0::2] = (lo + hi) / _SQRT2
        cols[..., :, 1::2] = (lo - hi) / _SQRT2
        lo, hi = cols[..., : h // 2, :], cols[..., h // 2:, :]
        rows = np.empty_like(block)
        rows[..., 0::2, :] = (lo + hi) / _SQRT2
        rows[..., 1::2, :] = (lo - hi) / _SQRT2
        out[..., :h, :w] = rows
    return out


def soft_threshold(c: np.ndarray, tau: float) -> np.ndarray:
    """Complex soft threshold c * max(1 - tau/|c|, 0)."""
    if tau < 0:
        raise ConfigError("threshold must be >= 0")
    if tau == 0.0:
        return c.copy()
    mag = np.abs(c)
    scale = np.maximum(1.0 - tau / np.where(mag > 0, mag, 1.0), 0.0)
    return c * np.where(mag > 0, scale, 0.0)


def cs_objective(model: SensingModel, x: np.ndarray, y: np.ndarray,
                 cfg: CsConfig) -> float:
    resid = forward_a(model, x) - y
    data_term = 0.5 * float(np.sum(np.abs(resid) ** 2))
    reg = cfg.lam * float(np.sum(np.abs(wavelet2(x, cfg.levels))))
    return data_term + reg


def cs_reconstruct(
    model: SensingModel,
    y: np.ndarray,
    cfg: CsConfig,
    return_objectives: bool = False,
):
    """Proximal gradient descent on 0.5*||Ax-y||^2 + lam*||Wx||_1.

    Starts from the zero-filled image A^H y and runs the configured number of
    iterations; deterministic for fixed inputs.
    """
    y = np.asarray(y, dtype=np.complex128)
    squeeze = y.ndim == 3
    if squeeze:
        y = y[None]
    x = adjoint_a(model, y)
    _check_extents(x, cfg.levels)
    objectives = []
    s = cfg.step_size
    for _ in range(cfg.iterations):
        grad = adjoint_a(model, forward_a(model, x) - y)
        coeffs = wavelet2(x - s * grad, cfg.levels)
        x = iwavelet2(soft_threshold(coeffs, s * cfg.lam), cfg.levels)
        if return_objectives:
            objectives.append(cs_objective(model, x, y, cfg))
    if squeeze:
        x = x[0]
    if return_objectives:
        return x, objectives
    return x
