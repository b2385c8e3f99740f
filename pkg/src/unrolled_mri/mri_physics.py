"""Accelerated-MRI sensing model and data-consistency operators.

The forward model maps an image x to per-coil k-space: multiply by each coil
sensitivity, Fourier transform (orthonormal, uncentered: DC sits at index
[0,0]), and zero out unsampled locations. Masks are generated in a centered
k-space layout for readability and shifted into the uncentered layout on
return.

Two data-consistency flavours are provided: a gradient step
``x - 2t A^H(Ax - y)`` and a full regularized inversion
``(A^H A + mu I)^{-1}(A^H y + mu z)`` solved with conjugate gradients. The CG
solve is exposed both as a plain function and as a differentiable primitive
whose backward rule is ``mu * (A^H A + mu I)^{-1} g`` (another CG solve); the
closed-form inverse of the CG step enables activation reconstruction during
invertible backward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import Primitive, Tensor, register_primitive
from .tensor_core import ops
from .tensor_core.ops import fft2_raw, ifft2_raw


@dataclass(frozen=True)
class SensingModel:
    """Immutable sensing operator A = (mask) o FFT o (coil maps).

    mask: (H,W) float64 in {0,1}, uncentered k-space layout.
    coil_maps: (C,H,W) complex128, pixelwise sum of |S_c|^2 equal to 1.
    step_size: gradient data-consistency step t.
    mu: regularization strength of the CG data-consistency solve.
    """

    mask: np.ndarray
    coil_maps: np.ndarray
    step_size: float = 0.5
    mu: float = 4.0

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        maps = np.asarray(self.coil_maps, dtype=np.complex128)
        if mask.ndim != 2:
            raise ShapeError(f"mask must be (H,W), got {mask.shape}")
        if maps.ndim != 3 or maps.shape[1:] != mask.shape:
            raise ShapeError(f"coil maps {maps.shape} do not match mask {mask.shape}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ConfigError("mask entries must be 0 or 1")
        ssq = np.sum(np.abs(maps) ** 2, axis=0)
        if not np.allclose(ssq, 1.0, atol=1e-10):
            raise ConfigError("coil maps must satisfy sum_c |S_c|^2 = 1 per pixel")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "coil_maps", maps)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def n_coils(self) -> int:
        return self.coil_maps.shape[0]

    @property
    def conj_maps(self) -> np.ndarray:
        return np.conj(self.coil_maps)


@dataclass(frozen=True)
class MaskSpec:
    """Recipe for an undersampling mask."""

    kind: str  # poisson_disc_2d | random_1d_cartesian
    acceleration: float
    calibration_extent: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("poisson_disc_2d", "random_1d_cartesian"):
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        if self.acceleration < 1.0:
            raise ConfigError("acceleration must be >= 1")
        if self.calibration_extent < 0:
            raise ConfigError("calibration_extent must be >= 0")


def _check_image(model: SensingModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-2:] != model.image_shape:
        raise ShapeError(f"image batch {x.shape} does not match {model.image_shape}")
    return x


def _check_kspace(model: SensingModel, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim == 3:
        y = y[None]
    expected = (model.n_coils,) + model.image_shape
    if y.ndim != 4 or y.shape[1:] != expected:
        raise ShapeError(f"k-space batch {y.shape} does not match (B,)+{expected}")
    return y


# ------------------------------------------------------------- plain numpy ops

def forward_a(model: SensingModel, x: np.ndarray) -> np.ndarray:
    """A x: (B,H,W) image -> (B,C,H,W) masked multi-coil k-space."""
    x = _check_image(model, x)
    coil_imgs = model.coil_maps[None] * x[:, None]
    return model.mask * fft2_raw(coil_imgs)


def adjoint_a(model: SensingModel, y: np.ndarray) -> np.ndarray:
    """A^H y: (B,C,H,W) k-space -> (B,H,W) coil-combined image."""
    y = _check_kspace(model, y)
    imgs = ifft2_raw(model.mask * y)
    return np.sum(model.conj_maps[None] * imgs, axis=1)


def normal_a(model: SensingModel, x: np.ndarray) -> np.ndarray:
    """A^H A x (the mask is idempotent, so one application suffices)."""
    x = _check_image(model, x)
    coil_imgs = model.coil_maps[None] * x[:, None]
    k = model.mask * fft2_raw(coil_imgs)
    return np.sum(model.conj_maps[None] * ifft2_raw(k), axis=1)


def dc_step(model: SensingModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient data-consistency step x - 2t A^H(Ax - y)."""
    x = _check_image(model, x)
    y = _check_kspace(model, y)
    return x - 2.0 * model.step_size * adjoint_a(model, forward_a(model, x) - y)


def cg_solve(
    model: SensingModel,
    rhs: np.ndarray,
    z: np.ndarray,
    n_iters: int = 10,
) -> np.ndarray:
    """Solve (A^H A + mu I) x = rhs + mu z by conjugate gradients.

    ``rhs`` is typically A^H y. The iteration is warm-started at z and runs
    exactly ``n_iters`` steps (earlier exit only when the residual underflows),
    so results are deterministic.
    """
    if model.mu <= 0:
        raise ConfigError("cg_solve requires mu > 0")
    if n_iters < 1:
        raise ConfigError("cg_solve requires n_iters >= 1")
    rhs = _check_image(model, rhs)
    z = _check_image(model, z)
    b = rhs + model.mu * z
    return _cg(model, b, x0=z, n_iters=n_iters)


def _apply_k(model: SensingModel, x: np.ndarray) -> np.ndarray:
    return normal_a(model, x) + model.mu * x


def _cg(model: SensingModel, b: np.ndarray, x0: np.ndarray, n_iters: int) -> np.ndarray:
    x = x0.copy()
    r = b - _apply_k(model, x)
    p = r.copy()
    rs = float(np.sum(r.real**2 + r.imag**2))
    for _ in range(n_iters):
        if rs < 1e-300:
            break
        kp = _apply_k(model, p)
        alpha = rs / float(np.vdot(p, kp).real)
        x = x + alpha * p
        r = r - alpha * kp
        rs_new = float(np.sum(r.real**2 + r.imag**2))
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def cg_residual(model: SensingModel, x: np.ndarray, rhs: np.ndarray, z: np.ndarray) -> float:
    """Relative residual of the CG system at x."""
    b = _check_image(model, rhs) + model.mu * _check_image(model, z)
    r = b - _apply_k(model, _check_image(model, x))
    return float(np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300))


def cg_inverse(model: SensingModel, x_next: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Recover z from a converged CG solve: z = ((A^H A + mu I) x_next - rhs) / mu.

    ``rhs`` is the same A^H y used in the solve. Accuracy is limited by the
    residual the solver actually reached.
    """
    if model.mu <= 0:
        raise ConfigError("cg_inverse requires mu > 0")
    x_next = _check_image(model, x_next)
    rhs = _check_image(model, rhs)
    return (_apply_k(model, x_next) - rhs) / model.mu


# --------------------------------------------------------------- taped ops

def taped_forward_a(model: SensingModel, x: Tensor) -> Tensor:
    t = x.tape
    b = x.shape[0]
    xc = ops.reshape(x, (b, 1) + model.image_shape)
    coil = ops.elementwise_mul(t.constant(model.coil_maps[None]), xc)
    return ops.mask_apply(ops.fft2(coil), model.mask)


def taped_adjoint_a(model: SensingModel, y: Tensor) -> Tensor:
    t = y.tape
    u = ops.ifft2(ops.mask_apply(y, model.mask))
    v = ops.elementwise_mul(t.constant(model.conj_maps[None]), u)
    return ops.sum_coils(v)


def taped_dc_step(model: SensingModel, x: Tensor, y: Tensor) -> Tensor:
    resid = ops.sub(taped_forward_a(model, x), y)
    return ops.sub(x, ops.scalar_mul(2.0 * model.step_size, taped_adjoint_a(model, resid)))


def _cg_dc_infer(shapes, dtypes, aux):
    model, rhs, n_iters = aux
    xs = shapes[0]
    if dtypes[0] != np.dtype(np.complex128):
        raise ShapeError("cg_dc expects a complex image batch")
    if len(xs) != 3 or xs[-2:] != model.image_shape:
        raise ShapeError(f"cg_dc: image batch {xs} does not match {model.image_shape}")
    return xs, np.dtype(np.complex128)


def _cg_dc_forward(datas, aux):
    model, rhs, n_iters = aux
    return cg_solve(model, rhs, datas[0], n_iters=n_iters)


def _cg_dc_backward(g, saved, aux, shapes, dtypes):
    # x*(z) = K^{-1}(rhs + mu z) with Hermitian K, so the pullback of g is
    # mu K^{-1} g, computed by the same CG routine from a zero start.
    model, rhs, n_iters = aux
    return (model.mu * _cg(model, g, x0=np.zeros_like(g), n_iters=n_iters),)


register_primitive(Primitive(
    name="cg_dc",
    forward=_cg_dc_forward,
    backward=_cg_dc_backward,
    infer=_cg_dc_infer,
    # backward re-solves with the model operators, which are retained
    saves=lambda d, out, aux: [aux[0].mask, aux[0].coil_maps],
    saved_count=lambda shapes, aux: int(aux[0].mask.size + aux[0].coil_maps.size),
))


def taped_cg_dc(model: SensingModel, x: Tensor, rhs: np.ndarray, n_iters: int = 10) -> Tensor:
    """Differentiable CG data-consistency block; rhs = A^H y precomputed."""
    return x.tape.record("cg_dc", (x,), aux=(model, rhs, n_iters))


# ------------------------------------------------------------------- masks

def make_mask(spec: MaskSpec, shape: tuple[int, int]) -> np.ndarray:
    """Binary undersampling mask in the uncentered k-space layout.

    The fully sampled calibration region sits around the k-space origin, the
    realized acceleration (#locations / #sampled) lands within 10% of the
    request, and the result is a pure function of (spec, shape).
    """
    h, w = shape
    if spec.acceleration == 1.0:
        return np.ones((h, w), dtype=np.float64)
    if spec.kind == "random_1d_cartesian":
        centered = _mask_random_1d(spec, h, w)
    else:
        centered = _mask_poisson_disc(spec, h, w)
    achieved = centered.size / centered.sum()
    if abs(achieved - spec.acceleration) > 0.1 * spec.acceleration:
        raise ConfigError(
            f"could not realize acceleration {spec.acceleration} on {h}x{w} "
            f"(achieved {achieved:.2f})"
        )
    return np.fft.ifftshift(centered)


def achieved_acceleration(mask: np.ndarray) -> float:
    return float(mask.size / mask.sum())


def _calibration_block(h: int, w: int, extent: int) -> tuple[slice, slice]:
    r0 = h // 2 - extent // 2
    c0 = w // 2 - extent // 2
    return slice(r0, r0 + extent), slice(c0, c0 + extent)


def _mask_random_1d(spec: MaskSpec, h: int, w: int) -> np.ndarray:
    n_cols = int(round(w / spec.acceleration))
    calib = min(spec.calibration_extent, w)
    if n_cols < calib or n_cols < 1:
        raise ConfigError(
            f"acceleration {spec.acceleration} too large for width {w} with "
            f"{calib} calibration columns"
        )
    c0 = w // 2 - calib // 2
    center_cols = set(range(c0, c0 + calib))
    rng = np.random.default_rng(spec.seed)
    remaining = [c for c in range(w) if c not in center_cols]
    extra = rng.choice(len(remaining), size=n_cols - calib, replace=False)
    cols = sorted(center_cols | {remaining[i] for i in extra})
    mask = np.zeros((h, w), dtype=np.float64)
    mask[:, cols] = 1.0
    return mask


def _mask_poisson_disc(spec: MaskSpec, h: int, w: int) -> np.ndarray:
    total = h * w
    calib = min(spec.calibration_extent, min(h, w))
    target = total / spec.acceleration
    if target < calib * calib:
        raise ConfigError(
            f"acceleration {spec.acceleration} too large for {h}x{w} with a "
            f"{calib}x{calib} calibration block"
        )
    rs, cs = _calibration_block(h, w, calib)
    # saturated dart throwing lands near 0.7 * area / r^2 samples; calibrate
    # the radius multiplicatively from there and keep the best attempt
    r = math.sqrt(0.7 * total / target)
    best = None
    best_err = math.inf
    for _ in range(12):
        mask = _dart_mask(h, w, r, spec.seed)
        mask[rs, cs] = 1.0
        achieved = total / mask.sum()
        err = abs(achieved - spec.acceleration)
        if err < best_err:
            best, best_err = mask, err
        if err <= 0.05 * spec.acceleration:
            break
        ratio = spec.acceleration / achieved
        r *= math.sqrt(max(min(ratio, 4.0), 0.25))
    return best


def _dart_mask(h: int, w: int, radius: float, seed: int) -> np.ndarray:
    """Maximal Poisson-disc sampling: no two samples closer than ``radius``.

    One jittered candidate per grid cell of side radius/sqrt(2); rounds accept
    every undecided candidate whose random priority is the maximum over its
    5x5 cell neighborhood, then reject undecided candidates within the radius
    of an accepted point. Same-round accepts are at least three cells apart,
    so the spacing guarantee holds without a serial scan.
    """
    from scipy.ndimage import maximum_filter

    rng = np.random.default_rng(seed)
    cell = radius / math.sqrt(2.0)
    gh, gw = int(math.ceil(h / cell)), int(math.ceil(w / cell))
    iy, ix = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    py = (iy + rng.uniform(size=(gh, gw))) * cell
    px = (ix + rng.uniform(size=(gh, gw))) * cell
    pri = rng.uniform(size=(gh, gw))
    undecided = (py < h) & (px < w)
    accepted = np.zeros((gh, gw), dtype=bool)
    r2 = radius * radius
    while undecided.any():
        p = np.where(undecided, pri, -np.inf)
        local_max = maximum_filter(p, size=5, mode="constant", cval=-np.inf)
        newly = undecided & np.isfinite(p) & (p == local_max)
        accepted |= newly
        undecided &= ~newly
        ay = np.where(newly, py, np.nan)
        ax = np.where(newly, px, np.nan)
        ay = np.pad(ay, 2, constant_values=np.nan)
        ax = np.pad(ax, 2, constant_values=np.nan)
        for dy in range(5):
            for dx in range(5):
                ny = ay[dy:dy + gh, dx:dx + gw]
                nx = ax[dy:dy + gh, dx:dx + gw]
                d2 = (py - ny) ** 2 + (px - nx) ** 2
                with np.errstate(invalid="ignore"):
                    undecided &= ~(d2 < r2)
    mask = np.zeros((h, w), dtype=np.float64)
    mask[py[accepted].astype(int), px[accepted].astype(int)] = 1.0
    return mask


# ---------------------------------------------------------------- coil maps

def make_coil_maps(n_coils: int, h: int, w: int, seed: int = 0) -> np.ndarray:
    """Smooth synthetic sensitivities, normalized so sum_c |S_c|^2 = 1.

    Each coil is a Gaussian magnitude lobe placed on a ring around the image
    with a smooth linear phase ramp; normalization is exact by construction.
    """
    if n_coils < 1:
        raise ConfigError("need at least one coil")
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ring = 0.45 * min(h, w)
    maps = np.empty((n_coils, h, w), dtype=np.complex128)
    for c in range(n_coils):
        ang = 2.0 * math.pi * (c + rng.uniform(-0.15, 0.15)) / n_coils
        ly = cy + ring * math.sin(ang)
        lx = cx + ring * math.cos(ang)
        sigma = (0.55 + 0.2 * rng.uniform()) * min(h, w)
        mag = np.exp(-(((ys - ly) ** 2 + (xs - lx) ** 2) / (2.0 * sigma**2)))
        phase = (
            rng.uniform(-math.pi, math.pi)
            + rng.uniform(-1.5, 1.5) * (xs - cx) / w
            + rng.uniform(-1.5, 1.5) * (ys - cy) / h
        )
        maps[c] = (0.1 + mag) * np.exp(1j * phase)
    norm = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / norm


def add_measurement_noise(
    y: np.ndarray, mask: np.ndarray, snr_db: float, rng: np.random.Generator
) -> np.ndarray:
    """Additive complex Gaussian noise on sampled k-space locations only."""
    sampled = mask > 0
    power = float(np.mean(np.abs(y[..., sampled]) ** 2))
    sigma = math.sqrt(power) * 10.0 ** (-snr_db / 20.0)
    noise = rng.normal(scale=sigma / math.sqrt(2.0), size=y.shape + (2,))
    eps = (noise[..., 0] + 1j * noise[..., 1]) * sampled
    return y + eps
