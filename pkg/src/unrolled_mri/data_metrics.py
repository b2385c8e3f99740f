"""Synthetic dataset generation, evaluation metrics, and the stage-wise sweep.

Phantoms are random multi-ellipse magnitude images with a smooth random phase,
bounded to unit magnitude. Each split carries one sensing model (mask + coil
maps) and retrospectively undersampled k-space for every reference image;
generation is a pure function of the configuration and seed. Metrics operate
on magnitude images: complex inputs are reduced with abs, real inputs are
taken as-is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .binio import read_container, write_container
from .errors import ConfigError, ShapeError
from .mri_physics import (
    MaskSpec,
    SensingModel,
    add_measurement_noise,
    achieved_acceleration,
    forward_a,
    make_coil_maps,
    make_mask,
)

SPLITS = ("train", "val", "test")


def make_phantom(h: int, w: int, seed: int = 0) -> np.ndarray:
    """Random piecewise-smooth complex phantom with magnitude in [0, 1]."""
    if not (h > 0 and w > 0 and (h & (h - 1)) == 0 and (w & (w - 1)) == 0):
        raise ConfigError(f"phantom extents must be powers of two, got {h}x{w}")
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    mag = np.zeros((h, w))
    while mag.max() <= 0:  # negative-amplitude draws can cancel; redraw
        for _ in range(int(rng.integers(4, 9))):
            cy = rng.uniform(0.2, 0.8) * h
            cx = rng.uniform(0.2, 0.8) * w
            a = rng.uniform(0.08, 0.35) * h
            b = rng.uniform(0.08, 0.35) * w
            theta = rng.uniform(0, math.pi)
            dy, dx = ys - cy, xs - cx
            u = dy * math.cos(theta) + dx * math.sin(theta)
            v = -dy * math.sin(theta) + dx * math.cos(theta)
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            mag += rng.uniform(-0.6, 1.0) * inside
        mag = np.clip(mag, 0.0, None)
    mag = mag / mag.max() * rng.uniform(0.7, 1.0)
    phase = gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 8.0)
    span = np.abs(phase).max()
    if span > 0:
        phase = phase / span * (math.pi / 2.0)
    return mag * np.exp(1j * phase)


# ------------------------------------------------------------------ datasets

@dataclass(frozen=True)
class DatasetConfig:
    height: int = 64
    width: int = 64
    coils: int = 4
    counts: dict = field(default_factory=lambda: {"train": 200, "val": 20, "test": 20})
    mask_kind: str = "poisson_disc_2d"
    acceleration: float = 4.0
    calibration_extent: int = 8
    noise_snr_db: float | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "coils": self.coils,
            "counts": dict(self.counts),
            "mask_kind": self.mask_kind,
            "acceleration": self.acceleration,
            "calibration_extent": self.calibration_extent,
            "noise_snr_db": self.noise_snr_db,
            "seed": self.seed,
        }


@dataclass
class Split:
    """One dataset split: references, k-space, and the shared sensing model."""

    name: str
    refs: np.ndarray  # (n, H, W) complex
    kspace: np.ndarray  # (n, C, H, W) complex
    mask: np.ndarray  # (H, W)
    coil_maps: np.ndarray  # (C, H, W) complex
    meta: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return self.refs.shape[0]

    def model(self, step_size: float = 0.5, mu: float = 4.0) -> SensingModel:
        return SensingModel(self.mask, self.coil_maps, step_size=step_size, mu=mu)


def generate_dataset(cfg: DatasetConfig) -> dict[str, Split]:
    """All splits from one config; split seeds are disjoint by construction."""
    root = np.random.SeedSequence(cfg.seed)
    split_seeds = root.spawn(len(SPLITS))
    out: dict[str, Split] = {}
    for sname, seq in zip(SPLITS, split_seeds):
        n = int(cfg.counts.get(sname, 0))
        seeds = seq.generate_state(3 + n)
        mask = make_mask(
            MaskSpec(cfg.mask_kind, cfg.acceleration, cfg.calibration_extent,
                     seed=int(seeds[0])),
            (cfg.height, cfg.width),
        )
        maps = make_coil_maps(cfg.coils, cfg.height, cfg.width, seed=int(seeds[1]))
        model = SensingModel(mask, maps)
        refs = np.stack([
            make_phantom(cfg.height, cfg.width, seed=int(seeds[3 + i]))
            for i in range(n)
        ])
        kspace = forward_a(model, refs)
        if cfg.noise_snr_db is not None:
            rng = np.random.default_rng(int(seeds[2]))
            kspace = add_measurement_noise(kspace, mask, cfg.noise_snr_db, rng)
        out[sname] = Split(
            name=sname,
            refs=refs,
            kspace=kspace,
            mask=mask,
            coil_maps=maps,
            meta={
                "split": sname,
                "config": cfg.to_dict(),
                "achieved_acceleration": achieved_acceleration(mask),
                "item_model_index": [0] * n,
            },
        )
    return out


def save_split(split: Split, path) -> None:
    write_container(
        path,
        {
            "refs": split.refs,
            "kspace": split.kspace,
            "mask": split.mask,
            "coil_maps": split.coil_maps,
        },
        split.meta,
    )


def load_split(path) -> Split:
    tensors, meta = read_container(path)
    return Split(
        name=meta.get("split", "unknown"),
        refs=tensors["refs"],
        kspace=tensors["kspace"],
        mask=tensors["mask"],
        coil_maps=tensors["coil_maps"],
        meta=meta,
    )


def save_dataset(splits: dict[str, Split], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in splits.items():
        save_split(split, out / f"{name}.urd")


def load_dataset(out_dir) -> dict[str, Split]:
    out = Path(out_dir)
    splits = {}
    for name in SPLITS:
        path = out / f"{name}.urd"
        if path.exists():
            splits[name] = load_split(path)
    if not splits:
        raise ConfigError(f"no dataset splits found under {out}")
    return splits


# ------------------------------------------------------------------- metrics

def _magnitude(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.abs(x) if np.iscomplexobj(x) else x.astype(np.float64)


def _check_pair(ref, rec):
    ref_m, rec_m = _magnitude(ref), _magnitude(rec)
    if ref_m.shape != rec_m.shape:
        raise ShapeError(f"metric shapes differ: {ref_m.shape} vs {rec_m.shape}")
    return ref_m, rec_m


def nrmse(ref: np.ndarray, rec: np.ndarray) -> float:
    ref_m, rec_m = _check_pair(ref, rec)
    denom = float(np.linalg.norm(ref_m))
    return float(np.linalg.norm(rec_m - ref_m)) / max(denom, 1e-300)


def psnr(ref: np.ndarray, rec: np.ndarray) -> float:
    """20*log10(max|ref| / rmse) on magnitude images; +inf for identical pairs."""
    ref_m, rec_m = _check_pair(ref, rec)
    rmse = float(np.sqrt(np.mean((rec_m - ref_m) ** 2)))
    if rmse == 0.0:
        return float("inf")
    peak = float(ref_m.max())
    if peak == 0.0:
        return float("-inf")
    return 20.0 * math.log10(peak / rmse)


def ssim(ref: np.ndarray, rec: np.ndarray) -> float:
    """Single-scale SSIM with a 7x7 Gaussian window (sigma 1.5).

    Stabilizers k1=0.01, k2=0.03; the data range is the reference magnitude
    maximum.
    """
    ref_m, rec_m = _check_pair(ref, rec)
    if ref_m.ndim != 2:
        raise ShapeError("ssim expects single 2D images")
    data_range = float(ref_m.max())
    if data_range <= 0:
        data_range = 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    # truncate=2.0 with sigma=1.5 gives a 7-tap kernel per axis
    def blur(img):
        return gaussian_filter(img, sigma=1.5, truncate=2.0)

    mu_x = blur(ref_m)
    mu_y = blur(rec_m)
    xx = blur(ref_m * ref_m) - mu_x * mu_x
    yy = blur(rec_m * rec_m) - mu_y * mu_y
    xy = blur(ref_m * rec_m) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def metric_set(refs: np.ndarray, recs: np.ndarray) -> dict:
    """Per-item psnr/ssim/nrmse plus mean and standard deviation."""
    items = []
    for ref, rec in zip(refs, recs):
        items.append({
            "psnr": psnr(ref, rec),
            "ssim": ssim(ref, rec),
            "nrmse": nrmse(ref, rec),
        })
    summary = {}
    for key in ("psnr", "ssim", "nrmse"):
        vals = np.array([it[key] for it in items], dtype=np.float64)
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return {"items": items, "summary": summary}


def inference_sweep(net, split: Split) -> list[dict]:
    """Mean test PSNR of the first n_inf iterations, for every n_inf."""
    rows = []
    for n_inf in range(1, net.n_iters + 1):
        recon = net.forward_full(split.kspace, n_inf=n_inf)
        vals = [psnr(r, x) for r, x in zip(split.refs, recon)]
        rows.append({"n_inf": n_inf, "psnr": float(np.mean(vals))})
    return rows
