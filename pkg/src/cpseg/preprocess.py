"""Resampling, intensity normalization, patch sampling, and augmentation.

Resampling maps voxel centers with the align-centers convention: output
center i sits at physical position (i + 0.5) * target_spacing, which lands
on input index (i + 0.5) * target / source - 0.5. Images interpolate
linearly, label maps always nearest-neighbor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .data import KIND_LABELS, Volume
from .errors import DegenerateStdWarning, InterpolationOnLabels
from .fingerprint import Fingerprint

ORDER_NEAREST = "nearest"
ORDER_LINEAR = "linear"
_SPLINE_ORDER = {ORDER_NEAREST: 0, ORDER_LINEAR: 1}


@dataclass
class Patch:
    """Network-input sub-volume plus provenance (case id, corner offset)."""

    image: np.ndarray                 # float32, shape == plan.patch_size
    labels: np.ndarray | None         # uint8 same shape, None for unlabeled
    case_id: str = ""
    corner: tuple[int, int, int] = (0, 0, 0)


@dataclass
class AugmentConfig:
    mirror_prob: float = 0.5
    scale_prob: float = 0.5
    noise_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    noise_sigma_max: float = 0.1
    oversample_foreground: float = 0.33


def _output_dims(dims, spacing, target_spacing):
    out = []
    for d, s, t in zip(dims, spacing, target_spacing):
        n = int(np.floor(d * s / t + 0.5))  # round half up, deterministic
        out.append(max(1, n))
    return tuple(out)


def _resample_values(values: np.ndarray, out_dims, in_dims, spline_order: int) -> np.ndarray:
    coords = np.meshgrid(
        *[
            (np.arange(od, dtype=np.float64) + 0.5) * (idim / od) - 0.5
            for od, idim in zip(out_dims, in_dims)
        ],
        indexing="ij",
    )
    return map_coordinates(values, coords, order=spline_order, mode="nearest")


def resample(volume: Volume, target_spacing, order: str = ORDER_LINEAR) -> Volume:
    """Resample onto ``target_spacing``; output dims follow round(d*s/t)."""
    if order not in _SPLINE_ORDER:
        raise ValueError(f"unknown interpolation order {order!r}")
    if volume.kind == KIND_LABELS and order != ORDER_NEAREST:
        raise InterpolationOnLabels("label volumes must be resampled with nearest")
    target_spacing = tuple(float(t) for t in target_spacing)
    out_dims = _output_dims(volume.dims, volume.spacing, target_spacing)
    if out_dims == volume.dims and target_spacing == volume.spacing:
        return replace(volume, values=volume.values.copy(), spacing=target_spacing)
    # Physical size relation: out_dims voxels at target spacing cover roughly
    # the input extent; the index map below is exact for the centers.
    scale_dims = volume.dims
    values = _resample_values(
        volume.values.astype(np.float64) if volume.kind != KIND_LABELS else volume.values,
        out_dims,
        scale_dims,
        _SPLINE_ORDER[order],
    )
    if volume.kind == KIND_LABELS:
        values = values.astype(np.uint8)
    else:
        values = values.astype(np.float32)
    return Volume(values, target_spacing, volume.kind)


def resample_to_dims(volume: Volume, out_dims, out_spacing, order: str) -> Volume:
    """Resample onto an explicit output grid (geometry restoration)."""
    if volume.kind == KIND_LABELS and order != ORDER_NEAREST:
        raise InterpolationOnLabels("label volumes must be resampled with nearest")
    out_dims = tuple(int(d) for d in out_dims)
    values = _resample_values(
        volume.values.astype(np.float64) if volume.kind != KIND_LABELS else volume.values,
        out_dims,
        volume.dims,
        _SPLINE_ORDER[order],
    )
    if volume.kind == KIND_LABELS:
        values = values.astype(np.uint8)
    else:
        values = values.astype(np.float32)
    return Volume(values, tuple(float(s) for s in out_spacing), volume.kind)


def normalize(volume: Volume, fp: Fingerprint) -> Volume:
    """Clip to [p_low, p_high], subtract mean, divide by std."""
    std = fp.std
    if std == 0.0:
        warnings.warn("fingerprint std is 0; using divisor 1", DegenerateStdWarning)
        std = 1.0
    v = np.clip(volume.values, np.float32(fp.p_low), np.float32(fp.p_high))
    v = (v - np.float32(fp.mean)) / np.float32(std)
    return Volume(v.astype(np.float32), volume.spacing, volume.kind)


def pad_to_shape(values: np.ndarray, shape, pad_value) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Symmetric zero-style padding up to ``shape``; returns (padded, lo_pad)."""
    pads = []
    for d, t in zip(values.shape, shape):
        extra = max(0, t - d)
        lo = extra // 2
        pads.append((lo, extra - lo))
    if any(p != (0, 0) for p in pads):
        values = np.pad(values, pads, mode="constant", constant_values=pad_value)
    return values, tuple(p[0] for p in pads)


def sample_patch(
    image: Volume,
    labels: Volume | None,
    patch_size,
    rng: np.random.Generator,
    oversample_foreground: float = 0.33,
    case_id: str = "",
) -> Patch:
    """Draw one training patch; pure function of (inputs, rng state).

    With probability ``oversample_foreground`` (labeled cases only) the
    patch is centered on a uniformly chosen foreground voxel; otherwise the
    corner is uniform over valid positions. Volumes smaller than the patch
    are padded symmetrically (images with 0.0, labels with class 0).
    """
    patch_size = tuple(int(p) for p in patch_size)
    img, _ = pad_to_shape(image.values, patch_size, 0.0)
    lbl = None
    if labels is not None:
        lbl, _ = pad_to_shape(labels.values, patch_size, 0)

    dims = img.shape
    max_corner = [d - p for d, p in zip(dims, patch_size)]

    use_fg = False
    if lbl is not None and oversample_foreground > 0:
        use_fg = bool(rng.random() < oversample_foreground)
    if use_fg:
        fg = np.argwhere(lbl > 0)
        if fg.size:
            center = fg[rng.integers(len(fg))]
            corner = [
                int(np.clip(c - p // 2, 0, m))
                for c, p, m in zip(center, patch_size, max_corner)
            ]
        else:
            use_fg = False
    if not use_fg:
        corner = [int(rng.integers(m + 1)) for m in max_corner]

    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_size))
    return Patch(
        image=np.ascontiguousarray(img[sl]),
        labels=np.ascontiguousarray(lbl[sl]) if lbl is not None else None,
        case_id=case_id,
        corner=tuple(corner),
    )


def augment(patch: Patch, rng: np.random.Generator, config: AugmentConfig | None = None) -> Patch:
    """Mirror flips (image+labels), intensity scale and noise (image only).

    Draw order is fixed (mirror z,y,x, scale, noise) so a given rng state
    always produces the same patch.
    """
    config = config or AugmentConfig()
    img = patch.image
    lbl = patch.labels
    for axis in range(3):
        if rng.random() < config.mirror_prob:
            img = np.flip(img, axis=axis)
            if lbl is not None:
                lbl = np.flip(lbl, axis=axis)
    img = np.ascontiguousarray(img)
    if lbl is not None:
        lbl = np.ascontiguousarray(lbl)
    if rng.random() < config.scale_prob:
        lo, hi = config.scale_range
        img = img * np.float32(rng.uniform(lo, hi))
    if rng.random() < config.noise_prob:
        sigma = rng.uniform(0.0, config.noise_sigma_max)
        img = img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32)
    return Patch(image=img.astype(np.float32), labels=lbl, case_id=patch.case_id, corner=patch.corner)
