"""Full-case prediction by sliding-window tiling with Gaussian blending.

Tiles cover the (padded) volume with evenly spaced positions whose stride
never exceeds step_fraction * patch; each tile's softmax output is
accumulated under a center-peaked Gaussian importance map and the sums are
normalized voxel-wise. Optional mirroring TTA averages the eight flip
combinations. The final label map is resampled back onto the raw grid so
output geometry always equals input geometry.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import label as cc_label

from .data import KIND_LABELS, Volume
from .fingerprint import Fingerprint
from .network import SegmentationNet
from .planner import Plan, SpacingRule, enforced_spacing
from .preprocess import ORDER_LINEAR, ORDER_NEAREST, normalize, pad_to_shape, resample, resample_to_dims

STEP_FRACTION = 0.7
GAUSSIAN_SIGMA_FRACTION = 8.0   # sigma = patch / 8
GAUSSIAN_MIN_FRACTION = 1e-3    # clamp weights to this fraction of the peak


@dataclass
class TileLayout:
    patch_size: tuple[int, int, int]
    step_fraction: float
    positions: list[tuple[int, int, int]]


@dataclass
class InferenceMode:
    tta: bool = True  # normal mode; fastest mode turns mirroring off


def _axis_positions(length: int, patch: int, step_fraction: float) -> list[int]:
    if length <= patch:
        return [0]
    span = length - patch
    n = math.ceil(span / (step_fraction * patch)) + 1
    return [int(math.floor(k * span / (n - 1) + 0.5)) for k in range(n)]


def tile_positions(volume_dims, patch_size, step_fraction: float = STEP_FRACTION) -> TileLayout:
    """All tile corner offsets; first tile at 0, last flush with the border."""
    if not (0.0 < step_fraction <= 1.0):
        raise ValueError(f"step_fraction must be in (0, 1], got {step_fraction}")
    per_axis = [
        _axis_positions(int(l), int(p), step_fraction)
        for l, p in zip(volume_dims, patch_size)
    ]
    positions = [tuple(c) for c in itertools.product(*per_axis)]
    return TileLayout(tuple(int(p) for p in patch_size), step_fraction, positions)


def gaussian_importance(patch_size) -> np.ndarray:
    """Center-peaked separable Gaussian, clamped away from zero."""
    grids = []
    for p in patch_size:
        c = (p - 1) / 2.0
        sigma = max(p / GAUSSIAN_SIGMA_FRACTION, 1e-8)
        i = np.arange(p, dtype=np.float64)
        grids.append(np.exp(-0.5 * ((i - c) / sigma) ** 2))
    w = grids[0][:, None, None] * grids[1][None, :, None] * grids[2][None, None, :]
    return np.maximum(w, w.max() * GAUSSIAN_MIN_FRACTION)


def net_forward_fn(net: SegmentationNet):
    """Adapter: (z,y,x) float32 tile -> (C,z,y,x) float32 probabilities."""

    def forward(tile: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(tile))[None, None].float()
            return net(x)[0][0].numpy()

    return forward


def sliding_window_predict(
    forward_fn,
    values: np.ndarray,
    layout: TileLayout,
    num_classes: int,
) -> np.ndarray:
    """Gaussian-blended full-volume class probabilities, shape (C,z,y,x).

    Tiles accumulate in layout order so the result is deterministic.
    """
    w = gaussian_importance(layout.patch_size)
    num = np.zeros((num_classes,) + tuple(values.shape), dtype=np.float64)
    den = np.zeros(values.shape, dtype=np.float64)
    for corner in layout.positions:
        sl = tuple(slice(c, c + p) for c, p in zip(corner, layout.patch_size))
        probs = np.asarray(forward_fn(values[sl]), dtype=np.float64)
        num[(slice(None),) + sl] += w * probs
        den[sl] += w
    return (num / den).astype(np.float32)


def tta_predict(
    forward_fn,
    values: np.ndarray,
    layout: TileLayout,
    mode: InferenceMode,
    num_classes: int,
) -> np.ndarray:
    """Average over the 8 mirror combinations (or a single plain pass)."""
    if not mode.tta:
        return sliding_window_predict(forward_fn, values, layout, num_classes)
    acc = np.zeros((num_classes,) + tuple(values.shape), dtype=np.float64)
    for flips in itertools.product((False, True), repeat=3):
        axes = tuple(i for i, f in enumerate(flips) if f)
        flipped = np.flip(values, axis=axes) if axes else values
        probs = sliding_window_predict(forward_fn, np.ascontiguousarray(flipped), layout, num_classes)
        if axes:
            probs = np.flip(probs, axis=tuple(a + 1 for a in axes))
        acc += probs
    return (acc / 8.0).astype(np.float32)


def largest_component_filter(seg: np.ndarray, num_classes: int) -> np.ndarray:
    """Keep only the largest 6-connected component of each foreground class."""
    out = seg.copy()
    for c in range(1, num_classes):
        mask = out == c
        if not mask.any():
            continue
        lab, n = cc_label(mask)  # default structure = face connectivity
        if n <= 1:
            continue
        sizes = np.bincount(lab.reshape(-1))
        keep = int(np.argmax(sizes[1:])) + 1
        out[mask & (lab != keep)] = 0
    return out


def predict_case(
    net_or_fn,
    raw: Volume,
    plan: Plan,
    fp: Fingerprint,
    mode: InferenceMode | None = None,
    force_spacing: SpacingRule | None = None,
    postprocess_cc: bool = False,
    step_fraction: float = STEP_FRACTION,
) -> Volume:
    """Predict a label map for a raw image; output geometry == input geometry."""
    mode = mode or InferenceMode()
    forward_fn = net_forward_fn(net_or_fn) if isinstance(net_or_fn, SegmentationNet) else net_or_fn

    if force_spacing is not None:
        target = enforced_spacing(raw.num_slices, raw.spacing, force_spacing)
    else:
        target = plan.target_spacing

    img = normalize(resample(raw, target, ORDER_LINEAR), fp)
    padded, lo = pad_to_shape(img.values, plan.patch_size, 0.0)
    layout = tile_positions(padded.shape, plan.patch_size, step_fraction)
    probs = tta_predict(forward_fn, padded, layout, mode, plan.num_classes)
    crop = tuple(slice(l, l + d) for l, d in zip(lo, img.dims))
    probs = probs[(slice(None),) + crop]

    seg = np.argmax(probs, axis=0).astype(np.uint8)  # ties -> lowest class
    if postprocess_cc:
        seg = largest_component_filter(seg, plan.num_classes)
    seg_vol = Volume(seg, target, KIND_LABELS)
    return resample_to_dims(seg_vol, raw.dims, raw.spacing, ORDER_NEAREST)
