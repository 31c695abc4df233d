"""Reproducible multi-class ellipsoid phantoms for desk-scale experiments.

Each case drops ``num_organs`` mutually disjoint random ellipsoids on a
noisy background; organ classes carry well-separated intensity means so
the segmentation signal is learnable by construction. Per-case spacing is
jittered so resampling paths are exercised.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import (
    DatasetManifest,
    Volume,
    new_image,
    new_labels,
    write_manifest,
    write_volume,
)
from .errors import PlacementFailure

MAX_PLACEMENT_ATTEMPTS = 100


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    num_organs: int = 3
    background_intensity: float = 0.0
    intensity_step: float = 30.0      # organ c mean = background + c * step
    intensity_jitter: float = 3.0     # per-case uniform jitter of organ means
    noise_sigma: float = 5.0
    radius_frac: tuple[float, float] = (0.125, 0.25)  # radii in [dims/8, dims/4]
    spacing_jitter: tuple[float, float] = (0.8, 1.2)  # mm

    @property
    def num_classes(self) -> int:
        return self.num_organs + 1


def _ellipsoid_mask(dims, center, radii) -> np.ndarray:
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return q <= 1.0


def generate_phantom(config: PhantomConfig, seed: int) -> tuple[Volume, Volume]:
    """One (image, labels) pair, fully determined by (config, seed)."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in config.dims)
    spacing = tuple(float(rng.uniform(*config.spacing_jitter)) for _ in range(3))

    labels = np.zeros(dims, dtype=np.uint8)
    organ_means = []
    for organ in range(1, config.num_organs + 1):
        placed = False
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            radii = np.array([rng.uniform(d * config.radius_frac[0], d * config.radius_frac[1]) for d in dims])
            lo = radii
            hi = np.array(dims) - 1 - radii
            if np.any(hi < lo):
                continue
            center = np.array([rng.uniform(l, h) for l, h in zip(lo, hi)])
            mask = _ellipsoid_mask(dims, center, radii)
            if not (mask & (labels > 0)).any():
                labels[mask] = organ
                placed = True
                break
        if not placed:
            raise PlacementFailure(
                f"could not place organ {organ} after {MAX_PLACEMENT_ATTEMPTS} attempts; config too crowded"
            )
        organ_means.append(
            config.background_intensity
            + organ * config.intensity_step
            + rng.uniform(-config.intensity_jitter, config.intensity_jitter)
        )

    image = np.full(dims, config.background_intensity, dtype=np.float64)
    for organ, mean in enumerate(organ_means, start=1):
        image[labels == organ] = mean
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=dims)
    return new_image(image, spacing), new_labels(labels, spacing)


def generate_dataset(
    n_labeled: int,
    n_unlabeled: int,
    config: PhantomConfig,
    seed: int,
    out_dir,
) -> str:
    """Write phantoms + manifest; case i uses seed + i so no two cases match.

    Returns the manifest path. Regeneration with the same arguments is
    byte-identical.
    """
    if n_labeled < 1:
        raise ValueError("need at least one labeled case")
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(num_classes=config.num_classes)
    for i in range(n_labeled):
        img, lbl = generate_phantom(config, seed + i)
        img_name = f"case_{i:03d}.mvol"
        lbl_name = f"case_{i:03d}_seg.mvol"
        write_volume(img, os.path.join(out_dir, img_name))
        write_volume(lbl, os.path.join(out_dir, lbl_name))
        manifest.labeled.append((img_name, lbl_name))
    for j in range(n_unlabeled):
        img, _ = generate_phantom(config, seed + n_labeled + j)
        img_name = f"case_{n_labeled + j:03d}.mvol"
        write_volume(img, os.path.join(out_dir, img_name))
        manifest.unlabeled.append(img_name)
    manifest_path = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest, manifest_path)
    return manifest_path
