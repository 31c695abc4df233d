"""Dataset intensity fingerprint computed over global pixels.

All voxels of all images (labeled and unlabeled alike) are pooled into one
multiset; no foreground mask is involved, so unlabeled cases contribute on
equal footing. Percentiles use the nearest-rank rule (1-based index
ceil(q*N) into the sorted pooled multiset) and the standard deviation is
the population one, so every statistic is exactly reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import Volume
from .errors import EmptyDataset, IoFailure, MalformedHeader

# CT default quantile pair, expressed as exact rationals for integer rank math.
P_LOW_NUM, P_LOW_DEN = 1, 200      # 0.5th percentile
P_HIGH_NUM, P_HIGH_DEN = 199, 200  # 99.5th percentile


@dataclass
class Fingerprint:
    mean: float
    std: float
    p_low: float
    p_high: float
    median_spacing: tuple[float, float, float]
    num_cases: int
    num_voxels: int


def _nearest_rank(sorted_values: np.ndarray, num: int, den: int) -> float:
    n = sorted_values.size
    idx = max(1, -(-n * num // den))  # ceil(n*q) in exact integer arithmetic
    return float(sorted_values[idx - 1])


def compute_fingerprint(
    images: Sequence[Volume] | Iterable[Volume],
    max_voxels_per_case: int | None = None,
    subsample_seed: int = 0,
) -> Fingerprint:
    """Pool every voxel of every image and summarize.

    ``max_voxels_per_case`` enables uniform per-case subsampling (without
    replacement, fixed seed) for datasets too large for exact statistics;
    the default is exact.
    """
    images = list(images)
    if not images:
        raise EmptyDataset("fingerprint needs at least one image")

    pooled = []
    spacings = []
    for i, vol in enumerate(images):
        vals = vol.values.reshape(-1).astype(np.float64)
        if max_voxels_per_case is not None and vals.size > max_voxels_per_case:
            rng = np.random.default_rng(subsample_seed + i)
            vals = vals[rng.choice(vals.size, size=max_voxels_per_case, replace=False)]
        pooled.append(vals)
        spacings.append(vol.spacing)

    # All statistics run over the sorted pool so that case order and voxel
    # order cannot perturb even the last bit of the result.
    allv_sorted = np.sort(np.concatenate(pooled))
    mean = float(np.mean(allv_sorted))
    std = float(math.sqrt(np.mean((allv_sorted - mean) ** 2)))
    med = np.median(np.asarray(spacings, dtype=np.float64), axis=0)
    return Fingerprint(
        mean=mean,
        std=std,
        p_low=_nearest_rank(allv_sorted, P_LOW_NUM, P_LOW_DEN),
        p_high=_nearest_rank(allv_sorted, P_HIGH_NUM, P_HIGH_DEN),
        median_spacing=(float(med[0]), float(med[1]), float(med[2])),
        num_cases=len(images),
        num_voxels=int(allv_sorted.size),
    )


_KEYS = ("mean", "std", "p_low", "p_high", "spacing_z", "spacing_y", "spacing_x",
         "num_cases", "num_voxels")


def save_fingerprint(fp: Fingerprint, path) -> None:
    values = {
        "mean": repr(fp.mean),
        "std": repr(fp.std),
        "p_low": repr(fp.p_low),
        "p_high": repr(fp.p_high),
        "spacing_z": repr(fp.median_spacing[0]),
        "spacing_y": repr(fp.median_spacing[1]),
        "spacing_x": repr(fp.median_spacing[2]),
        "num_cases": str(fp.num_cases),
        "num_voxels": str(fp.num_voxels),
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            for k in _KEYS:
                f.write(f"{k}={values[k]}\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_fingerprint(path) -> Fingerprint:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.strip() for ln in f if ln.strip()]
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    kv = {}
    for ln in lines:
        k, _, v = ln.partition("=")
        kv[k.strip()] = v.strip()
    missing = [k for k in _KEYS if k not in kv]
    if missing:
        raise MalformedHeader(f"{path}: fingerprint file missing keys {missing}")
    return Fingerprint(
        mean=float(kv["mean"]),
        std=float(kv["std"]),
        p_low=float(kv["p_low"]),
        p_high=float(kv["p_high"]),
        median_spacing=(float(kv["spacing_z"]), float(kv["spacing_y"]), float(kv["spacing_x"])),
        num_cases=int(kv["num_cases"]),
        num_voxels=int(kv["num_voxels"]),
    )
