"""Overlap (DSC) and surface (NSD) evaluation per class, plus aggregation.

Surfaces are voxel-based: a mask voxel is surface if any of its six face
neighbors is outside the mask, where the volume border counts as outside.
Distances are Euclidean in mm between surface-voxel centers. Empty/empty
scores 1.0 and one-sided-empty scores 0.0, for both metrics.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Volume, read_volume
from .errors import MissingCase, ShapeMismatch

DEFAULT_TOLERANCE_MM = 1.0


@dataclass
class CaseScore:
    case: str
    per_class_dsc: dict[int, float] = field(default_factory=dict)
    per_class_nsd: dict[int, float] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(list(self.per_class_dsc.values())))

    @property
    def mean_nsd(self) -> float:
        return float(np.mean(list(self.per_class_nsd.values())))


def _check_dims(pred: Volume, gt: Volume, need_spacing: bool = False) -> None:
    if pred.dims != gt.dims:
        raise ShapeMismatch(f"pred dims {pred.dims} != gt dims {gt.dims}")
    if need_spacing and pred.spacing != gt.spacing:
        raise ShapeMismatch(f"pred spacing {pred.spacing} != gt spacing {gt.spacing}")


def dsc(pred: Volume, gt: Volume, class_id: int) -> float:
    """2|A∩B| / (|A|+|B|); empty/empty -> 1.0, one empty -> 0.0."""
    _check_dims(pred, gt)
    a = pred.values == class_id
    b = gt.values == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one face neighbor outside it."""
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    core = padded[1:-1, 1:-1, 1:-1]
    all_inside = (
        padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
        & padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2]
    )
    return core & ~all_inside


def _surface_points_mm(mask: np.ndarray, spacing) -> np.ndarray:
    idx = np.argwhere(surface_mask(mask)).astype(np.float64)
    return idx * np.asarray(spacing, dtype=np.float64)


def _min_distances(a_pts: np.ndarray, b_pts: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbor distances from each a point to the b set."""
    out = np.empty(len(a_pts), dtype=np.float64)
    chunk = max(1, 2_000_000 // max(1, len(b_pts)))
    for i in range(0, len(a_pts), chunk):
        d2 = ((a_pts[i : i + chunk, None, :] - b_pts[None, :, :]) ** 2).sum(axis=-1)
        out[i : i + chunk] = np.sqrt(d2.min(axis=1))
    return out


def nsd(pred: Volume, gt: Volume, class_id: int, tolerance_mm: float = DEFAULT_TOLERANCE_MM) -> float:
    """Symmetrized fraction of surface voxels within tolerance of the other surface."""
    _check_dims(pred, gt, need_spacing=True)
    if tolerance_mm < 0:
        raise ValueError("tolerance must be >= 0")
    a = pred.values == class_id
    b = gt.values == class_id
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    sa = _surface_points_mm(a, pred.spacing)
    sb = _surface_points_mm(b, gt.spacing)
    da = _min_distances(sa, sb)
    db = _min_distances(sb, sa)
    hits = int((da <= tolerance_mm).sum()) + int((db <= tolerance_mm).sum())
    return hits / (len(sa) + len(sb))


def score_case(pred: Volume, gt: Volume, num_classes: int, tolerance_mm: float, case: str = "") -> CaseScore:
    score = CaseScore(case=case)
    for c in range(1, num_classes):
        score.per_class_dsc[c] = dsc(pred, gt, c)
        score.per_class_nsd[c] = nsd(pred, gt, c, tolerance_mm)
    return score


def evaluate(
    pred_dir,
    gt_dir,
    num_classes: int,
    tolerance_mm: float = DEFAULT_TOLERANCE_MM,
    out_csv=None,
) -> list[CaseScore]:
    """Score every prediction against its same-named ground truth file.

    The CSV lists one row per (case, class), then per-class mean rows and a
    final overall mean row.
    """
    gt_files = sorted(f for f in os.listdir(gt_dir) if f.endswith(".mvol"))
    if not gt_files:
        raise MissingCase(f"no .mvol files in {gt_dir}")
    scores = []
    for name in gt_files:
        pred_path = os.path.join(pred_dir, name)
        if not os.path.isfile(pred_path):
            raise MissingCase(f"prediction missing for case {name}")
        pred = read_volume(pred_path)
        gt = read_volume(os.path.join(gt_dir, name))
        scores.append(score_case(pred, gt, num_classes, tolerance_mm, case=name))
    if out_csv is not None:
        write_scores_csv(scores, num_classes, out_csv)
    return scores


def class_means(scores: list[CaseScore], num_classes: int):
    dsc_means = {c: float(np.mean([s.per_class_dsc[c] for s in scores])) for c in range(1, num_classes)}
    nsd_means = {c: float(np.mean([s.per_class_nsd[c] for s in scores])) for c in range(1, num_classes)}
    return dsc_means, nsd_means


def overall_means(scores: list[CaseScore]) -> tuple[float, float]:
    return (
        float(np.mean([s.mean_dsc for s in scores])),
        float(np.mean([s.mean_nsd for s in scores])),
    )


def write_scores_csv(scores: list[CaseScore], num_classes: int, path) -> None:
    dsc_means, nsd_means = class_means(scores, num_classes)
    mean_dsc, mean_nsd = overall_means(scores)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["case", "class", "dsc", "nsd"])
        for s in scores:
            for c in range(1, num_classes):
                w.writerow([s.case, c, repr(s.per_class_dsc[c]), repr(s.per_class_nsd[c])])
        for c in range(1, num_classes):
            w.writerow(["mean", c, repr(dsc_means[c]), repr(nsd_means[c])])
        w.writerow(["mean", "all", repr(mean_dsc), repr(mean_nsd)])
