"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (scalar loops, explicit sums) and
shares no code with the production paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def brute_dsc(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    na = nb = inter = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        a = int(p) == class_id
        b = int(g) == class_id
        na += a
        nb += b
        inter += a and b
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * inter / (na + nb)


def brute_surface_voxels(mask: np.ndarray) -> list[tuple[int, int, int]]:
    out = []
    dz, dy, dx = mask.shape
    for z in range(dz):
        for y in range(dy):
            for x in range(dx):
                if not mask[z, y, x]:
                    continue
                boundary = False
                for az, ay, ax in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nz, ny, nx_ = z + az, y + ay, x + ax
                    if not (0 <= nz < dz and 0 <= ny < dy and 0 <= nx_ < dx):
                        boundary = True  # volume border counts as outside
                        break
                    if not mask[nz, ny, nx_]:
                        boundary = True
                        break
                if boundary:
                    out.append((z, y, x))
    return out


def brute_nsd(pred: np.ndarray, gt: np.ndarray, class_id: int, spacing, tolerance: float) -> float:
    a = pred == class_id
    b = gt == class_id
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    sa = brute_surface_voxels(a)
    sb = brute_surface_voxels(b)

    def min_dist(p, points):
        best = math.inf
        for q in points:
            dz = (p[0] - q[0]) * spacing[0]
            dy = (p[1] - q[1]) * spacing[1]
            dx = (p[2] - q[2]) * spacing[2]
            d = math.sqrt(dz * dz + dy * dy + dx * dx)
            if d < best:
                best = d
        return best

    hits = sum(1 for p in sa if min_dist(p, sb) <= tolerance)
    hits += sum(1 for q in sb if min_dist(q, sa) <= tolerance)
    return hits / (len(sa) + len(sb))


def nearest_rank_percentile(values, q_num: int, q_den: int) -> float:
    """ceil(q*N)-th smallest value, 1-based."""
    s = sorted(float(v) for v in values)
    n = len(s)
    idx = max(1, -(-n * q_num // q_den))
    return s[idx - 1]


def gaussian_weight_at(offset, patch_size, sigma_fraction=8.0, min_fraction=1e-3) -> float:
    """Scalar reimplementation of the tile importance weight."""
    w = 1.0
    peak = 1.0
    for o, p in zip(offset, patch_size):
        c = (p - 1) / 2.0
        sigma = max(p / sigma_fraction, 1e-8)
        w *= math.exp(-0.5 * ((o - c) / sigma) ** 2)
    # peak of the separable gaussian is at the (possibly fractional) center
    peak_per_axis = []
    for p in patch_size:
        c = (p - 1) / 2.0
        sigma = max(p / sigma_fraction, 1e-8)
        vals = [math.exp(-0.5 * ((i - c) / sigma) ** 2) for i in range(p)]
        peak_per_axis.append(max(vals))
    peak = math.prod(peak_per_axis)
    return max(w, peak * min_fraction)


def central_difference(f, x0: float, h: float) -> float:
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


def rel_error(a: float, b: float, floor: float = 1.0) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
