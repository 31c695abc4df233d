"""Heuristic experiment planning: patch geometry, pooling schedule, channels.

The downsampling rule halves every axis that is still >= 8 voxels, one
network level per round, and stops once all axes are below 8. Patch sizes
are restricted to m * 2^h with m in 4..7 so that every halving lands on an
integer and the bottleneck stays in [4, 7]. The enforced-spacing rule for
resource-constrained inference keys on the slice count S of the raw scan.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InfeasiblePlan, IoFailure, MalformedHeader
from .fingerprint import Fingerprint

DIM_2D = "2D"
DIM_3D = "3D"

HALVE_THRESHOLD = 8  # halve an axis while it is at least this large


@dataclass
class Plan:
    dimensionality: str
    target_spacing: tuple[float, float, float]
    patch_size: tuple[int, int, int]
    pool_schedule: tuple[tuple[int, int, int], ...]  # per-level (z,y,x) strides, level 0 first
    base_channels: int
    max_channels: int
    batch_labeled: int
    batch_unlabeled: int
    num_classes: int

    @property
    def levels(self) -> int:
        return len(self.pool_schedule)

    def bottleneck(self) -> tuple[int, int, int]:
        dims = list(self.patch_size)
        for strides in self.pool_schedule:
            dims = [d // s for d, s in zip(dims, strides)]
        return tuple(dims)


@dataclass
class PlanConstraints:
    max_patch_voxels: int = 4096
    base_channels: int = 8
    max_channels: int = 64
    batch_size: int = 2


@dataclass
class SpacingRule:
    """Manual spacing override for long scans, keyed on slice count S."""

    s_default: tuple[float, float, float] = (0.75, 0.75, 0.5)  # (x, y, z) mm
    s_low: int = 150
    s_high: int = 600
    z_floor: float = 0.8


def pool_schedule_for(patch_size) -> tuple[tuple[int, int, int], ...]:
    """Simulate the halving rule on a patch; returns per-level strides.

    Level 0 never downsamples. Raises InfeasiblePlan when a halving would
    not land on an integer (the patch is not network-friendly).
    """
    dims = [int(d) for d in patch_size]
    if any(d < 1 for d in dims):
        raise InfeasiblePlan(f"patch {patch_size} has non-positive axis")
    schedule = [(1, 1, 1)]
    while any(d >= HALVE_THRESHOLD for d in dims):
        strides = tuple(2 if d >= HALVE_THRESHOLD else 1 for d in dims)
        for d, s in zip(dims, strides):
            if s == 2 and d % 2 != 0:
                raise InfeasiblePlan(f"axis of size {d} in patch {patch_size} is not halvable")
        dims = [d // s for d, s in zip(dims, strides)]
        schedule.append(strides)
    return tuple(schedule)


def _friendly_sizes(limit: int) -> list[int]:
    # All m * 2^h with m in 4..7: repeated halving of these always lands on
    # integers and bottoms out in [4, 7].
    out = set()
    for m in (4, 5, 6, 7):
        s = m
        while s <= limit:
            out.add(s)
            s *= 2
    return sorted(out)


def make_plan(
    fingerprint: Fingerprint,
    dimensionality: str,
    constraints: PlanConstraints | None = None,
    num_classes: int = 2,
) -> Plan:
    """Derive the Plan from the fingerprint under a patch voxel budget."""
    constraints = constraints or PlanConstraints()
    budget = constraints.max_patch_voxels
    if dimensionality not in (DIM_2D, DIM_3D):
        raise InfeasiblePlan(f"unknown dimensionality {dimensionality!r}")

    if dimensionality == DIM_3D:
        candidates = [e for e in _friendly_sizes(budget) if e ** 3 <= budget]
        if not candidates:
            raise InfeasiblePlan(f"no 3D patch fits budget {budget}")
        e = candidates[-1]
        patch = (e, e, e)
    else:
        candidates = [e for e in _friendly_sizes(budget) if e ** 2 <= budget]
        if not candidates:
            raise InfeasiblePlan(f"no 2D patch fits budget {budget}")
        e = candidates[-1]
        patch = (1, e, e)

    return Plan(
        dimensionality=dimensionality,
        target_spacing=fingerprint.median_spacing,
        patch_size=patch,
        pool_schedule=pool_schedule_for(patch),
        base_channels=constraints.base_channels,
        max_channels=constraints.max_channels,
        batch_labeled=constraints.batch_size,
        batch_unlabeled=constraints.batch_size,
        num_classes=num_classes,
    )


def enforced_spacing(num_slices: int, original_spacing, rule: SpacingRule | None = None):
    """Spacing override for inference; total over all slice counts.

    S < s_low keeps the native z spacing; s_low <= S <= s_high uses the
    defaults outright; S > s_high stretches the native z spacing by
    max(z_floor, s_high / S) so very long scans resample near-native.
    Returns (z, y, x) spacing in mm.
    """
    rule = rule or SpacingRule()
    sx, sy, sz_default = rule.s_default
    oz = float(original_spacing[0])
    s = int(num_slices)
    if s < rule.s_low:
        return (oz, sy, sx)
    if s <= rule.s_high:
        return (sz_default, sy, sx)
    factor = max(rule.z_floor, rule.s_high / s)
    return (factor * oz, sy, sx)


# --- plan file ---
# plan.txt also embeds the fingerprint so downstream stages (train, infer)
# need only the plan file and the checkpoint.

def save_plan(plan: Plan, fingerprint: Fingerprint, path) -> None:
    lines = [
        f"dimensionality={plan.dimensionality}",
        f"target_spacing={plan.target_spacing[0]!r},{plan.target_spacing[1]!r},{plan.target_spacing[2]!r}",
        f"patch_size={plan.patch_size[0]},{plan.patch_size[1]},{plan.patch_size[2]}",
        "pool_schedule=" + ";".join(f"{s[0]},{s[1]},{s[2]}" for s in plan.pool_schedule),
        f"base_channels={plan.base_channels}",
        f"max_channels={plan.max_channels}",
        f"batch_labeled={plan.batch_labeled}",
        f"batch_unlabeled={plan.batch_unlabeled}",
        f"num_classes={plan.num_classes}",
        f"fp_mean={fingerprint.mean!r}",
        f"fp_std={fingerprint.std!r}",
        f"fp_p_low={fingerprint.p_low!r}",
        f"fp_p_high={fingerprint.p_high!r}",
        f"fp_spacing={fingerprint.median_spacing[0]!r},{fingerprint.median_spacing[1]!r},{fingerprint.median_spacing[2]!r}",
        f"fp_num_cases={fingerprint.num_cases}",
        f"fp_num_voxels={fingerprint.num_voxels}",
    ]
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_plan(path) -> tuple[Plan, Fingerprint]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.strip() for ln in f if ln.strip()]
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    kv = {}
    for ln in lines:
        k, _, v = ln.partition("=")
        kv[k.strip()] = v.strip()

    def triple(key, cast):
        parts = kv[key].split(",")
        return tuple(cast(p) for p in parts)

    try:
        plan = Plan(
            dimensionality=kv["dimensionality"],
            target_spacing=triple("target_spacing", float),
            patch_size=triple("patch_size", int),
            pool_schedule=tuple(
                tuple(int(x) for x in part.split(","))
                for part in kv["pool_schedule"].split(";")
            ),
            base_channels=int(kv["base_channels"]),
            max_channels=int(kv["max_channels"]),
            batch_labeled=int(kv["batch_labeled"]),
            batch_unlabeled=int(kv["batch_unlabeled"]),
            num_classes=int(kv["num_classes"]),
        )
        fp = Fingerprint(
            mean=float(kv["fp_mean"]),
            std=float(kv["fp_std"]),
            p_low=float(kv["fp_p_low"]),
            p_high=float(kv["fp_p_high"]),
            median_spacing=triple("fp_spacing", float),
            num_cases=int(kv["fp_num_cases"]),
            num_voxels=int(kv["fp_num_voxels"]),
        )
    except KeyError as e:
        raise MalformedHeader(f"{path}: plan file missing key {e}") from e
    return plan, fp
