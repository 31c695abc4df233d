"""Segmentation losses: dice+CE, pseudo-labels, cross supervision, schedule.

Soft dice averages over foreground classes only (background excluded) with
smoothing eps 1e-5, per batch element and then over the batch. Cross
entropy works on probabilities with a 1e-12 clamp before the log so that
confidently wrong predictions stay finite. Deep supervision weights are
2^-i over the heads, normalized to sum 1; coarser targets come from
strided subsampling of the finest-level map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidTarget, MissingGroundTruth, ShapeMismatch

DICE_EPS = 1e-5
LOG_CLAMP = 1e-12


def _check_pair(pred: torch.Tensor, target: torch.Tensor, what: str) -> None:
    if pred.ndim != target.ndim + 1 or pred.shape[0] != target.shape[0] or pred.shape[2:] != target.shape[1:]:
        raise ShapeMismatch(f"{what}: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if target.numel():
        lo, hi = int(target.min()), int(target.max())
        if lo < 0 or hi >= pred.shape[1]:
            raise InvalidTarget(f"{what}: target values [{lo},{hi}] outside [0,{pred.shape[1]})")


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - mean foreground dice. pred (B,C,...) probabilities, target (B,...) ints."""
    _check_pair(pred, target, "soft_dice_loss")
    b, c = pred.shape[:2]
    p = pred.reshape(b, c, -1)
    t = target.reshape(b, -1)
    dices = []
    for cls in range(1, c):
        tc = (t == cls).to(pred.dtype)
        pc = p[:, cls]
        inter = (pc * tc).sum(dim=1)
        denom = pc.sum(dim=1) + tc.sum(dim=1)
        dices.append((2.0 * inter + DICE_EPS) / (denom + DICE_EPS))
    dice = torch.stack(dices, dim=1).mean(dim=1)  # per batch element
    return (1.0 - dice).mean()


def cross_entropy_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over voxels of -log p_target on clamped probabilities."""
    _check_pair(pred, target, "cross_entropy_loss")
    p_target = torch.gather(pred, 1, target.unsqueeze(1).long()).clamp_min(LOG_CLAMP)
    return -(torch.log(p_target)).mean()


def dice_ce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return soft_dice_loss(pred, target) + cross_entropy_loss(pred, target)


def make_pseudo_label(conf: torch.Tensor) -> torch.Tensor:
    """Per-voxel argmax, ties to the lowest class index, no gradient flow.

    Accepts (C, z, y, x) or batched (B, C, z, y, x).
    """
    dim = 0 if conf.ndim == 4 else 1
    return torch.argmax(conf.detach(), dim=dim)


def ds_weights(n: int, dtype=torch.float64) -> torch.Tensor:
    w = torch.tensor([2.0 ** (-i) for i in range(n)], dtype=dtype)
    return w / w.sum()


def downsample_labels(target: torch.Tensor, factor) -> torch.Tensor:
    """Strided subsampling from index 0 per axis; target is (B, z, y, x)."""
    fz, fy, fx = factor
    return target[:, ::fz, ::fy, ::fx]


def ds_dice_ce(outs: list[torch.Tensor], target: torch.Tensor, level_factors) -> torch.Tensor:
    """Deep-supervision weighted dice+CE of all heads against one target map."""
    w = ds_weights(len(outs))
    total = None
    for i, out in enumerate(outs):
        t = downsample_labels(target, level_factors[i])
        term = float(w[i]) * dice_ce(out, t)
        total = term if total is None else total + term
    return total


def sup_loss(
    out1: list[torch.Tensor],
    out2: list[torch.Tensor] | None,
    gt: torch.Tensor,
    level_factors,
) -> torch.Tensor:
    """Deep-supervision weighted dice+CE of each network against ground truth.

    ``out2`` may be None for the single-network supervised baseline.
    ``level_factors[i]`` is the cumulative stride triple of head i.
    """
    if gt is None:
        raise MissingGroundTruth("supervised loss needs ground-truth labels")
    loss = ds_dice_ce(out1, gt, level_factors)
    if out2 is not None:
        loss = loss + ds_dice_ce(out2, gt, level_factors)
    return loss


def cps_loss(out1: list[torch.Tensor], out2: list[torch.Tensor], level_factors) -> torch.Tensor:
    """Each network learns the other's finest-level argmax as a constant target."""
    y1 = make_pseudo_label(out1[0])
    y2 = make_pseudo_label(out2[0])
    return ds_dice_ce(out1, y2, level_factors) + ds_dice_ce(out2, y1, level_factors)


@dataclass
class LambdaSchedule:
    """Cross-supervision weight: linear from 0 to lambda_max, then constant."""

    lambda_max: float = 0.5
    ramp_end_epoch: int = 20

    def value(self, epoch: int) -> float:
        if epoch <= 0:
            return 0.0
        return self.lambda_max * min(1.0, epoch / self.ramp_end_epoch)


@dataclass
class LossReport:
    l_sup: float
    l_cps_labeled: float
    l_cps_unlabeled: float
    lam: float
    total: float


def total_loss(
    sup: float, cps_l: float, cps_u: float, epoch: int, sched: LambdaSchedule
) -> LossReport:
    lam = sched.value(epoch)
    return LossReport(
        l_sup=float(sup),
        l_cps_labeled=float(cps_l),
        l_cps_unlabeled=float(cps_u),
        lam=lam,
        total=float(sup) + lam * (float(cps_l) + float(cps_u)),
    )
