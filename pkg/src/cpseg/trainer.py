"""Dual-network semi-supervised training loop.

Two sibling networks with distinct initializations forward the same
labeled+unlabeled batch; each treats the other's hard prediction as a
constant target. Each network has its own SGD optimizer (nesterov
momentum, classic L2 weight decay folded into the gradient). The
cross-supervision weight ramps linearly over epochs; the learning rate
halves after a patience window without epoch-mean improvement.

The "baseline" mode trains a single network on the supervised half of the
objective while consuming the identical data stream, so a zero-weight
dual run is bit-for-bit comparable against it.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import DatasetManifest, read_volume
from .errors import EmptyLabeledSet, NonFiniteLoss, ResumeMismatch
from .fingerprint import Fingerprint
from .losses import LambdaSchedule, LossReport, cps_loss, sup_loss, total_loss
from .network import SegmentationNet, architecture_from_plan, build_network
from .planner import Plan
from .preprocess import (
    AugmentConfig,
    ORDER_LINEAR,
    ORDER_NEAREST,
    Patch,
    augment,
    normalize,
    resample,
    sample_patch,
)

MODE_CPS = "cps"
MODE_BASELINE = "baseline"

LOG_COLUMNS = ("epoch", "step", "l_sup", "l_cps_l", "l_cps_u", "lambda", "total", "lr")


@dataclass
class TrainConfig:
    total_epochs: int = 40
    iterations_per_epoch: int = 25
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    lr0: float = 0.01
    weight_decay: float = 3e-5
    momentum: float = 0.99
    nesterov: bool = True
    seed: int = 0
    lambda_max: float = 0.5
    ramp_end_epoch: int = 0  # 0 means total_epochs // 2
    plateau_patience: int = 25
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-3
    min_lr: float = 1e-6
    workers: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def lambda_schedule(self) -> LambdaSchedule:
        ramp = self.ramp_end_epoch if self.ramp_end_epoch > 0 else max(1, self.total_epochs // 2)
        return LambdaSchedule(lambda_max=self.lambda_max, ramp_end_epoch=ramp)


@dataclass
class _Case:
    case_id: str
    image: np.ndarray            # normalized, resampled to plan spacing
    labels: np.ndarray | None


def _net_seeds(seed: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return int(a.generate_state(1)[0]), int(b.generate_state(1)[0])


def load_training_cases(manifest: DatasetManifest, plan: Plan, fp: Fingerprint):
    """Read, resample to target spacing, and normalize every case up front."""
    labeled, unlabeled = [], []
    for img_path, lbl_path in manifest.labeled:
        img = normalize(resample(read_volume(img_path), plan.target_spacing, ORDER_LINEAR), fp)
        lbl = resample(read_volume(lbl_path), plan.target_spacing, ORDER_NEAREST)
        labeled.append(_Case(os.path.basename(img_path), img.values, lbl.values))
    for img_path in manifest.unlabeled:
        img = normalize(resample(read_volume(img_path), plan.target_spacing, ORDER_LINEAR), fp)
        unlabeled.append(_Case(os.path.basename(img_path), img.values, None))
    return labeled, unlabeled


class PatchSampler:
    """Uniform-with-replacement case sampling + patch extraction + augmentation.

    Worker w draws from its own generator seeded global_seed + w; iteration i
    is served by worker i % workers, so a fixed worker count is reproducible.
    """

    def __init__(self, labeled, unlabeled, patch_size, aug: AugmentConfig, seed: int, workers: int = 1):
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.patch_size = tuple(patch_size)
        self.aug = aug
        self.workers = max(1, workers)
        self.rngs = [np.random.default_rng(seed + w) for w in range(self.workers)]
        self.counter = 0

    def _draw(self, rng, cases, n, with_labels: bool) -> list[Patch]:
        out = []
        for _ in range(n):
            case = cases[int(rng.integers(len(cases)))]
            img_vol = _as_volume(case.image)
            lbl_vol = _as_volume(case.labels) if (with_labels and case.labels is not None) else None
            p = sample_patch(
                img_vol, lbl_vol, self.patch_size, rng,
                oversample_foreground=self.aug.oversample_foreground if with_labels else 0.0,
                case_id=case.case_id,
            )
            out.append(augment(p, rng, self.aug))
        return out

    def next_batches(self, batch_labeled: int, batch_unlabeled: int):
        rng = self.rngs[self.counter % self.workers]
        self.counter += 1
        labeled = self._draw(rng, self.labeled, batch_labeled, with_labels=True)
        unlabeled = (
            self._draw(rng, self.unlabeled, batch_unlabeled, with_labels=False)
            if self.unlabeled and batch_unlabeled > 0
            else []
        )
        return labeled, unlabeled

    def state(self) -> dict:
        return {
            "counter": self.counter,
            "rng_states": [r.bit_generator.state for r in self.rngs],
        }

    def restore(self, state: dict) -> None:
        self.counter = state["counter"]
        for r, s in zip(self.rngs, state["rng_states"]):
            r.bit_generator.state = s


def _as_volume(values):
    # sample_patch only touches .values; wrap arrays without copying.
    from .data import KIND_IMAGE, KIND_LABELS, Volume

    kind = KIND_LABELS if values.dtype == np.uint8 else KIND_IMAGE
    return Volume(values, (1.0, 1.0, 1.0), kind)


class DualNetState:
    """Everything a training run mutates: networks, optimizers, schedules."""

    def __init__(self, plan: Plan, config: TrainConfig, mode: str):
        if mode not in (MODE_CPS, MODE_BASELINE):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.arch = architecture_from_plan(plan)
        seed1, seed2 = _net_seeds(config.seed)
        self.net1 = build_network(self.arch, seed1)
        self.net2 = build_network(self.arch, seed2) if mode == MODE_CPS else None
        self.opt1 = self._make_opt(self.net1, config)
        self.opt2 = self._make_opt(self.net2, config) if self.net2 is not None else None
        self.epoch = 0
        self.lr = config.lr0
        self.plateau_best = float("inf")
        self.plateau_since = 0
        self.best_ckpt_loss = float("inf")

    @staticmethod
    def _make_opt(net: SegmentationNet, config: TrainConfig):
        return torch.optim.SGD(
            net.parameters(),
            lr=config.lr0,
            momentum=config.momentum,
            nesterov=config.nesterov,
            weight_decay=config.weight_decay,
        )

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for opt in (self.opt1, self.opt2):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr


def _to_tensors(labeled: list[Patch], unlabeled: list[Patch]):
    imgs = [p.image for p in labeled] + [p.image for p in unlabeled]
    x = torch.from_numpy(np.stack(imgs)[:, None]).float()
    gt = torch.from_numpy(np.stack([p.labels for p in labeled]).astype(np.int64))
    return x, gt


def train_step(
    state: DualNetState,
    labeled: list[Patch],
    unlabeled: list[Patch],
    config: TrainConfig,
) -> LossReport:
    x, gt = _to_tensors(labeled, unlabeled)
    n_l = len(labeled)
    lfac = [state.arch.cum_strides(i) for i in range(state.arch.ds_outputs)]
    sched = config.lambda_schedule()
    lam = sched.value(state.epoch)

    state.opt1.zero_grad(set_to_none=True)
    out1 = state.net1(x)
    out1_l = [o[:n_l] for o in out1]

    if state.mode == MODE_BASELINE:
        sup = sup_loss(out1_l, None, gt, lfac)
        loss = sup
        cps_l_val = 0.0
        cps_u_val = 0.0
    else:
        state.opt2.zero_grad(set_to_none=True)
        out2 = state.net2(x)
        out2_l = [o[:n_l] for o in out2]
        sup = sup_loss(out1_l, out2_l, gt, lfac)
        if lam > 0.0:
            cps_l = cps_loss(out1_l, out2_l, lfac)
            if len(unlabeled) > 0:
                out1_u = [o[n_l:] for o in out1]
                out2_u = [o[n_l:] for o in out2]
                cps_u = cps_loss(out1_u, out2_u, lfac)
            else:
                cps_u = torch.zeros(())
            loss = sup + lam * (cps_l + cps_u)
            cps_l_val = cps_l.item()
            cps_u_val = cps_u.item()
        else:
            # Keep the graph free of cross terms so the theta1 update is
            # bit-identical to a supervised-only step.
            loss = sup
            with torch.no_grad():
                cps_l_val = cps_loss(out1_l, out2_l, lfac).item()
                cps_u_val = (
                    cps_loss([o[n_l:] for o in out1], [o[n_l:] for o in out2], lfac).item()
                    if len(unlabeled) > 0
                    else 0.0
                )

    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()} at epoch {state.epoch}")

    loss.backward()
    state.opt1.step()
    if state.opt2 is not None:
        state.opt2.step()

    return total_loss(sup.item(), cps_l_val, cps_u_val, state.epoch, sched)


def _checkpoint_blob(state: DualNetState, sampler: PatchSampler, plan: Plan, fp: Fingerprint, config: TrainConfig) -> dict:
    return {
        "mode": state.mode,
        "arch": state.arch.fingerprint(),
        "plan": asdict(plan),
        "fingerprint": asdict(fp),
        "config": asdict(config),
        "epoch": state.epoch,
        "lr": state.lr,
        "plateau_best": state.plateau_best,
        "plateau_since": state.plateau_since,
        "best_ckpt_loss": state.best_ckpt_loss,
        "net1": state.net1.state_dict(),
        "opt1": state.opt1.state_dict(),
        "net2": state.net2.state_dict() if state.net2 is not None else None,
        "opt2": state.opt2.state_dict() if state.opt2 is not None else None,
        "sampler": sampler.state(),
    }


def save_checkpoint(path, state: DualNetState, sampler: PatchSampler, plan: Plan, fp: Fingerprint, config: TrainConfig) -> None:
    torch.save(_checkpoint_blob(state, sampler, plan, fp, config), path)


def load_checkpoint(path) -> dict:
    return torch.load(path, weights_only=False)


def load_inference_bundle(path) -> tuple[SegmentationNet, Plan, Fingerprint]:
    """Rebuild the serving network (theta1) plus plan and fingerprint."""
    blob = load_checkpoint(path)
    plan = Plan(**blob["plan"])
    fp = Fingerprint(**blob["fingerprint"])
    arch = architecture_from_plan(plan)
    if blob["arch"] != arch.fingerprint():
        raise ResumeMismatch(
            f"checkpoint architecture {blob['arch']!r} does not match its own plan"
        )
    net = SegmentationNet(arch)
    net.load_state_dict(blob["net1"])
    net.eval()
    return net, plan, fp


def restore_run(blob: dict, plan: Plan, config: TrainConfig, sampler: PatchSampler) -> DualNetState:
    state = DualNetState(plan, config, blob["mode"])
    if blob["arch"] != state.arch.fingerprint():
        raise ResumeMismatch(
            f"checkpoint architecture {blob['arch']!r} does not match plan {state.arch.fingerprint()!r}"
        )
    state.net1.load_state_dict(blob["net1"])
    state.opt1.load_state_dict(blob["opt1"])
    if state.net2 is not None:
        if blob["net2"] is None:
            raise ResumeMismatch("checkpoint has no second network but mode is cps")
        state.net2.load_state_dict(blob["net2"])
        state.opt2.load_state_dict(blob["opt2"])
    state.epoch = blob["epoch"]
    state.set_lr(blob["lr"])
    state.plateau_best = blob["plateau_best"]
    state.plateau_since = blob["plateau_since"]
    state.best_ckpt_loss = blob["best_ckpt_loss"]
    sampler.restore(blob["sampler"])
    return state


def _update_plateau(state: DualNetState, epoch_mean: float, config: TrainConfig) -> None:
    if epoch_mean < state.plateau_best - config.plateau_threshold:
        state.plateau_best = epoch_mean
        state.plateau_since = 0
    else:
        state.plateau_since += 1
    if state.plateau_since >= config.plateau_patience:
        state.set_lr(max(config.min_lr, state.lr * config.plateau_factor))
        state.plateau_since = 0


def run_training(
    manifest: DatasetManifest,
    plan: Plan,
    fp: Fingerprint,
    config: TrainConfig,
    out_dir,
    mode: str = MODE_CPS,
    resume_from=None,
    step_callback=None,
) -> str:
    """Train to completion; returns the path of the latest checkpoint.

    Writes ``train_log.csv`` (one row per step), ``latest.ckpt`` and
    ``best.ckpt`` (lowest epoch-mean total) under ``out_dir``.
    """
    if not manifest.labeled:
        raise EmptyLabeledSet("training requires at least one labeled case")
    os.makedirs(out_dir, exist_ok=True)

    labeled, unlabeled = load_training_cases(manifest, plan, fp)
    sampler = PatchSampler(
        labeled, unlabeled, plan.patch_size, config.augment, config.seed, config.workers
    )
    if resume_from is not None:
        state = restore_run(load_checkpoint(resume_from), plan, config, sampler)
    else:
        state = DualNetState(plan, config, mode)

    log_path = os.path.join(out_dir, "train_log.csv")
    latest = os.path.join(out_dir, "latest.ckpt")
    best = os.path.join(out_dir, "best.ckpt")
    resuming = resume_from is not None and os.path.exists(log_path)
    write_header = not resuming

    with open(log_path, "a" if resuming else "w", newline="", encoding="utf-8") as logf:
        writer = csv.writer(logf)
        if write_header:
            writer.writerow(LOG_COLUMNS)
        while state.epoch < config.total_epochs:
            totals = []
            for step in range(config.iterations_per_epoch):
                lb, ub = sampler.next_batches(config.batch_labeled, config.batch_unlabeled)
                try:
                    report = train_step(state, lb, ub, config)
                except NonFiniteLoss as e:
                    last_good = latest if os.path.exists(latest) else "none"
                    raise NonFiniteLoss(f"{e}; last good checkpoint: {last_good}") from e
                totals.append(report.total)
                writer.writerow([
                    state.epoch, step,
                    repr(report.l_sup), repr(report.l_cps_labeled), repr(report.l_cps_unlabeled),
                    repr(report.lam), repr(report.total), repr(state.lr),
                ])
                if step_callback is not None:
                    step_callback(state.epoch, step, report)
            epoch_mean = float(np.mean(totals))
            _update_plateau(state, epoch_mean, config)
            state.epoch += 1
            save_checkpoint(latest, state, sampler, plan, fp, config)
            if epoch_mean < state.best_ckpt_loss:
                state.best_ckpt_loss = epoch_mean
                save_checkpoint(best, state, sampler, plan, fp, config)
    return latest


def supervised_baseline(manifest, plan, fp, config, out_dir, resume_from=None) -> str:
    """Single-network ablation: supervised loss only, same data stream."""
    return run_training(manifest, plan, fp, config, out_dir, mode=MODE_BASELINE, resume_from=resume_from)
