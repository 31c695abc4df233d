import csv
import os

import pytest
import torch

import cpseg.network
from cpseg.data import load_manifest
from cpseg.errors import ResumeMismatch
from cpseg.fingerprint import compute_fingerprint
from cpseg.planner import DIM_3D, PlanConstraints, make_plan
from cpseg.synthdata import PhantomConfig, generate_dataset
from cpseg.trainer import (
    MODE_BASELINE,
    MODE_CPS,
    DualNetState,
    PatchSampler,
    TrainConfig,
    load_checkpoint,
    load_inference_bundle,
    load_training_cases,
    run_training,
    train_step,
)


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer_data")
    phantom = PhantomConfig(dims=(16, 16, 16), num_organs=2, radius_frac=(0.15, 0.25))
    manifest_path = generate_dataset(2, 2, phantom, seed=40, out_dir=root)
    manifest = load_manifest(manifest_path)
    from cpseg.data import read_volume

    images = [read_volume(p) for p, _ in manifest.labeled]
    images += [read_volume(p) for p in manifest.unlabeled]
    fp = compute_fingerprint(images)
    plan = make_plan(
        fp, DIM_3D,
        PlanConstraints(max_patch_voxels=512, base_channels=2, max_channels=8),
        num_classes=phantom.num_classes,
    )
    return manifest, plan, fp


def _config(**kw):
    base = dict(total_epochs=2, iterations_per_epoch=3, batch_labeled=2, batch_unlabeled=2, seed=77)
    base.update(kw)
    return TrainConfig(**base)


def _read_log(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_training_produces_checkpoints_and_log(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    out = tmp_path / "run"
    ckpt = run_training(manifest, plan, fp, _config(), out, mode=MODE_CPS)
    assert os.path.exists(ckpt)
    assert os.path.exists(out / "best.ckpt")
    rows = _read_log(out / "train_log.csv")
    assert len(rows) == 2 * 3
    blob = load_checkpoint(ckpt)
    assert blob["mode"] == MODE_CPS
    # the two sibling parameter sets must differ
    diff = any(
        not torch.equal(a, b)
        for a, b in zip(blob["net1"].values(), blob["net2"].values())
    )
    assert diff


def test_training_is_deterministic(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    ckpt_a = run_training(manifest, plan, fp, _config(), tmp_path / "a", mode=MODE_CPS)
    ckpt_b = run_training(manifest, plan, fp, _config(), tmp_path / "b", mode=MODE_CPS)
    log_a = (tmp_path / "a" / "train_log.csv").read_text()
    log_b = (tmp_path / "b" / "train_log.csv").read_text()
    assert log_a == log_b
    a, b = load_checkpoint(ckpt_a), load_checkpoint(ckpt_b)
    assert all(torch.equal(x, y) for x, y in zip(a["net1"].values(), b["net1"].values()))


def test_resume_matches_uninterrupted(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    full_cfg = _config(total_epochs=2)
    run_training(manifest, plan, fp, full_cfg, tmp_path / "full", mode=MODE_CPS)

    half_cfg = _config(total_epochs=1)
    mid = run_training(manifest, plan, fp, half_cfg, tmp_path / "split", mode=MODE_CPS)
    run_training(manifest, plan, fp, full_cfg, tmp_path / "split", mode=MODE_CPS, resume_from=mid)

    rows_full = _read_log(tmp_path / "full" / "train_log.csv")
    rows_split = _read_log(tmp_path / "split" / "train_log.csv")
    assert len(rows_full) == len(rows_split)
    first_resumed = 1 * 3  # first step of epoch 1
    for key in ("l_sup", "l_cps_l", "l_cps_u", "total"):
        a = float(rows_full[first_resumed][key])
        b = float(rows_split[first_resumed][key])
        assert abs(a - b) <= 1e-12
    # and in fact the whole tail matches
    assert rows_full == rows_split


def test_lambda_zero_matches_baseline_trajectory(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    cfg_dual = _config(lambda_max=0.0, total_epochs=1, iterations_per_epoch=4)
    cfg_base = _config(lambda_max=0.0, total_epochs=1, iterations_per_epoch=4)
    ck_dual = run_training(manifest, plan, fp, cfg_dual, tmp_path / "dual", mode=MODE_CPS)
    ck_base = run_training(manifest, plan, fp, cfg_base, tmp_path / "base", mode=MODE_BASELINE)
    dual = load_checkpoint(ck_dual)
    base = load_checkpoint(ck_base)
    for (ka, va), (kb, vb) in zip(dual["net1"].items(), base["net1"].items()):
        assert ka == kb
        assert torch.equal(va, vb), f"theta1 diverged at {ka}"


def test_zero_learning_rate_freezes_parameters(tiny_setup):
    manifest, plan, fp = tiny_setup
    cfg = _config(lr0=0.0, weight_decay=0.0)
    labeled, unlabeled = load_training_cases(manifest, plan, fp)
    sampler = PatchSampler(labeled, unlabeled, plan.patch_size, cfg.augment, cfg.seed)
    state = DualNetState(plan, cfg, MODE_CPS)
    before = [p.clone() for p in state.net1.parameters()]
    lb, ub = sampler.next_batches(2, 2)
    report = train_step(state, lb, ub, cfg)
    assert report.total > 0
    assert all(torch.equal(a, b) for a, b in zip(before, state.net1.parameters()))


def test_empty_unlabeled_set_degenerates_gracefully(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    from cpseg.data import DatasetManifest

    labeled_only = DatasetManifest(
        labeled=manifest.labeled, unlabeled=[], num_classes=manifest.num_classes
    )
    cfg = _config(total_epochs=1, lambda_max=0.5, ramp_end_epoch=1)
    out = tmp_path / "lab_only"
    run_training(labeled_only, plan, fp, cfg, out, mode=MODE_CPS)
    rows = _read_log(out / "train_log.csv")
    assert all(float(r["l_cps_u"]) == 0.0 for r in rows)


def test_resume_architecture_mismatch(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    ckpt = run_training(manifest, plan, fp, _config(total_epochs=1), tmp_path / "r", mode=MODE_CPS)
    other_plan = make_plan(
        fp, DIM_3D, PlanConstraints(max_patch_voxels=512, base_channels=4, max_channels=8),
        num_classes=manifest.num_classes,
    )
    with pytest.raises(ResumeMismatch):
        run_training(manifest, other_plan, fp, _config(), tmp_path / "r2",
                     mode=MODE_CPS, resume_from=ckpt)


def test_lr_non_increasing_and_plateau_floor(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    # huge threshold: every epoch counts as no-improvement, patience 1 halves each epoch
    cfg = _config(total_epochs=6, iterations_per_epoch=1,
                  plateau_patience=1, plateau_threshold=1e9, min_lr=0.004)
    out = tmp_path / "plateau"
    run_training(manifest, plan, fp, cfg, out, mode=MODE_CPS)
    lrs = [float(r["lr"]) for r in _read_log(out / "train_log.csv")]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == 0.01
    assert min(lrs) == 0.004  # floored, not halved below min_lr
    lams = [float(r["lambda"]) for r in _read_log(out / "train_log.csv")]
    assert all(b >= a for a, b in zip(lams, lams[1:]))


def test_baseline_uses_half_the_forward_passes(tiny_setup, tmp_path, monkeypatch):
    manifest, plan, fp = tiny_setup
    counter = {"n": 0}
    orig = cpseg.network.SegmentationNet.forward

    def counting(self, x):
        counter["n"] += 1
        return orig(self, x)

    monkeypatch.setattr(cpseg.network.SegmentationNet, "forward", counting)
    cfg = _config(total_epochs=1, iterations_per_epoch=2)
    run_training(manifest, plan, fp, cfg, tmp_path / "c", mode=MODE_CPS)
    cps_calls = counter["n"]
    counter["n"] = 0
    run_training(manifest, plan, fp, cfg, tmp_path / "d", mode=MODE_BASELINE)
    base_calls = counter["n"]
    assert cps_calls == 2 * base_calls


def test_rerun_into_same_dir_truncates_log(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    cfg = _config(total_epochs=1, iterations_per_epoch=2)
    out = tmp_path / "again"
    run_training(manifest, plan, fp, cfg, out, mode=MODE_BASELINE)
    run_training(manifest, plan, fp, cfg, out, mode=MODE_BASELINE)
    assert len(_read_log(out / "train_log.csv")) == 2


def test_checkpoint_config_echo_metadata(tiny_setup, tmp_path):
    manifest, plan, fp = tiny_setup
    ckpt = run_training(manifest, plan, fp, _config(total_epochs=1), tmp_path / "m", mode=MODE_BASELINE)
    blob = load_checkpoint(ckpt)
    assert blob["mode"] == MODE_BASELINE
    assert blob["net2"] is None
    assert blob["config"]["seed"] == 77
    net, plan2, fp2 = load_inference_bundle(ckpt)
    assert plan2 == plan
    assert fp2 == fp
    x = torch.zeros((1, 1) + plan.patch_size)
    assert len(net(x)) >= 1
