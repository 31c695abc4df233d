"""Command-line entry point: synth, fingerprint, plan, train, infer, evaluate.

Exit codes: 0 success, 1 usage error, 2 runtime error (one line on stderr,
prefixed with the stable error class name). Every subcommand echoes its
fully resolved configuration into the output directory, so runs are
self-describing.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as cfgmod
from . import metrics, reporting
from .data import load_manifest, read_volume, write_volume
from .errors import CpsegError
from .fingerprint import compute_fingerprint, load_fingerprint, save_fingerprint
from .inference import STEP_FRACTION, InferenceMode, predict_case
from .planner import DIM_2D, DIM_3D, load_plan, make_plan, save_plan
from .synthdata import generate_dataset
from .trainer import (
    MODE_BASELINE,
    MODE_CPS,
    load_inference_bundle,
    run_training,
)

log = logging.getLogger("cpseg")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="flat section.key = value config file")
    p.add_argument("--workers", type=int, default=None, help="worker count (1 = bit-deterministic)")
    p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])


def build_parser() -> _Parser:
    p = _Parser(prog="cpseg", description="semi-supervised volumetric segmentation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a phantom dataset")
    s.add_argument("--labeled", type=int, default=None)
    s.add_argument("--unlabeled", type=int, default=None)
    s.add_argument("--dims", type=int, default=None, help="cubic phantom edge length")
    s.add_argument("--classes", type=int, default=None, help="foreground organs + 1")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    _add_common(s)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("fingerprint", help="pooled global intensity statistics")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-voxels-per-case", type=int, default=None,
                   help="subsample cap per case (default: exact statistics)")
    _add_common(s)
    s.set_defaults(func=_cmd_fingerprint)

    s = sub.add_parser("plan", help="derive training configuration from a fingerprint")
    s.add_argument("--fingerprint", required=True)
    s.add_argument("--manifest", required=True, help="provides the class count")
    s.add_argument("--dim", default=DIM_3D, choices=[DIM_2D, DIM_3D])
    s.add_argument("--max-patch-voxels", type=int, default=None)
    s.add_argument("--base-channels", type=int, default=None)
    s.add_argument("--out", required=True)
    _add_common(s)
    s.set_defaults(func=_cmd_plan)

    s = sub.add_parser("train", help="train dual-network or supervised baseline")
    s.add_argument("--manifest", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--mode", default=MODE_CPS, choices=[MODE_CPS, MODE_BASELINE])
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    _add_common(s)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("infer", help="predict a full case")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--mode", default="normal", choices=["normal", "fast"])
    s.add_argument("--force-spacing", action="store_true",
                   help="apply the enforced-spacing rule before preprocessing")
    s.add_argument("--postprocess-cc", action="store_true",
                   help="keep only the largest component per class")
    _add_common(s)
    s.set_defaults(func=_cmd_infer)

    s = sub.add_parser("evaluate", help="DSC/NSD scores for a prediction directory")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--tolerance", type=float, default=None)
    s.add_argument("--out", required=True, help="scores CSV path")
    s.add_argument("--no-figures", action="store_true")
    _add_common(s)
    s.set_defaults(func=_cmd_evaluate)

    return p


def _load_cfg(args) -> dict[str, str]:
    return cfgmod.load_config(args.config) if args.config else {}


def _outdir_of(path) -> str:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


def _cmd_synth(args, argv) -> None:
    cfg = _load_cfg(args)
    dims = (args.dims,) * 3 if args.dims else None
    organs = args.classes - 1 if args.classes else None
    pc = cfgmod.phantom_config_from(cfg, dims=dims, num_organs=organs)
    seed = args.seed
    labeled = args.labeled if args.labeled is not None else cfgmod._get(cfg, "synth.labeled", 2)
    unlabeled = args.unlabeled if args.unlabeled is not None else cfgmod._get(cfg, "synth.unlabeled", 2)
    os.makedirs(args.out, exist_ok=True)
    manifest_path = generate_dataset(labeled, unlabeled, pc, seed, args.out)
    cfgmod.write_echo(
        os.path.join(args.out, "config_echo_synth.txt"),
        cfgmod.echo_phantom(pc, labeled, unlabeled, seed),
        argv,
    )
    print(manifest_path)


def _cmd_fingerprint(args, argv) -> None:
    cfg = _load_cfg(args)
    manifest = load_manifest(args.manifest, require_labeled=False)
    paths = [img for img, _ in manifest.labeled] + list(manifest.unlabeled)
    images = [read_volume(p) for p in paths]
    max_per_case = (
        args.max_voxels_per_case
        if args.max_voxels_per_case is not None
        else cfgmod._get(cfg, "fingerprint.max_voxels_per_case", 0)
    )
    fp = compute_fingerprint(images, max_voxels_per_case=max_per_case or None)
    out_dir = _outdir_of(args.out)
    save_fingerprint(fp, args.out)
    cfgmod.write_echo(
        os.path.join(out_dir, "config_echo_fingerprint.txt"),
        {"fingerprint.max_voxels_per_case": str(max_per_case)},
        argv,
    )
    print(f"cases={fp.num_cases} voxels={fp.num_voxels}")


def _cmd_plan(args, argv) -> None:
    cfg = _load_cfg(args)
    fp = load_fingerprint(args.fingerprint)
    manifest = load_manifest(args.manifest, require_labeled=False)
    constraints = cfgmod.plan_constraints_from(
        cfg, max_patch_voxels=args.max_patch_voxels, base_channels=args.base_channels
    )
    dim = args.dim or cfgmod._get(cfg, "plan.dimensionality", DIM_3D)
    plan = make_plan(fp, dim, constraints, num_classes=manifest.num_classes)
    out_dir = _outdir_of(args.out)
    save_plan(plan, fp, args.out)
    cfgmod.write_echo(
        os.path.join(out_dir, "config_echo_plan.txt"),
        cfgmod.echo_plan_constraints(constraints, dim),
        argv,
    )
    print(f"patch={plan.patch_size} levels={plan.levels} bottleneck={plan.bottleneck()}")


def _cmd_train(args, argv) -> None:
    cfg = _load_cfg(args)
    manifest = load_manifest(args.manifest)
    plan, fp = load_plan(args.plan)
    tc = cfgmod.train_config_from(
        cfg,
        seed=args.seed,
        total_epochs=args.epochs,
        iterations_per_epoch=args.iterations,
        workers=args.workers,
    )
    tc.batch_labeled = plan.batch_labeled
    tc.batch_unlabeled = plan.batch_unlabeled
    mode = args.mode or cfgmod._get(cfg, "train.mode", MODE_CPS)
    os.makedirs(args.out, exist_ok=True)
    cfgmod.write_echo(os.path.join(args.out, "config_echo.txt"), cfgmod.echo_train(tc, mode), argv)
    ckpt = run_training(manifest, plan, fp, tc, args.out, mode=mode, resume_from=args.resume)
    if not args.no_figures:
        reporting.save_training_curves(
            os.path.join(args.out, "train_log.csv"),
            os.path.join(args.out, "train_curves.png"),
        )
    print(ckpt)


def _cmd_infer(args, argv) -> None:
    cfg = _load_cfg(args)
    net, plan, fp = load_inference_bundle(args.checkpoint)
    raw = read_volume(args.input)
    mode_name = args.mode or cfgmod._get(cfg, "infer.mode", "normal")
    mode = InferenceMode(tta=(mode_name == "normal"))
    rule = cfgmod.spacing_rule_from(cfg) if args.force_spacing else None
    step_fraction = cfgmod._get(cfg, "infer.step_fraction", STEP_FRACTION)
    seg = predict_case(
        net, raw, plan, fp,
        mode=mode,
        force_spacing=rule,
        postprocess_cc=args.postprocess_cc,
        step_fraction=step_fraction,
    )
    out_dir = _outdir_of(args.output)
    write_volume(seg, args.output)
    echo = {
        "infer.mode": mode_name,
        "infer.force_spacing": str(bool(args.force_spacing)).lower(),
        "infer.postprocess_cc": str(bool(args.postprocess_cc)).lower(),
        "infer.step_fraction": repr(step_fraction),
    }
    if rule is not None:
        echo.update(cfgmod.echo_spacing(rule))
    cfgmod.write_echo(os.path.join(out_dir, "config_echo_infer.txt"), echo, argv)
    print(args.output)


def _cmd_evaluate(args, argv) -> None:
    cfg = _load_cfg(args)
    tolerance = args.tolerance if args.tolerance is not None else cfgmod._get(
        cfg, "evaluate.tolerance_mm", metrics.DEFAULT_TOLERANCE_MM
    )
    scores = metrics.evaluate(args.pred, args.gt, args.classes, tolerance, out_csv=None)
    out_dir = _outdir_of(args.out)
    metrics.write_scores_csv(scores, args.classes, args.out)
    if not args.no_figures:
        dsc_means, nsd_means = metrics.class_means(scores, args.classes)
        png = os.path.splitext(args.out)[0] + ".png"
        reporting.save_score_chart(dsc_means, nsd_means, png)
    cfgmod.write_echo(
        os.path.join(out_dir, "config_echo_evaluate.txt"),
        {"evaluate.num_classes": str(args.classes), "evaluate.tolerance_mm": repr(tolerance)},
        argv,
    )
    mean_dsc, mean_nsd = metrics.overall_means(scores)
    print(f"mDSC={mean_dsc:.4f} mNSD={mean_nsd:.4f}")


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()))
    try:
        args.func(args, list(argv))
    except CpsegError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
