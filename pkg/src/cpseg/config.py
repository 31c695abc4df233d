"""Flat experiment configuration: ``section.key = value`` text files.

One registry of known keys covers every tunable in the pipeline; unknown
keys are hard errors so typos cannot silently fall back to defaults.
Command-line flags override file values. parse -> emit -> parse is a
fixed point (emit canonicalizes ordering and spacing only).
"""

from __future__ import annotations

from .errors import ConfigError
from .planner import PlanConstraints, SpacingRule
from .preprocess import AugmentConfig
from .synthdata import PhantomConfig
from .trainer import TrainConfig

# key -> type tag, used for validation and typed access
KNOWN_KEYS: dict[str, str] = {
    "train.total_epochs": "int",
    "train.iterations_per_epoch": "int",
    "train.batch_labeled": "int",
    "train.batch_unlabeled": "int",
    "train.lr0": "float",
    "train.weight_decay": "float",
    "train.momentum": "float",
    "train.nesterov": "bool",
    "train.seed": "int",
    "train.mode": "str",
    "train.plateau_patience": "int",
    "train.plateau_factor": "float",
    "train.plateau_threshold": "float",
    "train.min_lr": "float",
    "train.workers": "int",
    "lambda.lambda_max": "float",
    "lambda.ramp_end_epoch": "int",
    "augment.mirror_prob": "float",
    "augment.scale_prob": "float",
    "augment.noise_prob": "float",
    "augment.scale_range": "pair",
    "augment.noise_sigma_max": "float",
    "augment.oversample_foreground": "float",
    "phantom.dims": "triple_int",
    "phantom.num_organs": "int",
    "phantom.background_intensity": "float",
    "phantom.intensity_step": "float",
    "phantom.intensity_jitter": "float",
    "phantom.noise_sigma": "float",
    "phantom.radius_frac": "pair",
    "phantom.spacing_jitter": "pair",
    "spacing.s_x": "float",
    "spacing.s_y": "float",
    "spacing.s_z": "float",
    "spacing.s_low": "int",
    "spacing.s_high": "int",
    "spacing.z_floor": "float",
    "plan.dimensionality": "str",
    "plan.max_patch_voxels": "int",
    "plan.base_channels": "int",
    "plan.max_channels": "int",
    "plan.batch_size": "int",
    "fingerprint.max_voxels_per_case": "int",
    "infer.step_fraction": "float",
    "infer.mode": "str",
    "infer.force_spacing": "bool",
    "infer.postprocess_cc": "bool",
    "evaluate.num_classes": "int",
    "evaluate.tolerance_mm": "float",
    "synth.labeled": "int",
    "synth.unlabeled": "int",
    "synth.seed": "int",
}


def parse_config(text: str) -> dict[str, str]:
    """Parse flat config text; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def emit_config(cfg: dict[str, str]) -> str:
    bad = [k for k in cfg if k not in KNOWN_KEYS]
    if bad:
        raise ConfigError(f"unknown keys {bad}")
    return "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg)) + "\n"


def _get(cfg: dict[str, str], key: str, default):
    if key not in cfg:
        return default
    kind = KNOWN_KEYS[key]
    raw = cfg[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "pair":
            a, b = (float(x) for x in raw.split(","))
            return (a, b)
        if kind == "triple_int":
            parts = [int(x) for x in raw.split(",")]
            if len(parts) == 1:
                return (parts[0],) * 3
            if len(parts) == 3:
                return tuple(parts)
            raise ValueError(raw)
        return raw
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def augment_config_from(cfg: dict[str, str]) -> AugmentConfig:
    d = AugmentConfig()
    return AugmentConfig(
        mirror_prob=_get(cfg, "augment.mirror_prob", d.mirror_prob),
        scale_prob=_get(cfg, "augment.scale_prob", d.scale_prob),
        noise_prob=_get(cfg, "augment.noise_prob", d.noise_prob),
        scale_range=_get(cfg, "augment.scale_range", d.scale_range),
        noise_sigma_max=_get(cfg, "augment.noise_sigma_max", d.noise_sigma_max),
        oversample_foreground=_get(cfg, "augment.oversample_foreground", d.oversample_foreground),
    )


def train_config_from(cfg: dict[str, str], **overrides) -> TrainConfig:
    d = TrainConfig()
    tc = TrainConfig(
        total_epochs=_get(cfg, "train.total_epochs", d.total_epochs),
        iterations_per_epoch=_get(cfg, "train.iterations_per_epoch", d.iterations_per_epoch),
        batch_labeled=_get(cfg, "train.batch_labeled", d.batch_labeled),
        batch_unlabeled=_get(cfg, "train.batch_unlabeled", d.batch_unlabeled),
        lr0=_get(cfg, "train.lr0", d.lr0),
        weight_decay=_get(cfg, "train.weight_decay", d.weight_decay),
        momentum=_get(cfg, "train.momentum", d.momentum),
        nesterov=_get(cfg, "train.nesterov", d.nesterov),
        seed=_get(cfg, "train.seed", d.seed),
        lambda_max=_get(cfg, "lambda.lambda_max", d.lambda_max),
        ramp_end_epoch=_get(cfg, "lambda.ramp_end_epoch", d.ramp_end_epoch),
        plateau_patience=_get(cfg, "train.plateau_patience", d.plateau_patience),
        plateau_factor=_get(cfg, "train.plateau_factor", d.plateau_factor),
        plateau_threshold=_get(cfg, "train.plateau_threshold", d.plateau_threshold),
        min_lr=_get(cfg, "train.min_lr", d.min_lr),
        workers=_get(cfg, "train.workers", d.workers),
        augment=augment_config_from(cfg),
    )
    for name, value in overrides.items():
        if value is not None:
            setattr(tc, name, value)
    return tc


def phantom_config_from(cfg: dict[str, str], **overrides) -> PhantomConfig:
    d = PhantomConfig()
    pc = PhantomConfig(
        dims=_get(cfg, "phantom.dims", d.dims),
        num_organs=_get(cfg, "phantom.num_organs", d.num_organs),
        background_intensity=_get(cfg, "phantom.background_intensity", d.background_intensity),
        intensity_step=_get(cfg, "phantom.intensity_step", d.intensity_step),
        intensity_jitter=_get(cfg, "phantom.intensity_jitter", d.intensity_jitter),
        noise_sigma=_get(cfg, "phantom.noise_sigma", d.noise_sigma),
        radius_frac=_get(cfg, "phantom.radius_frac", d.radius_frac),
        spacing_jitter=_get(cfg, "phantom.spacing_jitter", d.spacing_jitter),
    )
    for name, value in overrides.items():
        if value is not None:
            setattr(pc, name, value)
    return pc


def spacing_rule_from(cfg: dict[str, str]) -> SpacingRule:
    d = SpacingRule()
    return SpacingRule(
        s_default=(
            _get(cfg, "spacing.s_x", d.s_default[0]),
            _get(cfg, "spacing.s_y", d.s_default[1]),
            _get(cfg, "spacing.s_z", d.s_default[2]),
        ),
        s_low=_get(cfg, "spacing.s_low", d.s_low),
        s_high=_get(cfg, "spacing.s_high", d.s_high),
        z_floor=_get(cfg, "spacing.z_floor", d.z_floor),
    )


def plan_constraints_from(cfg: dict[str, str], **overrides) -> PlanConstraints:
    d = PlanConstraints()
    pc = PlanConstraints(
        max_patch_voxels=_get(cfg, "plan.max_patch_voxels", d.max_patch_voxels),
        base_channels=_get(cfg, "plan.base_channels", d.base_channels),
        max_channels=_get(cfg, "plan.max_channels", d.max_channels),
        batch_size=_get(cfg, "plan.batch_size", d.batch_size),
    )
    for name, value in overrides.items():
        if value is not None:
            setattr(pc, name, value)
    return pc


# --- echo helpers: serialize resolved objects back into registry keys ---

def echo_train(tc: TrainConfig, mode: str) -> dict[str, str]:
    a = tc.augment
    return {
        "train.total_epochs": str(tc.total_epochs),
        "train.iterations_per_epoch": str(tc.iterations_per_epoch),
        "train.batch_labeled": str(tc.batch_labeled),
        "train.batch_unlabeled": str(tc.batch_unlabeled),
        "train.lr0": repr(tc.lr0),
        "train.weight_decay": repr(tc.weight_decay),
        "train.momentum": repr(tc.momentum),
        "train.nesterov": str(tc.nesterov).lower(),
        "train.seed": str(tc.seed),
        "train.mode": mode,
        "train.plateau_patience": str(tc.plateau_patience),
        "train.plateau_factor": repr(tc.plateau_factor),
        "train.plateau_threshold": repr(tc.plateau_threshold),
        "train.min_lr": repr(tc.min_lr),
        "train.workers": str(tc.workers),
        "lambda.lambda_max": repr(tc.lambda_max),
        "lambda.ramp_end_epoch": str(tc.lambda_schedule().ramp_end_epoch),
        "augment.mirror_prob": repr(a.mirror_prob),
        "augment.scale_prob": repr(a.scale_prob),
        "augment.noise_prob": repr(a.noise_prob),
        "augment.scale_range": f"{a.scale_range[0]!r},{a.scale_range[1]!r}",
        "augment.noise_sigma_max": repr(a.noise_sigma_max),
        "augment.oversample_foreground": repr(a.oversample_foreground),
    }


def echo_phantom(pc: PhantomConfig, labeled: int, unlabeled: int, seed: int) -> dict[str, str]:
    return {
        "phantom.dims": ",".join(str(d) for d in pc.dims),
        "phantom.num_organs": str(pc.num_organs),
        "phantom.background_intensity": repr(pc.background_intensity),
        "phantom.intensity_step": repr(pc.intensity_step),
        "phantom.intensity_jitter": repr(pc.intensity_jitter),
        "phantom.noise_sigma": repr(pc.noise_sigma),
        "phantom.radius_frac": f"{pc.radius_frac[0]!r},{pc.radius_frac[1]!r}",
        "phantom.spacing_jitter": f"{pc.spacing_jitter[0]!r},{pc.spacing_jitter[1]!r}",
        "synth.labeled": str(labeled),
        "synth.unlabeled": str(unlabeled),
        "synth.seed": str(seed),
    }


def echo_spacing(rule: SpacingRule) -> dict[str, str]:
    return {
        "spacing.s_x": repr(rule.s_default[0]),
        "spacing.s_y": repr(rule.s_default[1]),
        "spacing.s_z": repr(rule.s_default[2]),
        "spacing.s_low": str(rule.s_low),
        "spacing.s_high": str(rule.s_high),
        "spacing.z_floor": repr(rule.z_floor),
    }


def echo_plan_constraints(pc: PlanConstraints, dimensionality: str) -> dict[str, str]:
    return {
        "plan.dimensionality": dimensionality,
        "plan.max_patch_voxels": str(pc.max_patch_voxels),
        "plan.base_channels": str(pc.base_channels),
        "plan.max_channels": str(pc.max_channels),
        "plan.batch_size": str(pc.batch_size),
    }


def write_echo(path, cfg: dict[str, str], argv: list[str] | None = None) -> None:
    text = emit_config(cfg)
    if argv is not None:
        text = "# argv: " + " ".join(argv) + "\n" + text
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
