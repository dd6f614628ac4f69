"""Flat, typed key/value run configuration.

The on-disk format is one dotted key per line (`diffusion.lambda = 0.1`),
`#` comments, and nothing else. Parsing is strict: unknown keys, duplicate
keys, and malformed values are rejected with the offending line. Every run
writes its fully resolved configuration next to its outputs so a stage can
be reproduced from the artifact directory alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

STAGES = (
    "make-toy-data",
    "train-diffusion",
    "sample",
    "pretrain-mae",
    "finetune-teacher",
    "distill",
    "train-baseline",
    "evaluate",
    "profile",
)

# key -> (type tag, default). A default of REQUIRED means the stage that
# reads the key insists on it; parsing alone never requires a key.
REQUIRED = object()

SCHEMA: dict[str, tuple[str, object]] = {
    "stage": ("str", ""),
    "seed": ("int", 0),
    "output_dir": ("str", ""),
    # datasets
    "data.dir": ("str", ""),
    "data.eval_dir": ("str", ""),
    "data.synth_dir": ("str", ""),
    "data.metadata": ("str", ""),
    "data.counts": ("ints", ()),
    "data.image_size": ("int", 32),
    "data.malignant": ("int", -1),
    # classifier / encoder architecture
    "model.image_size": ("int", 32),
    "model.patch_size": ("int", 4),
    "model.dim": ("int", 64),
    "model.depth": ("int", 4),
    "model.heads": ("int", 4),
    "model.num_classes": ("int", 0),
    "model.mlp_ratio": ("int", 4),
    "model.class_token": ("bool", True),
    # diffusion model and its training
    "diffusion.timesteps": ("int", 200),
    "diffusion.beta_start": ("float", 1e-4),
    "diffusion.beta_end": ("float", 0.02),
    "diffusion.base_channels": ("int", 32),
    "diffusion.channel_mults": ("ints", (1, 2, 2)),
    "diffusion.groups": ("int", 8),
    "diffusion.lambda": ("float", 0.1),
    "diffusion.perceptual_every": ("int", 1),
    "diffusion.steps": ("int", 2000),
    "diffusion.batch_size": ("int", 32),
    "diffusion.lr": ("float", 1e-4),
    "diffusion.clip_norm": ("float", 1.0),
    "diffusion.conditional": ("bool", True),
    "diffusion.checkpoint": ("str", ""),
    # sampling
    "sample.per_class": ("int", 0),
    "sample.counts": ("ints", ()),
    "sample.balance": ("bool", False),
    "sample.noise_scale": ("float", 1.0),
    "sample.grid_cols": ("int", 8),
    # masked-autoencoder pretraining
    "mae.mask_ratio": ("float", 0.75),
    "mae.epochs": ("int", 30),
    "mae.batch_size": ("int", 32),
    "mae.lr": ("float", 1e-4),
    "mae.weight_decay": ("float", 0.05),
    "mae.holdout_fraction": ("float", 0.1),
    "mae.warmup_steps": ("int", 0),
    "mae.decoder_depth": ("int", 2),
    "mae.decoder_dim": ("int", 0),
    "mae.decoder_heads": ("int", 4),
    "mae.per_patch_norm": ("bool", False),
    "mae.checkpoint": ("str", ""),
    "mae.resume": ("str", ""),
    # teacher
    "teacher.checkpoint": ("str", ""),
    "teacher.head_init": ("str", "zeros"),
    # classifier optimization (reference-scale defaults)
    "train.epochs": ("int", 1000),
    "train.lr": ("float", 3e-5),
    "train.batch_size": ("int", 64),
    "train.weight_decay": ("float", 0.01),
    "train.warmup_steps": ("int", 0),
    # distillation blend
    "kd.alpha": ("float", 0.5),
    "kd.temperature": ("float", 2.0),
    # experiment grid coordinates
    "experiment.variant": ("str", ""),
    "experiment.data_mode": ("str", "real-only"),
    "experiment.task": ("str", "categorical"),
    "experiment.student_init": ("str", "scratch"),
    # evaluation
    "eval.checkpoint": ("str", ""),
    "eval.label": ("str", "evaluate"),
    # profiling
    "profile.preset": ("str", "vit_b16"),
    "profile.image_size": ("int", 0),
}


def _parse_value(key: str, raw: str, where: str):
    kind = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            if not raw:
                return ()
            return tuple(int(part.strip()) for part in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(
            f"{where}: cannot parse {raw!r} as {kind} for key {key!r}"
        ) from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Strict parse of `key = value` lines into typed values."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, where)
    return values


def parse_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), source=str(p))


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """`key=value` strings (from repeated --set flags) layered on top."""
    out = dict(values)
    for i, item in enumerate(overrides):
        where = f"--set[{i}]"
        if "=" not in item:
            raise ConfigError(f"{where}: expected key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        out[key] = _parse_value(key, raw, where)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run settings: every schema key has a value."""

    stage: str
    seed: int
    output_dir: str
    values: dict

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        return self.values[key]

    def require(self, key: str):
        """Value of `key`, insisting it was set to something non-empty."""
        value = self[key]
        if value == "" or value == ():
            raise ConfigError(
                f"stage {self.stage!r} requires {key!r} to be set"
            )
        return value


def resolve_config(values: dict) -> RunConfig:
    """Fill defaults and validate the stage / seed / output directory."""
    resolved = {key: default for key, (_, default) in SCHEMA.items()}
    resolved.update(values)
    stage = resolved["stage"]
    if stage not in STAGES:
        raise ConfigError(
            f"stage must be one of {', '.join(STAGES)}; got {stage!r}"
        )
    if not resolved["output_dir"]:
        raise ConfigError("output_dir must be set (flag or config key)")
    return RunConfig(
        stage=stage,
        seed=int(resolved["seed"]),
        output_dir=resolved["output_dir"],
        values=resolved,
    )


def format_config(config: RunConfig) -> str:
    """Canonical text form: sorted keys, round-trips through the parser."""
    lines = []
    for key in sorted(config.values):
        value = config.values[key]
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def write_resolved_config(config: RunConfig, directory) -> Path:
    path = Path(directory) / "resolved.cfg"
    path.write_text(format_config(config))
    return path
