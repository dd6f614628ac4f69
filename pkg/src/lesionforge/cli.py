"""Stage-dispatched command line for the full pipeline.

One binary runs every stage — toy-data generation, diffusion training,
sampling, MAE pretraining, teacher fine-tuning, distillation, baselines,
evaluation, and profiling — so the checkpoint and config code paths stay
single-sourced. Exit status: 0 success, 1 runtime failure (message names
the stage), 2 configuration error (before any compute).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, parse_config_file, resolve_config, write_resolved_config
from .data import LabeledDataset, load_dataset, make_toy_dataset, save_dataset, to_classifier_input
from .diffusion import (
    DiffusionLossConfig,
    generate_balancing_set,
    load_denoiser,
    make_schedule,
    rebalance_to_max,
    sample,
    save_denoiser,
    train_diffusion,
)
from .distill import (
    ExperimentPlan,
    KDConfig,
    TrainProtocol,
    build_teacher,
    load_teacher,
    predict,
    run_experiment,
    save_teacher,
    train_classifier,
)
from .errors import ConfigError, LesionForgeError
from .images import save_image_grid
from .mae import MAEConfig, MAETrainConfig, build_mae, pretrain_mae
from .metrics import evaluate, evaluate_binary
from .models import DenoiserConfig, ViTConfig, build_denoiser, model_profile
from .optim import Optimizer, OptimizerConfig, ScheduleConfig
from .rng import RngState


class _OutputLock:
    """Single foreground run per output directory."""

    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run; delete "
                f"{self.path} if that run is gone"
            ) from None
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _write_metrics_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["variant", "task", "metric", "value"])
        for variant, task, metric, value in rows:
            writer.writerow([variant, task, metric, f"{value:.10f}"])
    return path


def _metric_rows(variant: str, preds, dataset: LabeledDataset) -> list[tuple]:
    m = evaluate(preds, dataset.labels, dataset.num_classes)
    mb = evaluate_binary(preds, dataset.labels, dataset.benign_flags)
    return [
        (variant, "categorical", "accuracy", m["accuracy"]),
        (variant, "categorical", "macro_f1", m["macro_f1"]),
        (variant, "categorical", "weighted_f1", m["weighted_f1"]),
        (variant, "binary", "accuracy", mb["accuracy"]),
        (variant, "binary", "malignant_f1", mb["malignant_f1"]),
    ]


def _load_real(cfg: RunConfig) -> LabeledDataset:
    root = cfg.require("data.dir")
    metadata = cfg["data.metadata"] or None
    return load_dataset(root, metadata_csv=metadata)


def _maybe_merge_synth(cfg: RunConfig, dataset: LabeledDataset) -> LabeledDataset:
    synth_dir = cfg["data.synth_dir"]
    if not synth_dir:
        return dataset
    synth = load_dataset(synth_dir, provenance="synthetic")
    return dataset.merge(synth)


def _encoder_config(cfg: RunConfig, num_classes: int) -> ViTConfig:
    return ViTConfig(
        image_size=cfg["model.image_size"],
        patch_size=cfg["model.patch_size"],
        dim=cfg["model.dim"],
        depth=cfg["model.depth"],
        heads=cfg["model.heads"],
        num_classes=num_classes,
        mlp_ratio=cfg["model.mlp_ratio"],
        class_token=cfg["model.class_token"],
    )


def _protocol(cfg: RunConfig) -> TrainProtocol:
    return TrainProtocol(
        epochs=cfg["train.epochs"],
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"],
        weight_decay=cfg["train.weight_decay"],
        warmup_steps=cfg["train.warmup_steps"],
    )


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _require_file(cfg: RunConfig, key: str) -> str:
    """A required config key that must also name an existing file."""
    path = cfg.require(key)
    if not Path(path).exists():
        raise ConfigError(f"{key} names a missing file: {path}")
    return path


# -- stages -------------------------------------------------------------------


def _stage_make_toy_data(cfg: RunConfig, out: Path) -> None:
    counts = cfg.require("data.counts")
    malignant = cfg["data.malignant"]
    dataset = make_toy_dataset(
        list(counts),
        image_size=cfg["data.image_size"],
        seed=cfg.seed,
        malignant_classes=None if malignant < 0 else malignant,
    )
    root = save_dataset(dataset, out / "dataset")
    print(
        f"wrote {len(dataset)} images across {dataset.num_classes} classes "
        f"to {root}"
    )


def _stage_train_diffusion(cfg: RunConfig, out: Path) -> None:
    dataset = _load_real(cfg)
    conditional = cfg["diffusion.conditional"]
    schedule = make_schedule(
        cfg["diffusion.timesteps"],
        cfg["diffusion.beta_start"],
        cfg["diffusion.beta_end"],
    )
    dcfg = DenoiserConfig(
        image_size=dataset.images.shape[-1],
        num_classes=dataset.num_classes if conditional else 0,
        base_channels=cfg["diffusion.base_channels"],
        channel_mults=cfg["diffusion.channel_mults"],
        groups=cfg["diffusion.groups"],
    )
    model = build_denoiser(dcfg, RngState(cfg.seed).child("denoiser-init"))
    steps = cfg["diffusion.steps"]
    optimizer = Optimizer(
        model.store, OptimizerConfig(kind="adamw", lr=cfg["diffusion.lr"])
    )
    lr_schedule = ScheduleConfig(
        base_lr=cfg["diffusion.lr"], total_steps=steps, kind="cosine"
    )
    loss_cfg = DiffusionLossConfig(
        lambda_perceptual=cfg["diffusion.lambda"],
        perceptual_every=cfg["diffusion.perceptual_every"],
    )
    history = train_diffusion(
        model, model.store, dataset, schedule, loss_cfg, optimizer,
        lr_schedule, steps, cfg["diffusion.batch_size"],
        RngState(cfg.seed).child("diffusion-train"),
        conditional=conditional, clip_norm=cfg["diffusion.clip_norm"],
        log_path=out / "train_log.jsonl",
    )
    ckpt = out / "diffusion.ckpt"
    save_denoiser(ckpt, model, schedule)
    print(
        f"trained denoiser for {steps} steps "
        f"(final loss {history[-1]['loss']:.4f}); checkpoint at {ckpt}"
    )


def _stage_sample(cfg: RunConfig, out: Path) -> None:
    ckpt_path = _require_file(cfg, "diffusion.checkpoint")
    model, schedule = load_denoiser(ckpt_path)
    rng = RngState(cfg.seed).child("sample")
    noise_scale = cfg["sample.noise_scale"]
    digest = _file_digest(ckpt_path)

    if model.cfg.num_classes == 0:
        count = cfg["sample.per_class"]
        if count < 1:
            raise ConfigError(
                "sampling an unconditional model needs sample.per_class >= 1"
            )
        images = sample(
            model, schedule, count, class_id=None, rng=rng.child("class0"),
            noise_scale=noise_scale,
        )
        from .data import from_diffusion_range

        synth = LabeledDataset(
            images=from_diffusion_range(images),
            labels=np.zeros(count, dtype=np.int64),
            class_names=("synthetic",),
            benign_flags=(True,),
            provenance="synthetic",
            image_ids=tuple(f"synth_{i:05d}" for i in range(count)),
        )
    else:
        real = _load_real(cfg)
        if real.num_classes != model.cfg.num_classes:
            raise ConfigError(
                f"dataset has {real.num_classes} classes but the denoiser "
                f"was trained with {model.cfg.num_classes}"
            )
        counts = cfg["sample.counts"]
        if cfg["sample.balance"]:
            targets = rebalance_to_max(real.frequency_table())
        elif counts:
            if len(counts) != real.num_classes:
                raise ConfigError(
                    f"sample.counts lists {len(counts)} classes, dataset "
                    f"has {real.num_classes}"
                )
            targets = dict(enumerate(counts))
        elif cfg["sample.per_class"] > 0:
            targets = {
                c: cfg["sample.per_class"] for c in range(real.num_classes)
            }
        else:
            raise ConfigError(
                "set one of sample.balance, sample.counts, sample.per_class"
            )
        synth = generate_balancing_set(
            model, schedule, targets, rng,
            class_names=real.class_names, benign_flags=real.benign_flags,
            noise_scale=noise_scale,
        )
    root = save_dataset(synth, out / "synthetic")
    if len(synth):
        save_image_grid(
            out / "samples.png", synth.images[:64], cols=cfg["sample.grid_cols"]
        )
    with open(out / "manifest.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "class", "seed", "checkpoint_hash"])
        for i in range(len(synth)):
            writer.writerow([
                synth.image_ids[i],
                synth.class_names[synth.labels[i]],
                cfg.seed,
                digest,
            ])
    print(f"sampled {len(synth)} synthetic images into {root}")


def _stage_pretrain_mae(cfg: RunConfig, out: Path) -> None:
    dataset = _maybe_merge_synth(cfg, _load_real(cfg))
    mae_cfg = MAEConfig(
        encoder=_encoder_config(cfg, num_classes=0),
        decoder_depth=cfg["mae.decoder_depth"],
        decoder_dim=cfg["mae.decoder_dim"],
        decoder_heads=cfg["mae.decoder_heads"],
        per_patch_norm=cfg["mae.per_patch_norm"],
    )
    model = build_mae(mae_cfg, RngState(cfg.seed).child("mae-init"))
    train_cfg = MAETrainConfig(
        epochs=cfg["mae.epochs"],
        batch_size=cfg["mae.batch_size"],
        lr=cfg["mae.lr"],
        weight_decay=cfg["mae.weight_decay"],
        mask_ratio=cfg["mae.mask_ratio"],
        holdout_fraction=cfg["mae.holdout_fraction"],
        warmup_steps=cfg["mae.warmup_steps"],
    )
    resume = cfg["mae.resume"] or None
    if resume is not None and not Path(resume).exists():
        raise ConfigError(f"mae.resume names a missing file: {resume}")
    history = pretrain_mae(
        model, dataset, train_cfg, RngState(cfg.seed).child("mae-train"),
        output_dir=out, resume_from=resume,
        log_path=out / "mae_log.jsonl",
    )
    last = history[-1] if history else {}
    print(
        f"pretrained MAE on {len(dataset)} images "
        f"(holdout loss {last.get('holdout_loss', float('nan')):.4f}); "
        f"checkpoints in {out}"
    )


def _resolve_num_classes(cfg: RunConfig, dataset: LabeledDataset) -> int:
    return cfg["model.num_classes"] or dataset.num_classes


def _stage_finetune_teacher(cfg: RunConfig, out: Path) -> None:
    dataset = _load_real(cfg)
    teacher = build_teacher(
        _require_file(cfg, "mae.checkpoint"),
        num_classes=_resolve_num_classes(cfg, dataset),
        head_init=cfg["teacher.head_init"],
        rng=RngState(cfg.seed).child("teacher-init"),
    )
    train_classifier(
        teacher, dataset, _protocol(cfg), RngState(cfg.seed).child("train"),
        log_path=out / "teacher_log.jsonl",
    )
    ckpt = out / "teacher.ckpt"
    save_teacher(ckpt, teacher)
    lines = [f"fine-tuned teacher on {len(dataset)} images; checkpoint at {ckpt}"]
    if cfg["data.eval_dir"]:
        evald = load_dataset(cfg["data.eval_dir"])
        preds = predict(teacher, to_classifier_input(evald.images))
        rows = _metric_rows("teacher", preds, evald)
        _write_metrics_csv(out / "metrics.csv", rows)
        lines.append(
            "eval macro-F1 "
            f"{dict(((t, m), v) for _, t, m, v in rows)[('categorical', 'macro_f1')]:.4f}"
        )
    print("; ".join(lines))


def _run_classifier_experiment(cfg: RunConfig, out: Path, variant: str) -> None:
    train_data = _load_real(cfg)
    if cfg["experiment.data_mode"] == "real+synth-conditional":
        train_data = _maybe_merge_synth(cfg, train_data)
    eval_data = load_dataset(cfg.require("data.eval_dir"))
    plan = ExperimentPlan(
        variant=variant,
        student_config=_encoder_config(
            cfg, num_classes=(
                2 if cfg["experiment.task"] == "binary"
                else _resolve_num_classes(cfg, train_data)
            ),
        ),
        data_mode=cfg["experiment.data_mode"],
        task=cfg["experiment.task"],
        student_init=cfg["experiment.student_init"],
        teacher_checkpoint=cfg["teacher.checkpoint"] or None,
        diffusion_checkpoint=cfg["diffusion.checkpoint"] or None,
        mae_checkpoint=cfg["mae.checkpoint"] or None,
        kd=KDConfig(alpha=cfg["kd.alpha"], temperature=cfg["kd.temperature"]),
    )
    report = run_experiment(
        plan, train_data, eval_data, RngState(cfg.seed),
        protocol=_protocol(cfg), log_path=out / "train_log.jsonl",
        output_dir=out,
    )
    _write_metrics_csv(out / "metrics.csv", report.csv_rows())
    print(report.table())


def _stage_distill(cfg: RunConfig, out: Path) -> None:
    _require_file(cfg, "teacher.checkpoint")
    _run_classifier_experiment(cfg, out, "distill")


def _stage_train_baseline(cfg: RunConfig, out: Path) -> None:
    variant = cfg["experiment.variant"] or "baseline"
    if variant not in ("baseline", "mae-finetune"):
        raise ConfigError(
            f"train-baseline runs variant 'baseline' or 'mae-finetune', "
            f"got {variant!r}"
        )
    _run_classifier_experiment(cfg, out, variant)


def _stage_evaluate(cfg: RunConfig, out: Path) -> None:
    model = load_teacher(_require_file(cfg, "eval.checkpoint"))
    dataset = _load_real(cfg)
    preds = predict(model, to_classifier_input(dataset.images))
    rows = _metric_rows(cfg["eval.label"], preds, dataset)
    path = _write_metrics_csv(out / "metrics.csv", rows)
    for variant, task, metric, value in rows:
        print(f"{variant} {task} {metric} = {value:.4f}")
    print(f"metrics written to {path}")


def _stage_profile(cfg: RunConfig, out: Path) -> None:
    preset = cfg["profile.preset"]
    image_size = cfg["profile.image_size"] or None
    if preset:
        target = preset
        label = preset
    else:
        target = _encoder_config(cfg, num_classes=cfg["model.num_classes"] or 2)
        label = "model"
    prof = model_profile(target, image_size=image_size)
    lines = [
        f"profile of {label}:",
        f"  param-count ≈ {prof['param_count'] / 1e6:.1f}M "
        f"({prof['param_count']:,} parameters)",
        f"  forward FLOPs ≈ {prof['flops'] / 1e9:.2f} GFLOPs "
        f"(batch size 1)",
        f"  fp32 weights ≈ {prof['bytes_fp32'] / 2**30:.2f} GiB",
    ]
    text = "\n".join(lines)
    (out / "profile.txt").write_text(text + "\n")
    print(text)


_STAGES = {
    "make-toy-data": _stage_make_toy_data,
    "train-diffusion": _stage_train_diffusion,
    "sample": _stage_sample,
    "pretrain-mae": _stage_pretrain_mae,
    "finetune-teacher": _stage_finetune_teacher,
    "distill": _stage_distill,
    "train-baseline": _stage_train_baseline,
    "evaluate": _stage_evaluate,
    "profile": _stage_profile,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionforge",
        description=(
            "diffusion synthesis, masked-autoencoder pretraining, and "
            "distillation for imbalanced image classification"
        ),
    )
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument("--stage", help="pipeline stage to run")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        dest="overrides", help="override one config key (repeatable)",
    )
    parser.add_argument("--output-dir", help="artifact directory")
    parser.add_argument("--seed", type=int, help="global RNG seed")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        values = parse_config_file(args.config) if args.config else {}
        values = apply_overrides(values, args.overrides)
        if args.stage is not None:
            values["stage"] = args.stage
        if args.output_dir is not None:
            values["output_dir"] = args.output_dir
        if args.seed is not None:
            values["seed"] = args.seed
        cfg = resolve_config(values)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with _OutputLock(out):
            write_resolved_config(cfg, out)
            _STAGES[cfg.stage](cfg, out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except LesionForgeError as err:
        print(f"error in stage {cfg.stage}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
