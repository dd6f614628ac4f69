"""End-to-end desk-scale pipeline: synthesize, pretrain, distill.

Ties the stages together for one-call experiments: a class-conditioned
denoiser is trained on a class-balanced resample of the (imbalanced)
real data and used to top up minority classes; the merged corpus
pretrains an MAE; its encoder becomes a fine-tuned teacher; finally a
small student is distilled on the rebalanced corpus and compared against
an identically budgeted baseline student that saw only the real data.

Synthesis runs at half resolution by default — the generative model
works in a reduced space and its samples are upsampled to the dataset
resolution — which buys a large speedup at no cost to the class signal
the downstream classifier needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset, to_classifier_input
from .diffusion import (
    DiffusionLossConfig,
    NoiseSchedule,
    generate_balancing_set,
    make_schedule,
    rebalance_to_max,
    train_diffusion,
)
from .distill import (
    KDConfig,
    MetricsReport,
    TrainProtocol,
    predict,
    save_teacher,
    train_classifier,
)
from .errors import ContractError
from .mae import MAEConfig, MAETrainConfig, build_mae, pretrain_mae
from .metrics import evaluate, evaluate_binary
from .models import DenoiserConfig, ViT, ViTConfig, build_denoiser, build_vit, vit_trunk_shapes
from .optim import Optimizer, OptimizerConfig, ScheduleConfig
from .rng import RngState


def downsample2(images: np.ndarray) -> np.ndarray:
    """Average-pool [N, C, H, W] images by 2 in each spatial dimension."""
    n, c, h, w = images.shape
    if h % 2 or w % 2:
        raise ContractError(f"spatial dims must be even, got {h}x{w}")
    return images.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def upsample2(images: np.ndarray) -> np.ndarray:
    """Nearest-neighbor upsample [N, C, H, W] images by 2."""
    return np.repeat(np.repeat(images, 2, axis=2), 2, axis=3)


def balanced_repeat(dataset: LabeledDataset) -> LabeledDataset:
    """Equalize class frequencies by cyclically repeating records.

    The resample gives a conditional generator equal gradient mass per
    class, so minority-class conditioning trains as well as majority.
    """
    freq = dataset.frequency_table()
    target = int(freq.max())
    index_runs = []
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == cls)
        if members.size == 0:
            continue
        index_runs.append(np.resize(members, target))
    idx = np.concatenate(index_runs)
    return LabeledDataset(
        images=dataset.images[idx],
        labels=dataset.labels[idx],
        class_names=dataset.class_names,
        benign_flags=dataset.benign_flags,
        provenance=dataset.provenance,
    )


@dataclass(frozen=True)
class PipelineConfig:
    """Desk-scale knobs for the full chain (pilot-calibrated defaults)."""

    image_size: int = 32
    synth_at_half_resolution: bool = True
    # conditional generator
    timesteps: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.1
    diffusion_base_channels: int = 12
    diffusion_channel_mults: tuple[int, ...] = (1, 2)
    diffusion_groups: int = 4
    diffusion_steps: int = 3500
    diffusion_batch_size: int = 16
    diffusion_lr: float = 2e-3
    lambda_perceptual: float = 0.1
    perceptual_every: int = 4
    sample_noise_scale: float = 1.0
    # encoder / teacher
    encoder: ViTConfig = field(default_factory=lambda: ViTConfig(
        image_size=32, patch_size=4, dim=48, depth=2, heads=4, num_classes=0,
    ))
    mae_train: MAETrainConfig = field(default_factory=lambda: MAETrainConfig(
        epochs=12, batch_size=32, lr=1e-3, weight_decay=0.05,
        mask_ratio=0.75, holdout_fraction=0.1,
    ))
    teacher_protocol: TrainProtocol = field(default_factory=lambda: TrainProtocol(
        epochs=15, lr=1e-3, batch_size=32, weight_decay=0.01,
    ))
    # student arms
    student: ViTConfig = field(default_factory=lambda: ViTConfig(
        image_size=32, patch_size=8, dim=24, depth=2, heads=4, num_classes=0,
    ))
    student_epochs: int = 20
    student_lr: float = 1e-3
    student_batch_size: int = 32
    student_weight_decay: float = 0.01
    kd: KDConfig = field(default_factory=lambda: KDConfig(alpha=0.5, temperature=2.0))


@dataclass
class PipelineArtifacts:
    """Stage outputs shared by every student seed."""

    synthetic: LabeledDataset
    merged: LabeledDataset
    teacher: ViT
    schedule: NoiseSchedule
    denoiser_history: list
    mae_history: list
    teacher_history: list


def synthesize_rebalancing_data(
    model,
    schedule: NoiseSchedule,
    real: LabeledDataset,
    rng: RngState,
    upsample: bool,
    noise_scale: float = 1.0,
    targets: dict | None = None,
) -> LabeledDataset:
    """Conditional samples topping every class up to the majority count."""
    if targets is None:
        targets = rebalance_to_max(real.frequency_table())
    synth = generate_balancing_set(
        model, schedule, targets, rng,
        class_names=real.class_names, benign_flags=real.benign_flags,
        noise_scale=noise_scale,
    )
    if upsample and len(synth):
        synth = LabeledDataset(
            images=upsample2(synth.images),
            labels=synth.labels,
            class_names=synth.class_names,
            benign_flags=synth.benign_flags,
            provenance="synthetic",
            image_ids=synth.image_ids,
        )
    return synth


def prepare_pipeline(
    real_train: LabeledDataset,
    rng: RngState,
    cfg: PipelineConfig = PipelineConfig(),
    output_dir=None,
) -> PipelineArtifacts:
    """Run the heavy shared stages: generator, synthesis, MAE, teacher."""
    if real_train.images.shape[-1] != cfg.image_size:
        raise ContractError(
            f"pipeline configured for {cfg.image_size}px images, dataset "
            f"has {real_train.images.shape[-1]}px"
        )
    # -- stage 1: conditional generator on the balanced half-res corpus --
    gen_images = real_train.images
    gen_size = cfg.image_size
    if cfg.synth_at_half_resolution:
        gen_images = downsample2(gen_images)
        gen_size //= 2
    gen_corpus = balanced_repeat(LabeledDataset(
        images=gen_images,
        labels=real_train.labels,
        class_names=real_train.class_names,
        benign_flags=real_train.benign_flags,
    ))
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    dcfg = DenoiserConfig(
        image_size=gen_size,
        num_classes=real_train.num_classes,
        base_channels=cfg.diffusion_base_channels,
        channel_mults=cfg.diffusion_channel_mults,
        groups=cfg.diffusion_groups,
    )
    denoiser = build_denoiser(dcfg, rng.child("denoiser-init"))
    optimizer = Optimizer(
        denoiser.store, OptimizerConfig(kind="adamw", lr=cfg.diffusion_lr)
    )
    lr_schedule = ScheduleConfig(
        base_lr=cfg.diffusion_lr, total_steps=cfg.diffusion_steps, kind="cosine"
    )
    denoiser_history = train_diffusion(
        denoiser, denoiser.store, gen_corpus, schedule,
        DiffusionLossConfig(
            lambda_perceptual=cfg.lambda_perceptual,
            perceptual_every=cfg.perceptual_every,
        ),
        optimizer, lr_schedule, cfg.diffusion_steps, cfg.diffusion_batch_size,
        rng.child("diffusion-train"),
    )

    # -- stage 2: top up minority classes with conditional samples --
    synthetic = synthesize_rebalancing_data(
        denoiser, schedule, real_train, rng.child("synthesis"),
        upsample=cfg.synth_at_half_resolution,
        noise_scale=cfg.sample_noise_scale,
    )
    merged = real_train.merge(synthetic) if len(synthetic) else real_train

    # -- stage 3: MAE pretraining on the rebalanced corpus --
    mae_cfg = MAEConfig(encoder=cfg.encoder)
    mae = build_mae(mae_cfg, rng.child("mae-init"))
    mae_history = pretrain_mae(
        mae, merged, cfg.mae_train, rng.child("mae-train"),
        output_dir=output_dir,
    )

    # -- stage 4: teacher = pretrained encoder + fine-tuned head --
    teacher_cfg = replace(cfg.encoder, num_classes=real_train.num_classes)
    teacher = build_vit(teacher_cfg, rng.child("teacher-init"))
    for name, _, _ in vit_trunk_shapes(teacher_cfg):
        teacher.store[name].data[...] = mae.store[f"encoder.{name}"].data
    teacher_history = train_classifier(
        teacher, merged, cfg.teacher_protocol, rng.child("teacher-train"),
    )
    if output_dir is not None:
        save_teacher(f"{output_dir}/teacher.ckpt", teacher)
    return PipelineArtifacts(
        synthetic=synthetic,
        merged=merged,
        teacher=teacher,
        schedule=schedule,
        denoiser_history=denoiser_history,
        mae_history=mae_history,
        teacher_history=teacher_history,
    )


def _student_config(cfg: PipelineConfig, num_classes: int) -> ViTConfig:
    return replace(cfg.student, num_classes=num_classes)


def _matched_epochs(cfg: PipelineConfig, merged: int, real: int) -> int:
    """Baseline epochs giving the same optimizer-step budget."""
    per_merged = math.ceil(merged / cfg.student_batch_size)
    per_real = math.ceil(real / cfg.student_batch_size)
    return max(1, round(cfg.student_epochs * per_merged / per_real))


def run_student_arms(
    artifacts: PipelineArtifacts,
    real_train: LabeledDataset,
    eval_data: LabeledDataset,
    seed: int,
    cfg: PipelineConfig = PipelineConfig(),
    teacher_checkpoint: str = "<in-memory>",
) -> tuple[MetricsReport, MetricsReport]:
    """One seed of distilled student vs identically budgeted baseline.

    Budget parity: both students share the architecture and the number
    of optimizer steps; the baseline sees only the real data, so its
    epoch count is scaled up to match total steps.
    """
    num_classes = real_train.num_classes
    student_cfg = _student_config(cfg, num_classes)
    distill_protocol = TrainProtocol(
        epochs=cfg.student_epochs, lr=cfg.student_lr,
        batch_size=cfg.student_batch_size,
        weight_decay=cfg.student_weight_decay,
    )
    baseline_protocol = replace(
        distill_protocol,
        epochs=_matched_epochs(cfg, len(artifacts.merged), len(real_train)),
    )

    distill_model = build_vit(student_cfg, RngState(seed).child("student"))
    distill_history = train_classifier(
        distill_model, artifacts.merged, distill_protocol,
        RngState(seed).child("distill-train"),
        teacher=artifacts.teacher, kd=cfg.kd,
    )
    baseline_model = build_vit(student_cfg, RngState(seed).child("student"))
    baseline_history = train_classifier(
        baseline_model, real_train, baseline_protocol,
        RngState(seed).child("baseline-train"),
    )

    pixels = to_classifier_input(eval_data.images)
    reports = []
    for variant, model, history, protocol in (
        ("distill", distill_model, distill_history, distill_protocol),
        ("baseline", baseline_model, baseline_history, baseline_protocol),
    ):
        preds = predict(model, pixels, cfg.student_batch_size)
        m = evaluate(preds, eval_data.labels, num_classes)
        mb = evaluate_binary(preds, eval_data.labels, eval_data.benign_flags)
        rows = [
            {"variant": variant, "task": "categorical", "metric": "accuracy",
             "value": m["accuracy"]},
            {"variant": variant, "task": "categorical", "metric": "macro_f1",
             "value": m["macro_f1"]},
            {"variant": variant, "task": "categorical",
             "metric": "weighted_f1", "value": m["weighted_f1"]},
            {"variant": variant, "task": "binary", "metric": "accuracy",
             "value": mb["accuracy"]},
            {"variant": variant, "task": "binary", "metric": "malignant_f1",
             "value": mb["malignant_f1"]},
        ]
        header = {
            "variant": variant,
            "seed": seed,
            "epochs": protocol.epochs,
            "lr": protocol.lr,
            "batch_size": protocol.batch_size,
            "weight_decay": protocol.weight_decay,
            "train_records": (
                len(artifacts.merged) if variant == "distill"
                else len(real_train)
            ),
        }
        reports.append(MetricsReport(
            variant=variant, header=header, rows=rows, history=history
        ))
    return reports[0], reports[1]
