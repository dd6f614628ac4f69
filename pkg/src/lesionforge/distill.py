"""Classifier training: plain supervision, teacher building, distillation.

One training loop serves the baseline, the MAE-initialized fine-tune,
and soft-target distillation; variants differ only in initialization
and loss, and every RNG stream is keyed independently of the variant,
so degenerate settings (alpha = 0) reproduce their simpler counterparts
bit-exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledDataset, to_classifier_input
from .errors import CheckpointError, ConfigError, ContractError, DataError, TrainingError
from .mae import mae_config_from_checkpoint
from .metrics import evaluate, evaluate_binary
from .models import ViT, ViTConfig, build_vit, vit_trunk_shapes
from .rng import RngState
from .tensor import Tensor, no_grad


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood, stabilized via log-sum-exp."""
    x = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ContractError(
            f"need logits [B, C] with labels [B], got {x.shape} and "
            f"{labels.shape}"
        )
    num_classes = x.shape[1]
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise DataError(
            f"label {labels[bad[0]]} at record {bad[0]} outside "
            f"[0, {num_classes})"
        )
    shift = x.data.max(axis=1, keepdims=True)
    lse = (x - shift).exp().sum(axis=1, keepdims=True).log() + shift
    picked = x[np.arange(len(labels)), labels]
    return (lse.reshape(-1) - picked).mean()


@dataclass(frozen=True)
class KDConfig:
    """Soft-target blending: alpha weighs KL vs CE, T softens both."""

    alpha: float = 0.5
    temperature: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0.0:
            raise ConfigError(
                f"temperature must be positive, got {self.temperature}"
            )


def kd_loss(student_logits, teacher_logits, labels, cfg: KDConfig):
    """(1 - alpha) * CE + alpha * T^2 * KL(teacher || student).

    Teacher logits are detached: no gradient reaches them. Returns the
    blended loss and float ``parts`` {ce, kl}.
    """
    s = (
        student_logits
        if isinstance(student_logits, Tensor)
        else Tensor(np.asarray(student_logits))
    )
    t_data = np.asarray(
        teacher_logits.data
        if isinstance(teacher_logits, Tensor)
        else teacher_logits
    )
    if s.shape != t_data.shape:
        raise ContractError(
            f"student logits {s.shape} and teacher logits {t_data.shape} "
            f"must agree"
        )
    ce = cross_entropy(s, labels)

    temp = cfg.temperature
    # Teacher probabilities are constants; the arithmetic mirrors the
    # student path operation-for-operation so identical logits give a
    # bitwise-zero KL.
    tl = t_data / temp
    m = tl.max(axis=1, keepdims=True)
    lse_t = np.log(np.exp(tl - m).sum(axis=1, keepdims=True)) + m
    log_p_t = tl - lse_t
    p_t = np.exp(log_p_t)
    # student log-probabilities keep the graph
    sl = s / temp
    shift = sl.data.max(axis=1, keepdims=True)
    lse = (sl - shift).exp().sum(axis=1, keepdims=True).log() + shift
    log_p_s = sl - lse
    kl_terms = T.mul(T.sub(log_p_t, log_p_s), p_t).sum(axis=1)
    kl = kl_terms.mean() * (temp * temp)

    loss = ce * (1.0 - cfg.alpha) + kl * cfg.alpha
    return loss, {"ce": float(ce.data), "kl": float(kl.data)}


def build_teacher(
    mae_checkpoint,
    num_classes: int,
    head_init: str = "zeros",
    rng: RngState | None = None,
) -> ViT:
    """Classifier whose trunk is the encoder of a pretrained MAE.

    The checkpoint's encoder tensors are copied name-for-name; a fresh
    linear head is attached (zeros => uniform initial predictions).
    """
    if head_init not in ("zeros", "normal"):
        raise ConfigError(
            f"head init must be 'zeros' or 'normal', got {head_init!r}"
        )
    data = load_checkpoint(mae_checkpoint, expect_kind="mae")
    mae_cfg = mae_config_from_checkpoint(data.config)
    cfg = ViTConfig(
        **{**asdict(mae_cfg.encoder), "num_classes": num_classes}
    )
    rng = rng if rng is not None else RngState(0)
    model = build_vit(cfg, rng.child("teacher"))
    offenders = []
    for name, shape, _ in vit_trunk_shapes(cfg):
        arr = data.arrays.get(f"encoder.{name}")
        if arr is None or arr.shape != shape:
            offenders.append(name)
            continue
        model.store[name].data[...] = arr
    if offenders:
        raise CheckpointError(
            f"MAE checkpoint does not provide a matching encoder; "
            f"offending tensors: {offenders[:10]}"
        )
    if head_init == "normal":
        g = rng.child("head")
        model.store["head.weight"].data[...] = g.normal(
            model.store["head.weight"].shape, std=0.02
        )
    return model


VARIANTS = ("baseline", "mae-finetune", "distill")
DATA_MODES = ("real-only", "real+synth-conditional", "real+synth-unconditional")
TASKS = ("categorical", "binary")
STUDENT_INITS = ("scratch", "mae-encoder")


@dataclass(frozen=True)
class ExperimentPlan:
    """One row of the experiment grid: who trains on what, and how."""

    variant: str
    student_config: ViTConfig
    teacher_config: ViTConfig | None = None
    data_mode: str = "real-only"
    task: str = "categorical"
    student_init: str = "scratch"
    teacher_checkpoint: str | None = None
    diffusion_checkpoint: str | None = None
    mae_checkpoint: str | None = None
    kd: KDConfig = field(default_factory=KDConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; choose from {VARIANTS}"
            )
        if self.data_mode not in DATA_MODES:
            raise ConfigError(
                f"unknown data mode {self.data_mode!r}; choose from "
                f"{DATA_MODES}"
            )
        if self.task not in TASKS:
            raise ConfigError(
                f"unknown task {self.task!r}; choose from {TASKS}"
            )
        if self.student_init not in STUDENT_INITS:
            raise ConfigError(
                f"unknown student init {self.student_init!r}; choose from "
                f"{STUDENT_INITS}"
            )
        if self.variant == "distill" and self.teacher_checkpoint is None:
            raise ConfigError(
                "distillation requires a teacher checkpoint"
            )
        if self.data_mode != "real-only" and self.diffusion_checkpoint is None:
            raise ConfigError(
                f"data mode {self.data_mode!r} requires a diffusion checkpoint"
            )
        if (
            self.variant == "mae-finetune" or self.student_init == "mae-encoder"
        ) and self.mae_checkpoint is None:
            raise ConfigError(
                "initializing the student from an MAE encoder requires an "
                "MAE checkpoint"
            )


@dataclass(frozen=True)
class TrainProtocol:
    """Optimization recipe (reference-scale defaults, overridable)."""

    epochs: int = 1000
    lr: float = 3e-5
    batch_size: int = 64
    weight_decay: float = 0.01
    warmup_steps: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs and batch size must be >= 1, got "
                f"{self.epochs} and {self.batch_size}"
            )
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(
                f"need lr > 0 and weight decay >= 0, got "
                f"{self.lr} and {self.weight_decay}"
            )


@dataclass
class MetricsReport:
    """Per-(variant, task, metric) rows plus the resolved-run header."""

    variant: str
    header: dict
    rows: list
    history: list

    def csv_rows(self) -> list[tuple]:
        return [
            (r["variant"], r["task"], r["metric"], r["value"])
            for r in self.rows
        ]

    def value(self, task: str, metric: str) -> float:
        for r in self.rows:
            if r["task"] == task and r["metric"] == metric:
                return r["value"]
        raise KeyError(f"no metric {metric!r} for task {task!r}")

    def table(self) -> str:
        lines = [
            f"variant: {self.variant}",
            ", ".join(f"{k}={v}" for k, v in sorted(self.header.items())),
            f"{'task':<12} {'metric':<14} value",
        ]
        for r in self.rows:
            lines.append(
                f"{r['task']:<12} {r['metric']:<14} {r['value']:.4f}"
            )
        return "\n".join(lines)


def _init_student(plan: ExperimentPlan, rng: RngState) -> ViT:
    cfg = plan.student_config
    model = build_vit(cfg, rng.child("student"))
    use_mae = plan.variant == "mae-finetune" or plan.student_init == "mae-encoder"
    if use_mae:
        data = load_checkpoint(plan.mae_checkpoint, expect_kind="mae")
        offenders = []
        for name, shape, _ in vit_trunk_shapes(cfg):
            arr = data.arrays.get(f"encoder.{name}")
            if arr is None or arr.shape != shape:
                offenders.append(name)
                continue
            model.store[name].data[...] = arr
        if offenders:
            raise CheckpointError(
                f"student config does not match the MAE encoder; offending "
                f"tensors: {offenders[:10]}"
            )
    return model


def predict(model: ViT, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class ids over standardized inputs, batched."""
    out = []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            logits = model(Tensor(images[lo : lo + batch_size]))
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _check_plan_files(plan: ExperimentPlan) -> None:
    """Fail before any compute when a referenced checkpoint is absent."""
    for label, ref in (
        ("teacher", plan.teacher_checkpoint),
        ("diffusion", plan.diffusion_checkpoint),
        ("mae", plan.mae_checkpoint),
    ):
        if ref is not None and not Path(ref).exists():
            raise ConfigError(f"{label} checkpoint not found: {ref}")


def train_classifier(
    model: ViT,
    train_data: LabeledDataset,
    protocol: TrainProtocol,
    rng: RngState,
    labels: np.ndarray | None = None,
    teacher: ViT | None = None,
    kd: KDConfig | None = None,
    log_path=None,
) -> list[dict]:
    """Epoch loop shared by every variant.

    With a teacher the loss is the KD blend; otherwise plain cross
    entropy. Shuffling and batching draw from streams keyed only by
    epoch index, never by variant, so configurations that are
    mathematically identical produce bit-identical trajectories.
    """
    from .optim import Optimizer, OptimizerConfig, ScheduleConfig, lr_at

    if len(train_data) == 0:
        raise TrainingError("cannot train a classifier on an empty dataset")
    pixels = to_classifier_input(train_data.images)
    labels = train_data.labels if labels is None else np.asarray(labels)
    steps_per_epoch = (
        len(train_data) + protocol.batch_size - 1
    ) // protocol.batch_size
    schedule = ScheduleConfig(
        base_lr=protocol.lr,
        total_steps=max(1, protocol.epochs * steps_per_epoch),
        warmup_steps=protocol.warmup_steps,
        kind="cosine",
    )
    optimizer = Optimizer(
        model.store,
        OptimizerConfig(
            kind="adamw", lr=protocol.lr, weight_decay=protocol.weight_decay
        ),
    )
    history: list[dict] = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a")
    try:
        for epoch in range(protocol.epochs):
            perm = rng.child(f"epoch{epoch}").permutation(len(train_data))
            epoch_loss, epoch_parts = [], {"ce": [], "kl": []}
            for step in range(steps_per_epoch):
                sel = perm[
                    step * protocol.batch_size : (step + 1) * protocol.batch_size
                ]
                if len(sel) == 0:
                    continue
                logits = model(Tensor(pixels[sel]))
                if teacher is not None and kd is not None:
                    with no_grad():
                        t_logits = teacher(Tensor(pixels[sel]))
                    loss, parts = kd_loss(logits, t_logits.data, labels[sel], kd)
                    epoch_parts["ce"].append(parts["ce"])
                    epoch_parts["kl"].append(parts["kl"])
                else:
                    loss = cross_entropy(logits, labels[sel])
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite classifier loss at epoch {epoch}, "
                        f"step {step}"
                    )
                model.store.zero_grad()
                loss.backward()
                global_step = epoch * steps_per_epoch + step
                lr = lr_at(schedule, min(global_step, schedule.total_steps))
                optimizer.step(lr=lr)
                epoch_loss.append(float(loss.data))
            record = {
                "epoch": epoch,
                "step": (epoch + 1) * steps_per_epoch,
                "loss": float(np.mean(epoch_loss)) if epoch_loss else 0.0,
                "lr": lr_at(
                    schedule,
                    min((epoch + 1) * steps_per_epoch - 1, schedule.total_steps),
                ),
                "time": time.time(),
            }
            if epoch_parts["ce"]:
                record["ce"] = float(np.mean(epoch_parts["ce"]))
                record["kl"] = float(np.mean(epoch_parts["kl"]))
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return history


def run_experiment(
    plan: ExperimentPlan,
    train_data: LabeledDataset,
    eval_data: LabeledDataset,
    rng: RngState,
    protocol: TrainProtocol = TrainProtocol(),
    log_path=None,
    output_dir=None,
) -> MetricsReport:
    """Train one experiment-grid cell and score it on held-out data.

    Checkpoint references are verified before any training; evaluation
    always covers the categorical task and its benign/malignant
    collapse.
    """
    _check_plan_files(plan)
    from .metrics import collapse_to_binary

    binary_head = plan.task == "binary"
    model = _init_student(plan, rng)
    teacher = None
    kd = None
    if plan.variant == "distill":
        teacher = load_teacher(plan.teacher_checkpoint)
        kd = plan.kd
    train_labels = train_data.labels
    if binary_head:
        if plan.student_config.num_classes != 2:
            raise ConfigError(
                "a binary-task plan needs a 2-class student head, got "
                f"{plan.student_config.num_classes}"
            )
        train_labels = collapse_to_binary(
            train_data.labels, train_data.benign_flags
        )
    history = train_classifier(
        model, train_data, protocol, rng.child("train"),
        labels=train_labels, teacher=teacher, kd=kd, log_path=log_path,
    )

    pixels = to_classifier_input(eval_data.images)
    preds = predict(model, pixels, protocol.batch_size)
    rows = []
    if binary_head:
        bin_labels = collapse_to_binary(eval_data.labels, eval_data.benign_flags)
        m = evaluate(preds, bin_labels, 2)
        f1 = m["per_class_f1"]
        rows += [
            {"variant": plan.variant, "task": "binary", "metric": "accuracy",
             "value": m["accuracy"]},
            {"variant": plan.variant, "task": "binary",
             "metric": "malignant_f1", "value": float(f1[1])},
            {"variant": plan.variant, "task": "binary", "metric": "macro_f1",
             "value": m["macro_f1"]},
        ]
    else:
        m = evaluate(preds, eval_data.labels, eval_data.num_classes)
        mb = evaluate_binary(preds, eval_data.labels, eval_data.benign_flags)
        rows += [
            {"variant": plan.variant, "task": "categorical",
             "metric": "accuracy", "value": m["accuracy"]},
            {"variant": plan.variant, "task": "categorical",
             "metric": "macro_f1", "value": m["macro_f1"]},
            {"variant": plan.variant, "task": "categorical",
             "metric": "weighted_f1", "value": m["weighted_f1"]},
            {"variant": plan.variant, "task": "binary", "metric": "accuracy",
             "value": mb["accuracy"]},
            {"variant": plan.variant, "task": "binary",
             "metric": "malignant_f1", "value": mb["malignant_f1"]},
        ]
    header = {
        "variant": plan.variant,
        "data_mode": plan.data_mode,
        "task": plan.task,
        "epochs": protocol.epochs,
        "lr": protocol.lr,
        "batch_size": protocol.batch_size,
        "weight_decay": protocol.weight_decay,
        "alpha": plan.kd.alpha if plan.variant == "distill" else None,
        "temperature": (
            plan.kd.temperature if plan.variant == "distill" else None
        ),
        "train_records": len(train_data),
        "eval_records": len(eval_data),
    }
    report = MetricsReport(
        variant=plan.variant, header=header, rows=rows, history=history
    )
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            out / f"{plan.variant}_classifier.ckpt", model.store,
            model_kind="vit", config=asdict(plan.student_config),
        )
    return report


def save_teacher(path, model: ViT) -> None:
    save_checkpoint(
        path, model.store, model_kind="vit", config=asdict(model.cfg)
    )


def load_teacher(path) -> ViT:
    """Rebuild a classifier from its checkpoint (config rides inside)."""
    data = load_checkpoint(path, expect_kind="vit")
    cfg = ViTConfig(**data.config)
    model = ViT(cfg, _store_from_arrays(data.arrays))
    return model


def _store_from_arrays(arrays: dict):
    from .nn import ParameterStore

    store = ParameterStore()
    for name in sorted(arrays):
        store.add(name, Tensor(arrays[name].copy(), requires_grad=True))
    return store
