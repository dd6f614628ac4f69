"""Masked-autoencoder pretraining: mask sampling, model, loss, loop.

The encoder is a ViT trunk that sees only visible patches; a narrow
decoder rebuilds every patch from the encoded tokens plus a learned
mask token, and the loss scores masked patches only. Encoder parameter
names carry an ``encoder.`` prefix so a classifier trunk can be loaded
straight out of an MAE checkpoint.
"""

from __future__ import annotations

import json
import time
import warnings as _warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_into_store, save_checkpoint
from .data import LabeledDataset, to_classifier_input
from .errors import ContractError, ParameterError, TrainingError
from .models import ViTConfig, vit_trunk_shapes
from .nn import (
    LayerNorm,
    Linear,
    ParameterStore,
    TransformerBlock,
    build_params,
    patchify,
    transformer_block_shapes,
)
from .rng import RngState
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class MaskSpec:
    """A visible/masked partition of the patch grid. mask: 1 = visible."""

    N: int
    ratio: float
    mask: np.ndarray
    visible_indices: np.ndarray
    masked_indices: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.int64)
        vis = np.asarray(self.visible_indices, dtype=np.int64)
        hid = np.asarray(self.masked_indices, dtype=np.int64)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "visible_indices", vis)
        object.__setattr__(self, "masked_indices", hid)
        if mask.shape != (self.N,) or not np.isin(mask, (0, 1)).all():
            raise ParameterError(f"mask must be binary of length {self.N}")
        if sorted(vis.tolist() + hid.tolist()) != list(range(self.N)):
            raise ParameterError(
                "visible and masked indices must partition the patch grid"
            )
        if not (mask[vis] == 1).all() or not (mask[hid] == 0).all():
            raise ParameterError("mask bits disagree with the index lists")

    @property
    def num_visible(self) -> int:
        return len(self.visible_indices)

    @property
    def num_masked(self) -> int:
        return len(self.masked_indices)


def mask_counts(N: int, ratio: float) -> tuple[int, int]:
    """(visible, masked) counts: masked = floor(ratio * N).

    Equivalently visible = ceil(N * (1 - ratio)), so at ratio 0.75 the
    encoder sees exactly ceil(N / 4) tokens.
    """
    masked = int(np.floor(ratio * N))
    return N - masked, masked


def sample_mask(N: int, ratio: float, rng: RngState) -> MaskSpec:
    """Uniformly random mask with exactly the contracted masked count."""
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1), got {ratio}")
    if N < 1:
        raise ParameterError(f"patch count must be >= 1, got {N}")
    _, masked_count = mask_counts(N, ratio)
    perm = rng.permutation(N)
    masked = np.sort(perm[:masked_count])
    visible = np.sort(perm[masked_count:])
    mask = np.ones(N, dtype=np.int64)
    mask[masked] = 0
    return MaskSpec(
        N=N, ratio=ratio, mask=mask,
        visible_indices=visible, masked_indices=masked,
    )


@dataclass(frozen=True)
class MAEConfig:
    """Encoder trunk config plus the narrow decoder's dimensions."""

    encoder: ViTConfig
    decoder_depth: int = 2
    decoder_dim: int = 0  # 0 selects encoder dim // 2
    decoder_heads: int = 4
    per_patch_norm: bool = False

    def __post_init__(self):
        if self.decoder_depth < 1:
            raise ParameterError(
                f"decoder depth must be >= 1, got {self.decoder_depth}"
            )
        if self.dec_dim % self.decoder_heads != 0:
            raise ParameterError(
                f"decoder dim {self.dec_dim} not divisible by "
                f"{self.decoder_heads} heads"
            )

    @property
    def dec_dim(self) -> int:
        return self.decoder_dim if self.decoder_dim else self.encoder.dim // 2


def mae_param_shapes(cfg: MAEConfig):
    enc = cfg.encoder
    for name, shape, tag in vit_trunk_shapes(enc):
        yield f"encoder.{name}", shape, tag
    dd = cfg.dec_dim
    yield "enc_to_dec.weight", (enc.dim, dd), "tn02"
    yield "enc_to_dec.bias", (dd,), "zeros"
    yield "mask_token", (dd,), "tn02"
    yield "decoder_pos", (1, enc.num_patches, dd), "tn02"
    for i in range(cfg.decoder_depth):
        yield from transformer_block_shapes(f"decoder.blocks.{i}", dd)
    yield "decoder.norm.gamma", (dd,), "ones"
    yield "decoder.norm.beta", (dd,), "zeros"
    yield "decoder.head.weight", (dd, enc.patch_dim), "tn02"
    yield "decoder.head.bias", (enc.patch_dim,), "zeros"


class MAE:
    """Encoder-decoder pair with asymmetric token counts."""

    def __init__(self, cfg: MAEConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store
        enc = cfg.encoder
        self.patch_embed = Linear.from_store(store, "encoder.patch_embed")
        self.cls_token = (
            store["encoder.cls_token"] if enc.class_token else None
        )
        self.pos_embed = store["encoder.pos_embed"]
        self.enc_blocks = [
            TransformerBlock(store, f"encoder.blocks.{i}", enc.heads)
            for i in range(enc.depth)
        ]
        self.enc_norm = LayerNorm.from_store(store, "encoder.norm")
        self.enc_to_dec = Linear.from_store(store, "enc_to_dec")
        self.mask_token = store["mask_token"]
        self.decoder_pos = store["decoder_pos"]
        self.dec_blocks = [
            TransformerBlock(store, f"decoder.blocks.{i}", cfg.decoder_heads)
            for i in range(cfg.decoder_depth)
        ]
        self.dec_norm = LayerNorm.from_store(store, "decoder.norm")
        self.head = Linear.from_store(store, "decoder.head")
        # instrumentation: patch-token count fed to the encoder last call
        self.last_visible_count: int | None = None

    def forward_batch(self, images, visible_indices: np.ndarray) -> Tensor:
        """Reconstruct all patches for a batch with per-element masks.

        ``visible_indices`` is [B, V]; the encoder runs on exactly V
        patch tokens per element and the decoder on the full grid.
        """
        enc = self.cfg.encoder
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        idx = np.asarray(visible_indices, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
            raise ContractError(
                f"visible indices must be [B, V] matching the batch, got "
                f"{idx.shape} for {x.shape[0]} images"
            )
        n = enc.num_patches
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ContractError(
                f"visible indices must lie in [0, {n}), got "
                f"[{idx.min()}, {idx.max()}]"
            )
        b = x.shape[0]
        tokens = self.patch_embed(patchify(x, enc.patch_size))
        patch_pos = (
            self.pos_embed[:, 1:, :] if enc.class_token else self.pos_embed
        )
        tokens = tokens + patch_pos
        vis = T.take_tokens(tokens, idx)
        self.last_visible_count = idx.shape[1]
        if self.cls_token is not None:
            cls = (self.cls_token + self.pos_embed[:, :1, :]).broadcast_to(
                (b, 1, enc.dim)
            )
            vis = T.concat([cls, vis], axis=1)
        for block in self.enc_blocks:
            vis = block(vis)
        z = self.enc_norm(vis)
        z = self.enc_to_dec(z)
        if self.cls_token is not None:
            z = z[:, 1:, :]
        full = T.place_tokens(z, self.mask_token, idx, n)
        full = full + self.decoder_pos
        for block in self.dec_blocks:
            full = block(full)
        return self.head(self.dec_norm(full))


def build_mae(cfg: MAEConfig, rng: RngState) -> MAE:
    store = ParameterStore()
    build_params(store, mae_param_shapes(cfg), rng)
    return MAE(cfg, store)


def mae_forward(model: MAE, image, mask: MaskSpec) -> Tensor:
    """Single-image reconstruction over all N patches in original order."""
    n = model.cfg.encoder.num_patches
    if mask.N != n:
        raise ContractError(
            f"mask covers {mask.N} patches but the model grid has {n}"
        )
    out = model.forward_batch(
        np.asarray(image)[None] if not isinstance(image, Tensor) else image,
        mask.visible_indices[None],
    )
    return out.reshape(out.shape[1], out.shape[2])


def _patch_targets(images, patch_size: int, per_patch_norm: bool) -> np.ndarray:
    x = np.asarray(images.data if isinstance(images, Tensor) else images)
    if x.ndim == 3:
        x = x[None]
    target = patchify(Tensor(x), patch_size).data
    if per_patch_norm:
        mu = target.mean(axis=-1, keepdims=True)
        sd = np.sqrt(target.var(axis=-1, keepdims=True) + 1e-6)
        target = (target - mu) / sd
    return target


def mae_loss(reconstruction, image, mask: MaskSpec, per_patch_norm: bool = False):
    """Mean squared error over masked patch-pixels only.

    Visible patches contribute nothing — perturbing them leaves the
    value bit-identical. With zero masked patches the loss is exactly 0
    and a warning is emitted.
    """
    recon = (
        reconstruction
        if isinstance(reconstruction, Tensor)
        else Tensor(np.asarray(reconstruction))
    )
    if recon.ndim == 2:
        recon = recon.reshape(1, *recon.shape)
    image_arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    if image_arr.ndim == 3:
        image_arr = image_arr[None]
    side = image_arr.shape[-1]
    patch = side // int(np.sqrt(mask.N))
    target = _patch_targets(image_arr, patch, per_patch_norm)
    if recon.shape != target.shape:
        raise ContractError(
            f"reconstruction {recon.shape} does not match patch targets "
            f"{target.shape}"
        )
    if mask.num_masked == 0:
        _warnings.warn("mask has zero masked patches; loss is exactly 0")
        return Tensor(0.0)
    idx = np.broadcast_to(mask.masked_indices, (recon.shape[0], mask.num_masked))
    diff = T.take_tokens(recon - target, idx)
    return (diff * diff).mean()


def _batch_mae_loss(model: MAE, images: np.ndarray, masks: list[MaskSpec]):
    """Forward + loss for a batch sharing one mask ratio."""
    vis = np.stack([m.visible_indices for m in masks])
    hid = np.stack([m.masked_indices for m in masks])
    recon = model.forward_batch(images, vis)
    if hid.shape[1] == 0:
        _warnings.warn("mask has zero masked patches; loss is exactly 0")
        return Tensor(0.0)
    target = _patch_targets(
        images, model.cfg.encoder.patch_size, model.cfg.per_patch_norm
    )
    diff = T.take_tokens(recon - target, hid)
    return (diff * diff).mean()


@dataclass(frozen=True)
class MAETrainConfig:
    """Pretraining hyperparameters (paper-scale defaults, desk-size knobs)."""

    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.05
    mask_ratio: float = 0.75
    holdout_fraction: float = 0.1
    warmup_steps: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError(
                f"epochs and batch size must be >= 1, got "
                f"{self.epochs} and {self.batch_size}"
            )
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ParameterError(
                f"mask ratio must lie in [0, 1), got {self.mask_ratio}"
            )
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ParameterError(
                f"holdout fraction must lie in [0, 1), got "
                f"{self.holdout_fraction}"
            )


def pretrain_mae(
    model: MAE,
    dataset: LabeledDataset,
    config: MAETrainConfig,
    rng: RngState,
    output_dir=None,
    resume_from=None,
    log_path=None,
    stop_after_epoch: int | None = None,
) -> list[dict]:
    """Self-supervised pretraining loop (labels ignored).

    All randomness is keyed by absolute epoch index off the caller's
    ``rng``, and optimizer state rides inside checkpoints, so resuming
    from epoch k replays exactly what an uninterrupted run would do.
    Writes ``mae_final.ckpt`` and ``mae_best.ckpt`` (held-out loss)
    when ``output_dir`` is given. ``stop_after_epoch`` simulates an
    interruption: the run checkpoints and returns early, and a resume
    under the same config finishes it bit-exactly.
    """
    from .optim import Optimizer, OptimizerConfig, ScheduleConfig, lr_at

    if len(dataset) == 0:
        raise TrainingError("cannot pretrain on an empty dataset")
    pixels = to_classifier_input(dataset.images)
    n_total = len(dataset)
    n_hold = int(round(config.holdout_fraction * n_total))
    n_hold = min(n_hold, n_total - 1)
    order = rng.child("holdout").permutation(n_total)
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    n_patches = model.cfg.encoder.num_patches
    hold_masks = [
        sample_mask(n_patches, config.mask_ratio, rng.child("holdout-mask", f"{j}"))
        for j in range(n_hold)
    ]

    steps_per_epoch = (len(train_idx) + config.batch_size - 1) // config.batch_size
    schedule = ScheduleConfig(
        base_lr=config.lr,
        total_steps=max(1, config.epochs * steps_per_epoch),
        warmup_steps=config.warmup_steps,
        kind="cosine",
    )
    optimizer = Optimizer(
        model.store,
        OptimizerConfig(kind="adamw", lr=config.lr,
                        weight_decay=config.weight_decay),
    )

    start_epoch = 0
    best_holdout = np.inf
    if resume_from is not None:
        data = load_checkpoint(resume_from, expect_kind="mae")
        load_into_store(model.store, data)
        if data.optimizer_arrays:
            optimizer.load_state(data.optimizer_step, data.optimizer_arrays)
        start_epoch = int(data.meta.get("epochs_done", 0))
        best_holdout = float(data.meta.get("best_holdout", np.inf))

    def holdout_loss() -> float:
        if n_hold == 0:
            return float("nan")
        total, count = 0.0, 0
        with no_grad():
            for lo in range(0, n_hold, config.batch_size):
                sel = slice(lo, min(lo + config.batch_size, n_hold))
                batch_masks = hold_masks[sel]
                loss = _batch_mae_loss(
                    model, pixels[hold_idx[sel]], batch_masks
                )
                total += float(loss.data) * len(batch_masks)
                count += len(batch_masks)
        return total / count

    def save(path, epochs_done, best):
        save_checkpoint(
            path, model.store, model_kind="mae",
            config=mae_checkpoint_config(model.cfg, config),
            optimizer=optimizer,
            meta={"epochs_done": epochs_done, "best_holdout": best},
        )

    history: list[dict] = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a")
    last_epoch = config.epochs if stop_after_epoch is None else min(
        config.epochs, stop_after_epoch
    )
    try:
        for epoch in range(start_epoch, last_epoch):
            e_rng = rng.child(f"epoch{epoch}")
            perm = e_rng.child("order").permutation(len(train_idx))
            epoch_losses = []
            for step in range(steps_per_epoch):
                sel = train_idx[
                    perm[step * config.batch_size : (step + 1) * config.batch_size]
                ]
                if len(sel) == 0:
                    continue
                masks = [
                    sample_mask(
                        n_patches, config.mask_ratio,
                        e_rng.child(f"step{step}", f"mask{j}"),
                    )
                    for j in range(len(sel))
                ]
                loss = _batch_mae_loss(model, pixels[sel], masks)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite pretraining loss at epoch {epoch}, "
                        f"step {step}"
                    )
                model.store.zero_grad()
                loss.backward()
                global_step = epoch * steps_per_epoch + step
                lr = lr_at(schedule, min(global_step, schedule.total_steps))
                optimizer.step(lr=lr)
                epoch_losses.append(float(loss.data))
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
            hold = holdout_loss()
            record = {
                "epoch": epoch,
                "step": (epoch + 1) * steps_per_epoch,
                "loss": mean_loss,
                "holdout_loss": hold,
                "lr": lr_at(
                    schedule,
                    min((epoch + 1) * steps_per_epoch - 1, schedule.total_steps),
                ),
                "time": time.time(),
            }
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if output_dir is not None:
                if np.isfinite(hold) and hold < best_holdout:
                    best_holdout = hold
                    save(Path(output_dir) / "mae_best.ckpt", epoch + 1,
                         best_holdout)
                save(Path(output_dir) / "mae_final.ckpt", epoch + 1,
                     best_holdout)
    finally:
        if log_file is not None:
            log_file.close()
    return history


def mae_checkpoint_config(cfg: MAEConfig, train: MAETrainConfig | None = None):
    """Plain-dict architecture (+ training) record stored in checkpoints."""
    out = {"mae": {k: v for k, v in asdict(cfg).items() if k != "encoder"}}
    out["encoder"] = asdict(cfg.encoder)
    if train is not None:
        out["train"] = asdict(train)
    return out


def mae_config_from_checkpoint(config: dict) -> MAEConfig:
    enc = ViTConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in config["encoder"].items()
    })
    return MAEConfig(encoder=enc, **config.get("mae", {}))
