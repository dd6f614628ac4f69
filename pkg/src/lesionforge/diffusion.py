"""DDPM forward process, composite training loss, and ancestral sampler.

The forward process corrupts x0 toward noise along a linear beta
schedule; training regresses the injected noise (MSE) plus a perceptual
term computed on the implied clean-image estimate; sampling walks the
learned reverse chain with per-element RNG streams so sample sets are
reproducible element by element.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as ops
from .data import LabeledDataset, from_diffusion_range
from .errors import CheckpointError, ConfigError, ParameterError, TrainingError
from .nn import init_array
from .rng import RngState
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with cached cumulative signal fractions."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        if self.T < 1 or beta.shape != (self.T,) or alpha_bar.shape != (self.T,):
            raise ParameterError(
                f"schedule needs T >= 1 with beta and alpha_bar of length T, "
                f"got T={self.T}, beta {beta.shape}, alpha_bar {alpha_bar.shape}"
            )
        if beta.min() <= 0.0 or beta.max() >= 1.0:
            raise ParameterError(
                f"beta must lie strictly inside (0, 1), got range "
                f"[{beta.min()}, {beta.max()}]"
            )
        if not np.allclose(alpha_bar, np.cumprod(1.0 - beta), rtol=0, atol=1e-12):
            raise ParameterError(
                "alpha_bar must be the running product of (1 - beta)"
            )
        if self.T > 1 and not np.all(np.diff(alpha_bar) < 0):
            raise ParameterError("alpha_bar must be strictly decreasing")

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end over T steps."""
    if T < 1:
        raise ParameterError(f"timestep count must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got "
            f"[{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=np.cumprod(1.0 - beta))


def _check_timesteps(t: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.size and (t.min() < 0 or t.max() >= schedule.T):
        raise ParameterError(
            f"timesteps must lie in [0, {schedule.T}), got "
            f"[{t.min()}, {t.max()}]"
        )
    return t


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per batch element."""
    t = _check_timesteps(t, schedule)
    abar = schedule.alpha_bar[t].reshape(-1, 1, 1, 1)
    signal, noise = np.sqrt(abar), np.sqrt(1.0 - abar)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return ops.mul(x0, signal) + ops.mul(eps, noise)
    return signal * x0 + noise * eps


class PerceptualExtractor:
    """Frozen random-feature conv stack: 3 stride-2 stages, tanh taps.

    A seeded stand-in for a pretrained feature extractor: construction
    is deterministic per seed and the weights are immutable, so feature
    distances are stable across runs and platforms.
    """

    CHANNELS = (16, 32, 64)

    def __init__(self, in_channels: int = 3, seed: int = 0):
        rng = RngState(seed).child("perceptual-extractor")
        self.in_channels = in_channels
        self.seed = seed
        self._stages = []
        c_in = in_channels
        for i, c_out in enumerate(self.CHANNELS):
            w = init_array("fan_in", (c_out, c_in, 3, 3), rng.child(f"stage{i}"))
            w.setflags(write=False)
            self._stages.append(Tensor(w))
            c_in = c_out

    def __call__(self, x) -> list[Tensor]:
        """Feature maps tapped after each stage."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        taps = []
        for w in self._stages:
            x = ops.conv2d(x, w, stride=2, padding=1).tanh()
            taps.append(x)
        return taps


@dataclass(frozen=True)
class DiffusionLossConfig:
    """Composite-loss knobs: perceptual weight and application cadence."""

    lambda_perceptual: float = 0.1
    perceptual_every: int = 1

    def __post_init__(self):
        if self.lambda_perceptual < 0:
            raise ParameterError(
                f"perceptual weight must be >= 0, got {self.lambda_perceptual}"
            )
        if self.perceptual_every < 1:
            raise ParameterError(
                f"perceptual cadence must be >= 1, got {self.perceptual_every}"
            )


def diffusion_loss(
    model,
    x0_batch,
    class_ids,
    schedule: NoiseSchedule,
    cfg: DiffusionLossConfig,
    rng: RngState,
    extractor: PerceptualExtractor | None = None,
    step: int = 0,
):
    """Noise-regression MSE plus weighted perceptual term.

    Draws per-element timesteps and noise from ``rng`` (stateless, so
    the same state replays the same draw — finite-difference checks
    stay exact). Returns ``(loss, parts)`` with float ``mse`` and
    ``perceptual`` entries.
    """
    x0 = np.asarray(x0_batch.data if isinstance(x0_batch, Tensor) else x0_batch)
    batch = x0.shape[0]
    t = rng.child("t").integers(0, schedule.T, (batch,))
    eps = rng.child("eps").normal(x0.shape)
    x_t = forward_noise(x0, t, eps, schedule)

    eps_hat = model(Tensor(x_t), t, class_ids)
    diff = eps_hat - eps
    mse = (diff * diff).mean()

    apply_perc = cfg.lambda_perceptual > 0 and step % cfg.perceptual_every == 0
    perc = None
    if apply_perc:
        if extractor is None:
            extractor = default_extractor(x0.shape[1])
        abar = schedule.alpha_bar[t].reshape(-1, 1, 1, 1)
        x0_hat = ops.mul(Tensor(x_t) - ops.mul(eps_hat, np.sqrt(1.0 - abar)),
                         1.0 / np.sqrt(abar))
        real_taps = extractor(x0)
        est_taps = extractor(x0_hat)
        for a, b in zip(est_taps, real_taps):
            d = a - b
            term = (d * d).mean()
            perc = term if perc is None else perc + term

    loss = mse if perc is None else mse + ops.mul(perc, cfg.lambda_perceptual)
    if not np.isfinite(loss.data):
        per_elem = ((eps_hat.data - eps) ** 2).reshape(batch, -1).mean(axis=1)
        bad = np.flatnonzero(~np.isfinite(per_elem)).tolist()
        raise TrainingError(
            f"non-finite diffusion loss: offending batch indices {bad or 'n/a'} "
            f"with timesteps {t[bad].tolist() if bad else t.tolist()}"
        )
    parts = {
        "mse": float(mse.data),
        "perceptual": float(perc.data) if perc is not None else 0.0,
    }
    return loss, parts


_EXTRACTORS: dict[int, PerceptualExtractor] = {}


def default_extractor(in_channels: int) -> PerceptualExtractor:
    """Shared fixed-seed extractor per channel count."""
    if in_channels not in _EXTRACTORS:
        _EXTRACTORS[in_channels] = PerceptualExtractor(in_channels, seed=0)
    return _EXTRACTORS[in_channels]


def sample(
    model,
    schedule: NoiseSchedule,
    count: int,
    class_id: int | None = None,
    rng: RngState = RngState(0),
    noise_scale: float = 1.0,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Ancestral sampling from pure noise down to a clean batch.

    Every batch element owns a derived RNG stream keyed by its index,
    so sample sets are bit-reproducible. ``noise_scale=0`` zeroes the
    posterior variance, making the walk deterministic given the start
    ``x_init`` (drawn from the per-element streams when not supplied).
    Output is clamped to [-1, 1] at the end only.
    """
    cfg = model.cfg
    shape = (count, cfg.channels, cfg.image_size, cfg.image_size)
    streams = [rng.child(f"sample{j}") for j in range(count)]
    if x_init is None:
        x = np.stack(
            [s.child("init").normal(shape[1:]) for s in streams]
        ) if count else np.zeros(shape)
    else:
        x = np.array(x_init, dtype=np.float64)
        if x.shape != shape:
            raise ParameterError(f"x_init must have shape {shape}, got {x.shape}")
    labels = None if class_id is None else np.full(count, class_id, dtype=np.int64)
    with no_grad():
        for t in range(schedule.T - 1, -1, -1):
            t_batch = np.full(count, t, dtype=np.int64)
            eps_hat = model(Tensor(x), t_batch, labels).data
            beta = schedule.beta[t]
            abar = schedule.alpha_bar[t]
            mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)
            if t > 0:
                sigma = np.sqrt(beta) * noise_scale
                if sigma > 0:
                    z = np.stack(
                        [s.child(f"step{t}").normal(shape[1:]) for s in streams]
                    )
                    mean = mean + sigma * z
            x = mean
    return np.clip(x, -1.0, 1.0)


def generate_balancing_set(
    model,
    schedule: NoiseSchedule,
    class_targets: dict,
    rng: RngState,
    class_names: tuple[str, ...] | None = None,
    benign_flags: tuple[bool, ...] | None = None,
    noise_scale: float = 1.0,
) -> LabeledDataset:
    """Draw exactly the requested per-class counts as a synthetic dataset.

    Labels come from the conditioning class. Pixels are mapped back to
    [0, 1] storage range and carry ``provenance='synthetic'``.
    """
    cfg = model.cfg
    if cfg.num_classes == 0:
        raise ConfigError(
            "balancing requires a class-conditional model; this one is "
            "unconditional (num_classes=0)"
        )
    if class_names is None:
        class_names = tuple(f"class{c}" for c in range(cfg.num_classes))
    if benign_flags is None:
        benign_flags = (True,) * cfg.num_classes
    if len(class_names) != cfg.num_classes:
        raise ConfigError(
            f"{len(class_names)} class names for a {cfg.num_classes}-class model"
        )
    for c in class_targets:
        if not 0 <= int(c) < cfg.num_classes:
            raise ParameterError(
                f"target class {c} outside [0, {cfg.num_classes})"
            )
        if class_targets[c] < 0:
            raise ParameterError(f"negative target count for class {c}")
    images, labels, ids = [], [], []
    for c in sorted(int(k) for k in class_targets):
        n = int(class_targets[c])
        if n == 0:
            continue
        batch = sample(
            model, schedule, n, class_id=c,
            rng=rng.child(f"class{c}"), noise_scale=noise_scale,
        )
        images.append(from_diffusion_range(batch))
        labels.append(np.full(n, c, dtype=np.int64))
        ids.extend(f"synth_{class_names[c]}_{i:05d}" for i in range(n))
    side = cfg.image_size
    return LabeledDataset(
        images=np.concatenate(images) if images
        else np.zeros((0, cfg.channels, side, side)),
        labels=np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64),
        class_names=class_names,
        benign_flags=benign_flags,
        provenance="synthetic",
        image_ids=tuple(ids),
    )


def rebalance_to_max(frequencies) -> dict:
    """Per-class top-up counts that equalize every class to the max."""
    freq = np.asarray(frequencies, dtype=np.int64)
    if freq.size == 0:
        return {}
    top = int(freq.max())
    return {c: int(top - n) for c, n in enumerate(freq)}


def train_diffusion(
    model,
    store,
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    loss_cfg: DiffusionLossConfig,
    optimizer,
    lr_schedule,
    steps: int,
    batch_size: int,
    rng: RngState,
    conditional: bool = True,
    clip_norm: float = 1.0,
    log_path=None,
    log_every: int = 10,
) -> list[dict]:
    """Step-based training loop over random mini-batches.

    Each step derives its own RNG stream from the step index, draws a
    batch with replacement, applies the composite loss, clips the
    global gradient norm, and steps the optimizer on the scheduled
    learning rate. Emits JSONL progress records.
    """
    from .optim import clip_global_norm, lr_at

    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    pixels = 2.0 * dataset.images - 1.0  # diffusion data range
    extractor = default_extractor(pixels.shape[1])
    history: list[dict] = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a")
    try:
        for step in range(steps):
            g = rng.child(f"step{step}")
            idx = g.child("batch").integers(0, len(dataset), (batch_size,))
            x0 = pixels[idx]
            labels = dataset.labels[idx] if conditional else None
            loss, parts = diffusion_loss(
                model, x0, labels, schedule, loss_cfg,
                g.child("loss"), extractor=extractor, step=step,
            )
            store.zero_grad()
            loss.backward()
            clip_global_norm(store, clip_norm)
            lr = lr_at(lr_schedule, min(step, lr_schedule.total_steps))
            optimizer.step(lr=lr)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at step {step}")
            if step % log_every == 0 or step == steps - 1:
                record = {
                    "step": step,
                    "loss": float(loss.data),
                    "mse": parts["mse"],
                    "perceptual": parts["perceptual"],
                    "lr": lr,
                    "time": time.time(),
                }
                history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return history


def save_denoiser(path, model, schedule: NoiseSchedule, meta=None) -> None:
    """Checkpoint a denoiser together with its noise schedule."""
    from dataclasses import asdict

    from .checkpoint import save_checkpoint

    config = {
        "model": asdict(model.cfg),
        "schedule": {
            "timesteps": schedule.T,
            "beta_start": float(schedule.beta[0]),
            "beta_end": float(schedule.beta[-1]),
        },
    }
    save_checkpoint(
        path, model.store, model_kind="denoiser", config=config, meta=meta
    )


def load_denoiser(path):
    """Rebuild (model, schedule) from a denoiser checkpoint."""
    from .checkpoint import load_checkpoint
    from .models import DenoiserConfig, build_denoiser
    from .rng import RngState

    data = load_checkpoint(path, expect_kind="denoiser")
    raw = dict(data.config["model"])
    raw["channel_mults"] = tuple(raw["channel_mults"])
    cfg = DenoiserConfig(**raw)
    model = build_denoiser(cfg, RngState(0))
    for name, tensor in model.store.items():
        arr = data.arrays.get(name)
        if arr is None or arr.shape != tensor.shape:
            raise CheckpointError(
                f"denoiser checkpoint is missing or mis-shapes tensor "
                f"{name!r}"
            )
        tensor.data[...] = arr
    sched = data.config["schedule"]
    schedule = make_schedule(
        sched["timesteps"], sched["beta_start"], sched["beta_end"]
    )
    return model, schedule
