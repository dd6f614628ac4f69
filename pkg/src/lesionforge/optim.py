"""Adam-family optimizer, warmup-cosine schedule, and gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, TrainingError
from .nn import ParameterStore

OPTIMIZER_KINDS = ("adam", "adamw")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ParameterError(
                f"optimizer kind must be one of {OPTIMIZER_KINDS}, got {self.kind!r}"
            )
        if self.kind == "adam" and self.weight_decay != 0.0:
            raise ParameterError(
                "adam does not apply weight decay; use adamw "
                f"(got weight_decay={self.weight_decay})"
            )
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError(
                f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})"
            )
        if self.weight_decay < 0:
            raise ParameterError(
                f"weight decay must be non-negative, got {self.weight_decay}"
            )


class Optimizer:
    """Adam / AdamW over one parameter store.

    adamw applies decoupled decay p *= (1 - lr*wd) before the Adam update,
    so adamw with weight_decay=0 is bitwise-identical to adam. Missing
    gradients count as zero so the step counter stays global.
    """

    def __init__(self, store: ParameterStore, config: OptimizerConfig):
        self.store = store
        self.config = config
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self, lr: float | None = None) -> None:
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        if lr < 0:
            raise ParameterError(f"step learning rate must be >= 0, got {lr}")
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise TrainingError(
                    f"non-finite gradient for parameter {name!r} at step {self.t}"
                )
            if cfg.kind == "adamw" and cfg.weight_decay > 0.0:
                p.data *= 1.0 - lr * cfg.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": a.copy() for n, a in self.m.items()}
        out.update({f"v.{n}": a.copy() for n, a in self.v.items()})
        return out

    def load_state(self, step_count: int, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            raise ParameterError(
                "optimizer state names do not match the parameter store"
            )
        self.t = int(step_count)
        for n in self.m:
            self.m[n] = np.asarray(arrays[f"m.{n}"], dtype=np.float64).copy()
            self.v[n] = np.asarray(arrays[f"v.{n}"], dtype=np.float64).copy()


SCHEDULE_KINDS = ("constant", "cosine")


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ParameterError(
                f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}"
            )
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ParameterError(
                f"warmup_steps must lie in [0, total_steps], got {self.warmup_steps}"
            )
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ParameterError(
                f"need 0 <= min_lr <= base_lr with base_lr > 0, "
                f"got base_lr={self.base_lr}, min_lr={self.min_lr}"
            )


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    """Learning rate at a step: linear warmup 0 -> base_lr over
    warmup_steps, then either constant base_lr or cosine decay to min_lr
    at total_steps.
    """
    s = schedule
    if not (0 <= step <= s.total_steps):
        raise ParameterError(
            f"step must lie in [0, {s.total_steps}], got {step}"
        )
    if s.warmup_steps > 0 and step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    if s.kind == "constant":
        return s.base_lr
    span = max(s.total_steps - s.warmup_steps, 1)
    progress = (step - s.warmup_steps) / span
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(store: ParameterStore, max_norm: float) -> float:
    """Scale every gradient so the joint norm is at most max_norm.

    Returns the norm before clipping. Parameters with no gradient are
    treated as zero contribution.
    """
    if max_norm <= 0:
        raise ParameterError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float(np.square(p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad *= scale
    return norm
