"""Classification metrics: confusion matrices, F1 variants, binary collapse.

Everything is computed from integer class-id arrays; per-class F1 is
defined as 0 whenever its denominator vanishes, so degenerate predictors
score honestly instead of crashing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed [true class, predicted class]."""

    counts: np.ndarray

    @classmethod
    def from_predictions(
        cls, predictions, labels, num_classes: int
    ) -> "ConfusionMatrix":
        predictions = np.asarray(predictions, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if predictions.shape != labels.shape or predictions.ndim != 1:
            raise ContractError(
                f"predictions {predictions.shape} and labels {labels.shape} "
                f"must be equal-length 1-d arrays"
            )
        if num_classes < 1:
            raise ContractError(f"need at least one class, got {num_classes}")
        for name, arr in (("predictions", predictions), ("labels", labels)):
            if len(arr) and (arr.min() < 0 or arr.max() >= num_classes):
                raise ContractError(
                    f"{name} contain ids outside [0, {num_classes}): "
                    f"[{arr.min()}, {arr.max()}]"
                )
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (labels, predictions), 1)
        return cls(counts=counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        n = self.total()
        return float(np.trace(self.counts) / n) if n else 0.0

    def per_class_f1(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = 2 * tp + fp + fn
        return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)

    def macro_f1(self) -> float:
        return float(self.per_class_f1().mean())

    def weighted_f1(self) -> float:
        support = self.counts.sum(axis=1).astype(np.float64)
        n = support.sum()
        if n == 0:
            return 0.0
        return float((self.per_class_f1() * support).sum() / n)


def evaluate(predictions, labels, num_classes: int) -> dict:
    """Full metric bundle for one prediction set."""
    cm = ConfusionMatrix.from_predictions(predictions, labels, num_classes)
    return {
        "confusion": cm.counts,
        "accuracy": cm.accuracy(),
        "per_class_f1": cm.per_class_f1(),
        "macro_f1": cm.macro_f1(),
        "weighted_f1": cm.weighted_f1(),
    }


def collapse_to_binary(class_ids, benign_flags) -> np.ndarray:
    """Map class ids to the benign/malignant axis: 0 = benign, 1 = malignant."""
    class_ids = np.asarray(class_ids, dtype=np.int64)
    malignant = ~np.asarray(benign_flags, dtype=bool)
    if len(class_ids) and (
        class_ids.min() < 0 or class_ids.max() >= len(malignant)
    ):
        raise ContractError(
            f"class ids outside [0, {len(malignant)}): "
            f"[{class_ids.min()}, {class_ids.max()}]"
        )
    return malignant[class_ids].astype(np.int64)


def evaluate_binary(predictions, labels, benign_flags) -> dict:
    """Metrics on the collapsed benign-vs-malignant task.

    ``malignant_f1`` is the F1 of the positive (malignant) class, the
    clinically load-bearing number under imbalance.
    """
    out = evaluate(
        collapse_to_binary(predictions, benign_flags),
        collapse_to_binary(labels, benign_flags),
        2,
    )
    out["malignant_f1"] = float(out["per_class_f1"][1])
    return out
