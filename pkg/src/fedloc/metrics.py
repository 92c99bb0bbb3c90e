"""Localization evaluation: class accuracies and mean distance errors.

Planar distance errors come in two flavors. The masked variant sums
distances over records whose building and floor are both correct and
divides by the full record count; the correct-subset variant divides the
same sum by the number of correct records, which is the usual reading of
"error when building and floor are correctly predicted". Both are always
computed. The 3D variant averages the planar error over all records
regardless of classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

MDE_VARIANTS = ("masked-mean", "correct-subset")


@dataclass(frozen=True)
class LocalizationMetrics:
    b_acc: float
    f_acc: float
    acc: float
    mde2d_masked: float
    mde2d_correct: float
    mde3d: float
    n: int
    n_correct: int
    no_correct_records: bool = False

    def to_dict(self) -> dict:
        return {
            "b_acc": self.b_acc,
            "f_acc": self.f_acc,
            "acc": self.acc,
            "mde2d_masked_mean_m": self.mde2d_masked,
            "mde2d_correct_subset_m": self.mde2d_correct,
            "mde3d_m": self.mde3d,
            "n": self.n,
            "n_correct": self.n_correct,
            "no_correct_records": self.no_correct_records,
        }

    def mde2d(self, variant: str) -> float:
        if variant == "masked-mean":
            return self.mde2d_masked
        if variant == "correct-subset":
            return self.mde2d_correct
        raise ValueError(f"unknown MDE variant {variant!r}; choose from {MDE_VARIANTS}")


def _check_lengths(*arrays: np.ndarray) -> int:
    n = len(arrays[0])
    if n == 0:
        raise DataError("metrics need at least one record")
    if any(len(a) != n for a in arrays):
        raise DataError("prediction/label arrays differ in length")
    return n


def accuracies(
    pred_buildings: np.ndarray,
    pred_floors: np.ndarray,
    true_buildings: np.ndarray,
    true_floors: np.ndarray,
) -> tuple[float, float, float]:
    """Building accuracy, floor accuracy, and both-correct success rate."""
    n = _check_lengths(pred_buildings, pred_floors, true_buildings, true_floors)
    b_ok = pred_buildings == true_buildings
    f_ok = pred_floors == true_floors
    return (
        float(b_ok.sum() / n),
        float(f_ok.sum() / n),
        float((b_ok & f_ok).sum() / n),
    )


def planar_errors(pred_xy: np.ndarray, true_xy: np.ndarray) -> np.ndarray:
    """Per-record Euclidean distance in the coordinate plane (float64)."""
    diff = pred_xy.astype(np.float64) - true_xy.astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=1))


def mde2d(
    pred_buildings: np.ndarray,
    pred_floors: np.ndarray,
    pred_xy: np.ndarray,
    true_buildings: np.ndarray,
    true_floors: np.ndarray,
    true_xy: np.ndarray,
    variant: str = "correct-subset",
) -> float:
    """Mean planar error restricted to correctly classified records.

    "masked-mean" divides the masked distance sum by the total record
    count N; "correct-subset" divides by the number of correct records
    (defined as 0 when nothing is correct).
    """
    n = _check_lengths(pred_buildings, pred_floors, pred_xy, true_buildings, true_floors, true_xy)
    mask = (pred_buildings == true_buildings) & (pred_floors == true_floors)
    masked_sum = float(planar_errors(pred_xy, true_xy)[mask].sum())
    if variant == "masked-mean":
        return masked_sum / n
    if variant == "correct-subset":
        n_correct = int(mask.sum())
        return masked_sum / n_correct if n_correct else 0.0
    raise ValueError(f"unknown MDE variant {variant!r}; choose from {MDE_VARIANTS}")


def mde3d(pred_xy: np.ndarray, true_xy: np.ndarray) -> float:
    """Mean planar error over all records, no classification mask."""
    _check_lengths(pred_xy, true_xy)
    return float(planar_errors(pred_xy, true_xy).mean())


def compute_metrics(
    pred_buildings: np.ndarray,
    pred_floors: np.ndarray,
    pred_xy: np.ndarray,
    true_buildings: np.ndarray,
    true_floors: np.ndarray,
    true_xy: np.ndarray,
) -> LocalizationMetrics:
    """Full metric bundle over one prediction set, distances in the
    coordinate frame of the inputs (meters when given meters)."""
    n = _check_lengths(pred_buildings, pred_floors, pred_xy, true_buildings, true_floors, true_xy)
    b_acc, f_acc, acc = accuracies(pred_buildings, pred_floors, true_buildings, true_floors)
    mask = (pred_buildings == true_buildings) & (pred_floors == true_floors)
    n_correct = int(mask.sum())
    errors = planar_errors(pred_xy, true_xy)
    masked_sum = float(errors[mask].sum())
    return LocalizationMetrics(
        b_acc=b_acc,
        f_acc=f_acc,
        acc=acc,
        mde2d_masked=masked_sum / n,
        mde2d_correct=masked_sum / n_correct if n_correct else 0.0,
        mde3d=float(errors.mean()),
        n=n,
        n_correct=n_correct,
        no_correct_records=n_correct == 0,
    )
