import numpy as np
from typing import Optional
from loguru import logger

from models.errors import DataValidationError, ShapeError
from models.report import ConfusionCounts, EnergyScores, MetricsReport, StatusScores


def _ratio(numerator: float, denominator: float) -> float:
    # undefined ratios score 0
    return float(numerator / denominator) if denominator > 0 else 0.0


def confusion_counts(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool).ravel()
    truth = np.asarray(truth).astype(bool).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction length {pred.size} differs from truth length {truth.size}")
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        tn=int(np.sum(~pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


def status_scores(pred: np.ndarray, truth: np.ndarray) -> StatusScores:
    """Precision, recall and F1 of the ON class, micro-averaged over every timestamp given."""
    if np.shape(pred) != np.shape(truth):
        raise ShapeError(f"prediction shape {np.shape(pred)} differs from truth shape {np.shape(truth)}")
    counts = confusion_counts(pred, truth)
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return StatusScores(precision=precision, recall=recall, f1=f1, counts=counts)


def energy_scores(pred: np.ndarray, truth: np.ndarray) -> EnergyScores:
    """
    MAE and RMSE in Watts plus the matching ratio sum(min) / sum(max).

    Two all-zero series match perfectly (ratio 1).
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction length {pred.size} differs from truth length {truth.size}")
    if (pred < 0).any() or (truth < 0).any():
        raise DataValidationError("power series must be non-negative")
    if pred.size == 0:
        raise DataValidationError("cannot score empty power series")
    error = pred - truth
    overlap = np.minimum(pred, truth).sum()
    union = np.maximum(pred, truth).sum()
    return EnergyScores(
        mae=float(np.mean(np.abs(error))),
        rmse=float(np.sqrt(np.mean(error ** 2))),
        matching_ratio=float(overlap / union) if union > 0 else 1.0,
    )


def balanced_accuracy(counts: ConfusionCounts) -> float:
    """Mean of the true positive and true negative rates; an empty class contributes 0."""
    return 0.5 * (_ratio(counts.tp, counts.tp + counts.fn) + _ratio(counts.tn, counts.tn + counts.fp))


def build_report(appliance: str, pred_status: np.ndarray, true_status: np.ndarray,
                 window_pred: np.ndarray, window_truth: np.ndarray,
                 pred_power: Optional[np.ndarray] = None, true_power: Optional[np.ndarray] = None) -> MetricsReport:
    """
    Localization and energy scores over the concatenated windows plus window-level detection scores.
    """
    localization = status_scores(np.ravel(pred_status), np.ravel(true_status))
    detection_counts = confusion_counts(window_pred, window_truth)
    energy = None
    if pred_power is not None and true_power is not None:
        energy = energy_scores(pred_power, true_power)
    report = MetricsReport(
        appliance=appliance,
        f1=localization.f1,
        precision=localization.precision,
        recall=localization.recall,
        balanced_accuracy=balanced_accuracy(detection_counts),
        mae=energy.mae if energy else None,
        rmse=energy.rmse if energy else None,
        matching_ratio=energy.matching_ratio if energy else None,
        counts=localization.counts,
        detection_counts=detection_counts,
        timestamps_evaluated=localization.counts.total,
        windows_evaluated=detection_counts.total,
    )
    logger.info(
        f"{appliance}: F1={report.f1:.3f} Pr={report.precision:.3f} Rc={report.recall:.3f} "
        f"BA={report.balanced_accuracy:.3f}"
    )
    return report
