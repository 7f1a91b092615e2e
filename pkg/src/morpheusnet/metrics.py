"""Confusion-matrix metrics: accuracy, macro F1, sensitivity, specificity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NUM_STAGES, STAGE_INDEX


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows = true stage, columns = predicted stage
    accuracy: float
    macro_f1: float
    sensitivity: float
    specificity: float
    per_class_precision: dict[str, float]
    per_class_recall: dict[str, float]

    def to_json_dict(self) -> dict:
        """The wire schema: exactly accuracy, mf1, sensitivity, specificity, confusion."""
        return {
            "accuracy": self.accuracy,
            "mf1": self.macro_f1,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "confusion": self.confusion.astype(int).tolist(),
        }


def _as_indices(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind in ("U", "S", "O"):
        return np.array([STAGE_INDEX[str(v)] for v in arr], dtype=np.int64)
    return arr.astype(np.int64)


def confusion_matrix(predictions, labels) -> np.ndarray:
    pred = _as_indices(predictions)
    true = _as_indices(labels)
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    if pred.size and (pred.min() < 0 or pred.max() >= NUM_STAGES
                      or true.min() < 0 or true.max() >= NUM_STAGES):
        raise ValueError("stage index out of range")
    conf = np.zeros((NUM_STAGES, NUM_STAGES), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    return conf


def report_from_confusion(conf: np.ndarray) -> EvalReport:
    conf = np.asarray(conf, dtype=np.int64)
    total = conf.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(conf).astype(np.float64)
    row = conf.sum(axis=1).astype(np.float64)   # true counts
    col = conf.sum(axis=0).astype(np.float64)   # predicted counts
    present = row > 0  # stages never observed are left out of macro averages

    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(row > 0, diag / row, 0.0)
        precision = np.where(col > 0, diag / col, 0.0)
        f1_den = precision + recall
        f1 = np.where(f1_den > 0, 2 * precision * recall / f1_den, 0.0)
    tn = total - row - col + diag
    fp = col - diag
    tnr = np.where((tn + fp) > 0, tn / (tn + fp), 0.0)

    from .model import STAGES

    return EvalReport(
        confusion=conf,
        accuracy=float(diag.sum() / total),
        macro_f1=float(f1[present].mean()),
        sensitivity=float(recall[present].mean()),
        specificity=float(tnr[present].mean()),
        per_class_precision={s: float(precision[i]) for i, s in enumerate(STAGES)},
        per_class_recall={s: float(recall[i]) for i, s in enumerate(STAGES)},
    )


def evaluate_metrics(predictions, labels) -> EvalReport:
    """Score per-epoch stage predictions against reference labels.

    Accuracy is the confusion trace over the total; macro F1, sensitivity
    (mean per-class recall) and specificity (mean per-class true-negative
    rate, one-vs-rest) are unweighted means over the stages that actually
    occur in the labels.
    """
    return report_from_confusion(confusion_matrix(predictions, labels))
