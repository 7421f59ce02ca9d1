"""Classification metrics over the four affective-state classes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LABELS

NUM_CLASSES = len(LABELS)


def confusion_counts(y_true, y_pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Raw counts; rows are true labels, columns predictions."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{y_true.shape[0]} labels vs {y_pred.shape[0]} predictions")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def normalize_rows(counts: np.ndarray) -> list[list[float] | None]:
    """Row-normalize; rows without support become None."""
    out = []
    for row in np.asarray(counts, dtype=np.float64):
        total = row.sum()
        out.append(None if total == 0 else (row / total).tolist())
    return out


@dataclass
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    degenerate: list[int]  # classes with no true and no predicted instances


def class_scores(counts: np.ndarray) -> ClassScores:
    cm = np.asarray(counts, dtype=np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    degenerate = [i for i in range(len(tp)) if support[i] == 0 and predicted[i] == 0]
    return ClassScores(precision, recall, f1, degenerate)


def macro_f1(counts: np.ndarray) -> float:
    """Unweighted mean of per-class F1; empty classes count as 0."""
    return float(class_scores(counts).f1.mean())


def per_class_accuracy(counts: np.ndarray) -> list[float | None]:
    """Diagonal of the row-normalized confusion matrix (i.e. recall)."""
    cm = np.asarray(counts, dtype=np.float64)
    support = cm.sum(axis=1)
    return [None if s == 0 else float(cm[i, i] / s) for i, s in enumerate(support)]
