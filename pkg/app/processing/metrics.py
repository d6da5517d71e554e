# app/processing/metrics.py

import logging
from typing import Optional, Sequence

import numpy as np

from app.utils.errors import GaitVLMError
from app.utils.models import MetricsReport

logger = logging.getLogger(__name__)


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise GaitVLMError(f"{pred.size} predictions for {true.size} labels")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise GaitVLMError(f"{name} outside class range [0, {n_classes})")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (true, pred), 1)
    return matrix


def evaluate(
    predictions: Sequence[int], labels: Sequence[int], n_classes: int, clip_accuracy: Optional[float] = None
) -> MetricsReport:
    """Top-1 accuracy, macro F1 (absent classes count as 0) and the confusion matrix."""
    matrix = confusion_matrix(predictions, labels, n_classes)
    total = int(matrix.sum())
    tp = np.diag(matrix).astype(np.float64)
    predicted = matrix.sum(axis=0).astype(np.float64)
    support = matrix.sum(axis=1)
    f1 = []
    for i in range(n_classes):
        precision = tp[i] / predicted[i] if predicted[i] else 0.0
        recall = tp[i] / support[i] if support[i] else 0.0
        f1.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return MetricsReport(
        n_classes=n_classes,
        accuracy=float(tp.sum() / total) if total else 0.0,
        macro_f1=float(np.mean(f1)),
        per_class_f1=[float(x) for x in f1],
        confusion=matrix.tolist(),
        support=[int(s) for s in support],
        clip_accuracy=clip_accuracy,
    )


def majority_vote(clip_predictions: Sequence[int], n_classes: int) -> int:
    """Most frequent clip prediction; ties go to the lower class id."""
    return int(np.bincount(np.asarray(clip_predictions, dtype=np.int64), minlength=n_classes).argmax())
