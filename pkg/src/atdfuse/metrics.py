"""Regression, classification and retrieval metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, DimensionError, Tensor


def _arr(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1)


def _paired(y, y_hat):
    y, y_hat = _arr(y), _arr(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionError(f"length mismatch: {y.size} targets vs {y_hat.size} predictions")
    if y.size == 0:
        raise ContractError("regression metrics need at least one sample")
    return y, y_hat


def mae(y, y_hat):
    y, y_hat = _paired(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mse(y, y_hat):
    y, y_hat = _paired(y, y_hat)
    r = y - y_hat
    return float(np.mean(r * r))


@dataclass
class ClassificationReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list
    # classes where precision or recall hit 0/0 and were set to 0
    degenerate_classes: list = field(default_factory=list)


def confusion_matrix(y_true, y_pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy_f1(y_true, y_pred, n_classes=None):
    """Accuracy and macro-F1 (unweighted mean of per-class F1).

    Precision, recall or F1 with a zero denominator are taken as 0 and the
    class is listed in ``degenerate_classes``.
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.size == 0:
        raise ContractError("accuracy_f1 needs at least one sample")
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"length mismatch: {y_true.size} labels vs {y_pred.size} predictions")
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    if min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes:
        raise ContractError(f"labels must lie in [0, {n_classes})")

    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    f1s, degenerate = [], []
    for c in range(n_classes):
        bad = pred_pos[c] == 0 or true_pos[c] == 0
        precision = tp[c] / pred_pos[c] if pred_pos[c] else 0.0
        recall = tp[c] / true_pos[c] if true_pos[c] else 0.0
        denom = precision + recall
        if denom == 0:
            bad = True
        f1s.append(2.0 * precision * recall / denom if denom else 0.0)
        if bad:
            degenerate.append(c)
    accuracy = float(tp.sum() / y_true.size)
    return ClassificationReport(accuracy, float(np.mean(f1s)), f1s, degenerate)


def recall_at_k(similarity, truth, k):
    """Percentage of queries whose true gallery item ranks in the top ``k``.

    Rows of ``similarity`` are queries, columns gallery items. Ties rank the
    lower gallery index first.
    """
    sim = np.asarray(similarity.data if isinstance(similarity, Tensor) else similarity,
                     dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if sim.ndim != 2 or sim.shape[0] != truth.size:
        raise DimensionError(f"similarity {sim.shape} does not match {truth.size} queries")
    n_gallery = sim.shape[1]
    if not 1 <= k <= n_gallery:
        raise ContractError(f"K={k} must be between 1 and the gallery size {n_gallery}")
    if truth.size == 0:
        raise ContractError("recall_at_k needs at least one query")
    target = sim[np.arange(truth.size), truth][:, None]
    cols = np.arange(n_gallery)[None, :]
    rank = (sim > target).sum(axis=1) + ((sim == target) & (cols < truth[:, None])).sum(axis=1)
    return 100.0 * float(np.mean(rank < k))
