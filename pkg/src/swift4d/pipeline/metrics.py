"""Subject-level evaluation metrics and the per-window prediction homogeneity summary."""

from __future__ import annotations

from collections import Counter
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def balanced_accuracy(scores, labels, threshold: float = 0.0) -> float:
    """Mean of per-class recalls with class 1 predicted when score > threshold."""
    pred = np.asarray(scores) > threshold
    labels = np.asarray(labels).astype(bool)
    recalls = [np.mean(pred[labels == c] == c) for c in (False, True) if np.any(labels == c)]
    return float(np.mean(recalls))


def mse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


def mae(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


def window_homogeneity(window_predictions, labels) -> dict:
    """Per-subject fraction of correctly predicted windows and how often all windows agree.

    ``window_predictions`` is one sequence of 0/1 predictions per subject,
    ``labels`` the subjects' true classes. The histogram maps each observed
    fraction (as an exact ``Fraction``) to the number of subjects.
    """
    per_subject, identical = [], 0
    for preds, label in zip(window_predictions, labels):
        preds = np.asarray(preds).astype(int)
        if preds.size == 0:
            raise ValueError("a subject has no window predictions")
        per_subject.append(Fraction(int(np.sum(preds == int(label))), preds.size))
        identical += int(np.all(preds == preds[0]))
    n = len(per_subject)
    return {
        "per_subject_accuracy": [float(f) for f in per_subject],
        "histogram": dict(sorted(Counter(per_subject).items())),
        "fraction_identical": identical / n if n else float("nan"),
    }


CLASSIFICATION_METRICS = ("auc", "balanced_accuracy")
REGRESSION_METRICS = ("mse", "mae")


def subject_metrics(task: str, outputs, targets) -> dict[str, float]:
    if task == "sex":
        return {"auc": auc(outputs, targets), "balanced_accuracy": balanced_accuracy(outputs, targets)}
    return {"mse": mse(outputs, targets), "mae": mae(outputs, targets)}
