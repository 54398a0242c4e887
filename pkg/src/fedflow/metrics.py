"""Classification metrics, round-series stability, and permutation
feature importance.

Macro F1 averages per-class F1 over *active* classes only: classes absent
from both the truth and the predictions are excluded, so small per-round
test sets that happen to miss a rare class do not drag the score down.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .flows import N_CLASSES, label_name
from .nn import ModelParams, predict
from .rng import substream


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Count matrix with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have equal lengths")
    if y_true.size and (
        y_true.min() < 0 or y_true.max() >= n_classes
        or y_pred.min() < 0 or y_pred.max() >= n_classes
    ):
        raise ValueError(f"class codes must lie in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _per_class(cm: np.ndarray):
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    active = (support > 0) | (predicted > 0)
    return precision, recall, f1, support, active


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean F1 over active classes."""
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    _, _, f1, _, active = _per_class(cm)
    return float(f1[active].mean())


@dataclass(frozen=True)
class ClassReport:
    label: int
    precision: float
    recall: float
    f1: float
    support: int
    active: bool


def per_class_report(cm: np.ndarray) -> list[ClassReport]:
    """Per-class precision/recall/F1; inactive classes flagged, not scored."""
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    precision, recall, f1, support, active = _per_class(cm)
    return [
        ClassReport(
            label=i,
            precision=float(precision[i]),
            recall=float(recall[i]),
            f1=float(f1[i]),
            support=int(support[i]),
            active=bool(active[i]),
        )
        for i in range(cm.shape[0])
    ]


def write_per_class_report(path: str, cm: np.ndarray) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for row in per_class_report(cm):
            writer.writerow(
                [
                    label_name(row.label),
                    f"{row.precision:.6f}",
                    f"{row.recall:.6f}",
                    f"{row.f1:.6f}",
                    row.support,
                ]
            )


@dataclass(frozen=True)
class StabilityStats:
    mean: float
    std: float
    min: float
    n_rounds: int


def stability(series, start: int, stop: int) -> StabilityStats:
    """Population mean/std/min of ``series[start:stop]``.

    Non-finite entries (rounds without an evaluated score) are skipped;
    an empty or all-skipped window is an error.
    """
    if not 0 <= start < stop <= len(series):
        raise ValueError(
            f"window [{start}, {stop}) not within series of length {len(series)}"
        )
    window = np.asarray(series[start:stop], dtype=float)
    window = window[np.isfinite(window)]
    if window.size == 0:
        raise ValueError("stability window contains no evaluated rounds")
    return StabilityStats(
        mean=float(window.mean()),
        std=float(window.std()),
        min=float(window.min()),
        n_rounds=int(window.size),
    )


def permutation_importance(params: ModelParams, inputs: np.ndarray,
                           targets: np.ndarray, schema, repeats: int,
                           seed: int, max_samples: int = 0):
    """Mean macro-F1 drop per feature when that column is shuffled.

    Each (feature, repeat) pair uses its own RNG substream, so results are
    independent of evaluation order.  With ``max_samples`` > 0 the
    evaluation set is first reduced to a seeded subsample.  Returns
    (feature name, mean drop) sorted by descending drop, ties broken by
    schema index.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=int)
    if len(y) < 100:
        raise ValueError("permutation importance requires >= 100 samples")
    if max_samples and len(y) > max_samples:
        picked = substream(seed, "subsample").choice(len(y), size=max_samples, replace=False)
        picked.sort()
        x, y = x[picked], y[picked]

    baseline = macro_f1(confusion_matrix(y, predict(params, x)))
    drops = np.zeros(schema.dimension)
    for j in range(schema.dimension):
        total = 0.0
        for rep in range(repeats):
            rng = substream(seed, "perm", j, rep)
            shuffled = x.copy()
            shuffled[:, j] = x[rng.permutation(len(y)), j]
            total += baseline - macro_f1(confusion_matrix(y, predict(params, shuffled)))
        drops[j] = total / repeats
    order = sorted(range(schema.dimension), key=lambda j: (-drops[j], j))
    return [(schema.names[j], float(drops[j])) for j in order]


def write_importance_report(path: str, ranking) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["rank", "feature", "mean_f1_drop"])
        for rank, (name, drop) in enumerate(ranking, start=1):
            writer.writerow([rank, name, f"{drop:.6f}"])
