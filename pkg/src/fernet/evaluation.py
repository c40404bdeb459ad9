"""Top-k accuracy, confusion matrices, and K-fold aggregation.

All metrics are percentages. Confusion matrices are row-normalized with
rows = actual class, columns = predicted class; a class absent from the
labels yields an all-zero row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .errors import ConfigError, DataError, LabelError, RangeError


@dataclass(frozen=True)
class Metrics:
    """Evaluation results; sd and per-fold fields are set by aggregation."""

    top1: float
    top2: float
    confusion: np.ndarray
    top1_sd: float | None = None
    top2_sd: float | None = None
    fold_top1: tuple | None = None
    fold_top2: tuple | None = None


def top_k_accuracy(probs, labels, k) -> float:
    """Percent of rows whose label is among the k most probable classes.

    Probability ties rank the lower class index first (stable sort on
    descending probability), so results are deterministic.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    n, num_classes = probs.shape
    if not 1 <= k <= num_classes:
        raise RangeError(f"k must lie in [1, {num_classes}], got {k}")
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    if not np.isfinite(probs).all():
        raise DataError("probabilities must be finite")
    ranked = np.argsort(-probs, axis=1, kind="stable")
    hits = (ranked[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean() * 100.0)


def predict(probs) -> np.ndarray:
    """Most probable class per row; ties go to the lower class index."""
    return np.argmax(np.asarray(probs), axis=1)


def confusion_matrix(predictions, labels, num_classes=data_mod.NUM_CLASSES):
    """Row-normalized percent confusion matrix; zero rows for absent classes."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise DataError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size and not (
        0 <= predictions.min() and predictions.max() < num_classes
        and 0 <= labels.min() and labels.max() < num_classes
    ):
        raise LabelError(f"class values must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.float64)
    np.add.at(counts, (labels, predictions), 1.0)
    row_totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        percent = np.where(row_totals > 0, 100.0 * counts / row_totals, 0.0)
    return percent


def evaluate(net, dataset, views=1, batch_size=250) -> Metrics:
    """Forward the whole dataset and compute top-1/top-2/confusion.

    ``views=1`` scores the prepared image; ``views=11`` averages softmax
    outputs over the original plus the ten crop/flip views.  Read-only
    with respect to the network.
    """
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    if views not in (1, 11):
        raise ConfigError(f"views must be 1 or 11, got {views}")
    num_classes = net.config.num_classes
    probs = np.empty((len(dataset), num_classes), dtype=np.float64)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.images[start:start + batch_size]
        if views == 1:
            batch_probs = net.predict_probs(chunk).astype(np.float64)
        else:
            batch_probs = np.zeros((chunk.shape[0], num_classes), dtype=np.float64)
            for v in range(11):
                viewed = data_mod.apply_views(
                    chunk, np.full(chunk.shape[0], v, dtype=np.int64))
                batch_probs += net.predict_probs(viewed).astype(np.float64)
            batch_probs /= 11.0
        probs[start:start + chunk.shape[0]] = batch_probs
    labels = dataset.labels
    return Metrics(
        top1=top_k_accuracy(probs, labels, 1),
        top2=top_k_accuracy(probs, labels, min(2, num_classes)),
        confusion=confusion_matrix(predict(probs), labels, num_classes),
    )


def aggregate_folds(fold_metrics) -> Metrics:
    """Mean and population standard deviation across folds.

    Confusion matrices are averaged entrywise, then each nonzero row is
    renormalized to sum to 100 (guards folds with absent classes).
    """
    fold_metrics = list(fold_metrics)
    if not fold_metrics:
        raise DataError("no folds to aggregate")
    top1 = np.array([m.top1 for m in fold_metrics], dtype=np.float64)
    top2 = np.array([m.top2 for m in fold_metrics], dtype=np.float64)
    confusion = np.mean([m.confusion for m in fold_metrics], axis=0)
    row_totals = confusion.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        confusion = np.where(row_totals > 0, 100.0 * confusion / row_totals, 0.0)
    return Metrics(
        top1=float(top1.mean()), top2=float(top2.mean()),
        confusion=confusion,
        top1_sd=float(top1.std()), top2_sd=float(top2.std()),
        fold_top1=tuple(float(v) for v in top1),
        fold_top2=tuple(float(v) for v in top2),
    )


def format_report(metrics: Metrics, title="Evaluation") -> str:
    """Human-readable accuracy plus the actual-by-predicted confusion table."""
    codes = data_mod.LABEL_CODES[:metrics.confusion.shape[0]]
    lines = [title, "=" * len(title)]
    if metrics.top1_sd is not None:
        lines.append(f"Top-1: {metrics.top1:.1f}±{metrics.top1_sd:.1f}%")
        lines.append(f"Top-2: {metrics.top2:.1f}±{metrics.top2_sd:.1f}%")
    else:
        lines.append(f"Top-1: {metrics.top1:.1f}%")
        lines.append(f"Top-2: {metrics.top2:.1f}%")
    if metrics.fold_top1 is not None:
        folds = ", ".join(f"{v:.1f}" for v in metrics.fold_top1)
        lines.append(f"Per-fold top-1: {folds}")
    lines.append("")
    lines.append("Confusion (%, rows = actual, columns = predicted)")
    header = "      " + "".join(f"{c:>7}" for c in codes)
    lines.append(header)
    for i, code in enumerate(codes):
        row = "".join(f"{metrics.confusion[i, j]:7.1f}" for j in range(len(codes)))
        lines.append(f"{code:>4}  {row}")
    return "\n".join(lines) + "\n"


def flat_report(metrics: Metrics) -> str:
    """Machine-readable ``metric,value`` lines, one per line."""
    codes = data_mod.LABEL_CODES[:metrics.confusion.shape[0]]
    lines = [f"top1,{metrics.top1:.6f}", f"top2,{metrics.top2:.6f}"]
    if metrics.top1_sd is not None:
        lines.append(f"top1_sd,{metrics.top1_sd:.6f}")
        lines.append(f"top2_sd,{metrics.top2_sd:.6f}")
    if metrics.fold_top1 is not None:
        for i, (t1, t2) in enumerate(zip(metrics.fold_top1, metrics.fold_top2)):
            lines.append(f"fold{i}_top1,{t1:.6f}")
            lines.append(f"fold{i}_top2,{t2:.6f}")
    for i, actual in enumerate(codes):
        for j, predicted in enumerate(codes):
            lines.append(f"confusion_{actual}_{predicted},{metrics.confusion[i, j]:.6f}")
    return "\n".join(lines) + "\n"
