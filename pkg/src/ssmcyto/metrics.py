"""Confusion matrices, support-weighted classification metrics, reports.

Weighted averages are the reported contract: each per-class metric is
averaged with weight support_c / N.  For recall this collapses to plain
accuracy by algebra, which doubles as a self-check on every report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ConfigError, ContractError, FormatError


@dataclass
class MetricsReport:
    accuracy: float
    weighted_precision: float
    weighted_sensitivity: float
    weighted_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray
    notes: list = field(default_factory=list)


def confusion_matrix(true_labels, predicted_labels, n_classes: int) -> np.ndarray:
    """M[i, j] = number of samples with true class i predicted as j."""
    t = np.asarray(true_labels, dtype=int).ravel()
    p = np.asarray(predicted_labels, dtype=int).ravel()
    if t.shape != p.shape:
        raise ContractError(
            f"label arrays disagree in length: {t.size} true vs {p.size} predicted"
        )
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            bad = arr[(arr < 0) | (arr >= n_classes)][0]
            raise ContractError(
                f"{name} label {bad} outside [0, {n_classes})"
            )
    m = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(m, (t, p), 1)
    return m


def weighted_metrics(confusion) -> MetricsReport:
    """Per-class precision/recall/F1 and their support-weighted averages.

    A class nobody predicted gets precision 0 (noted in the report); a
    class with zero support contributes nothing to the weighted sums.
    """
    m = np.asarray(confusion)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"confusion matrix must be square, got shape {m.shape}")
    if (m < 0).any():
        raise ContractError("confusion matrix entries must be non-negative")
    n = int(m.sum())
    if n == 0:
        raise ContractError("cannot compute metrics from an empty confusion matrix")

    diag = np.diag(m).astype(float)
    support = m.sum(axis=1)
    col = m.sum(axis=0)
    notes = [
        f"class {c}: no predictions, precision set to 0"
        for c in np.flatnonzero(col == 0)
    ]

    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, diag / np.maximum(col, 1), 0.0)
        recall = np.where(support > 0, diag / np.maximum(support, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)

    w = support / n
    return MetricsReport(
        accuracy=float(diag.sum() / n),
        weighted_precision=float(w @ precision),
        weighted_sensitivity=float(w @ recall),
        weighted_f1=float(w @ f1),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        confusion=m,
        notes=notes,
    )


def report_to_dict(report: MetricsReport, classes, model_id: str, split: str,
                   timestamp: str = None) -> dict:
    k = report.confusion.shape[0]
    if len(classes) != k:
        raise ConfigError(f"{len(classes)} class names for a {k}x{k} confusion matrix")
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat()
    return {
        "accuracy": report.accuracy,
        "classes": list(classes),
        "confusion": report.confusion.astype(int).tolist(),
        "model": model_id,
        "notes": list(report.notes),
        "per_class": [
            {
                "class": classes[c],
                "f1": float(report.f1[c]),
                "precision": float(report.precision[c]),
                "recall": float(report.recall[c]),
                "support": int(report.support[c]),
            }
            for c in range(k)
        ],
        "split": split,
        "timestamp": timestamp,
        "weighted_f1": report.weighted_f1,
        "weighted_precision": report.weighted_precision,
        "weighted_sensitivity": report.weighted_sensitivity,
    }


def emit_report(report: MetricsReport, path, classes, model_id: str, split: str,
                timestamp: str = None):
    """Write the report as JSON with stable key order.

    Pass an explicit timestamp to make two emissions byte-identical.
    """
    payload = report_to_dict(report, classes, model_id, split, timestamp)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise FormatError(f"cannot write report to {path!r}: {exc}") from exc


def read_report(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read report {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"report {path!r} is not valid JSON: {exc}") from exc


def confusion_to_csv(confusion, path, classes):
    """Row-per-true-class CSV with a header of predicted-class columns."""
    m = np.asarray(confusion)
    if len(classes) != m.shape[0]:
        raise ConfigError(f"{len(classes)} class names for a {m.shape[0]}x{m.shape[1]} matrix")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + list(classes))
            for c, row in enumerate(m.astype(int)):
                writer.writerow([classes[c]] + row.tolist())
    except OSError as exc:
        raise FormatError(f"cannot write confusion CSV to {path!r}: {exc}") from exc
