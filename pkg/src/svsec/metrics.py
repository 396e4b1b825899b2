"""Classification metrics and Table-style report rendering.

Precision, recall and F1 are macro-averaged with 0/0 taken as 0. AUC is the
one-vs-rest Mann-Whitney statistic, macro-averaged over classes that have at
least one positive and one negative sample.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError

log = logging.getLogger(__name__)

COLUMNS = ("f1", "accuracy", "auc", "recall", "precision")
HEADERS = ("F1-score", "Accuracy", "AUC", "Recall", "Precision")


@dataclass
class PredictionSet:
    labels: np.ndarray  # [N] int
    probs: np.ndarray  # [N, K]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or len(self.labels) != len(self.probs):
            raise MetricError(f"labels {self.labels.shape} and probs {self.probs.shape} disagree")

    @property
    def preds(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EvalReport:
    f1: float
    accuracy: float
    auc: float
    recall: float
    precision: float
    per_class: dict = field(default_factory=dict)
    confusion: np.ndarray | None = None

    def row(self) -> dict:
        """Column values in display units: percentages except AUC."""
        return {
            "f1": round(100 * self.f1, 2),
            "accuracy": round(100 * self.accuracy, 2),
            "auc": round(self.auc, 3),
            "recall": round(100 * self.recall, 2),
            "precision": round(100 * self.precision, 2),
        }

    def formatted(self) -> list:
        """Display strings in column order, e.g. ``["100.00", "100.00", "1.000", ...]``."""
        vals = self.row()
        return [_fmt(c, vals[c]) for c in COLUMNS]


def confusion_matrix(labels, preds, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.size == 0:
        raise MetricError("confusion matrix of an empty prediction set")
    k = num_classes if num_classes is not None else int(max(labels.max(), preds.max())) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def per_class_prf(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def prf1_macro(cm: np.ndarray):
    """``(precision, recall, f1, accuracy)`` from a confusion matrix."""
    cm = np.asarray(cm)
    p, r, f = per_class_prf(cm)
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else 0.0
    return float(p.mean()), float(r.mean()), float(f.mean()), acc


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC from average ranks; ties count one half."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(preds: PredictionSet) -> np.ndarray:
    """One-vs-rest AUC per class; NaN where a class lacks positives or negatives."""
    out = np.full(preds.num_classes, np.nan)
    for k in range(preds.num_classes):
        pos = preds.labels == k
        if pos.all() or not pos.any():
            log.warning("class %d has no %s samples; excluded from AUC", k,
                        "negative" if pos.all() else "positive")
            continue
        out[k] = binary_auc(preds.probs[:, k], pos)
    return out


def auc_ovr_macro(preds: PredictionSet) -> float:
    aucs = per_class_auc(preds)
    if np.isnan(aucs).all():
        raise MetricError("every class was excluded from AUC")
    return float(np.nanmean(aucs))


def evaluate(preds: PredictionSet, allow_missing_auc: bool = False) -> EvalReport:
    if len(preds) == 0:
        raise MetricError("cannot evaluate an empty prediction set")
    cm = confusion_matrix(preds.labels, preds.preds, preds.num_classes)
    p, r, f = per_class_prf(cm)
    aucs = per_class_auc(preds)
    if np.isnan(aucs).all():
        if not allow_missing_auc:
            raise MetricError("every class was excluded from AUC")
        auc = float("nan")
    else:
        auc = float(np.nanmean(aucs))
    prec, rec, f1, acc = prf1_macro(cm)
    return EvalReport(
        f1=f1, accuracy=acc, auc=auc, recall=rec, precision=prec,
        per_class={"precision": p.tolist(), "recall": r.tolist(), "f1": f.tolist(),
                   "auc": [None if np.isnan(a) else float(a) for a in aucs]},
        confusion=cm,
    )


def render_report(rows, fmt: str = "text") -> str:
    """Render one or more reports in Table-1 column order.

    ``rows`` is an :class:`EvalReport`, or a list of ``(label, EvalReport)``
    pairs. Percentages carry 2 decimals and AUC 3. The CSV header is fixed to
    ``f1,accuracy,auc,recall,precision``; labels appear in text and JSON only.
    """
    if isinstance(rows, EvalReport):
        rows = [("", rows)]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for _, rep in rows:
            w.writerow(rep.formatted())
        return buf.getvalue()
    if fmt == "json":
        docs = []
        for label, rep in rows:
            vals = {k: (None if v != v else v) for k, v in rep.row().items()}
            doc = {"method": label, **vals, "per_class": rep.per_class}
            if rep.confusion is not None:
                doc["confusion"] = rep.confusion.tolist()
            docs.append(doc)
        return json.dumps(docs, indent=2) + "\n"
    if fmt == "text":
        width = max([len("Method")] + [len(lab) for lab, _ in rows])
        lines = ["  ".join([f"{'Method':<{width}}"] + [f"{h:>9}" for h in HEADERS])]
        for label, rep in rows:
            lines.append("  ".join([f"{label:<{width}}"] + [f"{v:>9}" for v in rep.formatted()]))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def _fmt(col: str, value: float) -> str:
    if value != value:
        return "nan"
    return f"{value:.3f}" if col == "auc" else f"{value:.2f}"
