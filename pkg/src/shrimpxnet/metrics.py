"""Confusion matrices, per-class reports, one-vs-rest ROC/AUC and bootstrap intervals."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

Z_99 = 2.576


def round_half_up(value, places=3):
    if not np.isfinite(value):
        return value
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


def confusion(preds, labels, num_classes):
    """``M[i, j]`` counts samples with true class ``i`` predicted as ``j``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    if preds.size and (min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= num_classes):
        raise ValueError(f"class indices must be in [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassificationReport:
    per_class: list
    accuracy: float
    macro: ClassMetrics
    weighted: ClassMetrics
    zero_division: list = field(default_factory=list)  # class indices with an empty row or column


def classification_report(matrix):
    m = np.asarray(matrix, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(m)
    col, row = m.sum(axis=0), m.sum(axis=1)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    per_class = [ClassMetrics(float(p), float(r), float(f), int(s)) for p, r, f, s in zip(precision, recall, f1, row)]
    weights = row / total
    macro = ClassMetrics(float(precision.mean()), float(recall.mean()), float(f1.mean()), int(total))
    weighted = ClassMetrics(float(weights @ precision), float(weights @ recall), float(weights @ f1), int(total))
    flags = [i for i in range(len(tp)) if col[i] == 0 or row[i] == 0]
    return ClassificationReport(per_class, float(tp.sum() / total), macro, weighted, flags)


def roc_curve(scores, labels, class_index):
    """One-vs-rest ROC points ``(fpr, tpr)`` over descending unique thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels) == class_index
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC undefined for class {class_index}: need both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, pos = scores[order], positive[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(pos)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return fpr, tpr, s[last_of_run]


def roc_auc(scores, labels, class_index):
    """Returns ``(fpr, tpr, auc)`` with the area by the trapezoid rule."""
    fpr, tpr, _ = roc_curve(scores, labels, class_index)
    return fpr, tpr, float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


@dataclass
class BootstrapCI:
    iterations: int
    mean: float
    std: float
    z: float
    low: float
    high: float


def interval(mean, std, z=Z_99):
    """``[mean - z std, mean + z std]`` rounded half-up to 3 decimals."""
    return round_half_up(mean - z * std), round_half_up(mean + z * std)


def bootstrap_ci(preds, labels, iterations=1000, z=Z_99, seed=0):
    """Percentile-free bootstrap: resample the test set, take mean and sample std of accuracy."""
    correct = (np.asarray(preds) == np.asarray(labels)).astype(np.float64)
    n = len(correct)
    if n == 0:
        raise ValueError("bootstrap needs a non-empty test set")
    rng = np.random.default_rng(seed)
    accs = np.empty(iterations)
    for i in range(iterations):
        accs[i] = correct[rng.integers(0, n, n)].mean()
    mean = float(accs.mean())
    std = float(accs.std(ddof=1)) if iterations > 1 else 0.0
    low, high = interval(mean, std, z)
    return BootstrapCI(iterations, mean, std, z, low, high)


@dataclass
class EvalReport:
    class_names: list
    confusion: np.ndarray
    report: ClassificationReport
    roc: dict  # class name -> {"fpr": [...], "tpr": [...], "auc": float} (or None when undefined)
    bootstrap: BootstrapCI
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        rnd = lambda v: round_half_up(v, 6)  # noqa: E731
        per_class = {}
        for name, cm in zip(self.class_names, self.report.per_class):
            per_class[name] = {"precision": rnd(cm.precision), "recall": rnd(cm.recall), "f1": rnd(cm.f1),
                               "support": cm.support}

        def avg(cm):
            return {"precision": rnd(cm.precision), "recall": rnd(cm.recall), "f1": rnd(cm.f1), "support": cm.support}

        b = self.bootstrap
        out = {
            "class_names": list(self.class_names),
            "confusion": self.confusion.tolist(),
            "per_class": per_class,
            "macro": avg(self.report.macro),
            "weighted": avg(self.report.weighted),
            "accuracy": rnd(self.report.accuracy),
            "zero_division_classes": [self.class_names[i] for i in self.report.zero_division],
            "roc": self.roc,
            "bootstrap_ci": {"iterations": b.iterations, "mean": rnd(b.mean), "std": rnd(b.std), "z": b.z,
                             "low": b.low, "high": b.high},
        }
        out.update(self.extra)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def text_table(self):
        """Fixed-width classification report in the usual precision/recall/F1/support layout."""
        width = max([len(n) for n in self.class_names] + [12])
        lines = [f"{'':<{width}}  {'Precision':>9}  {'Recall':>9}  {'F1-Score':>9}  {'Support':>7}"]
        for name, cm in zip(self.class_names, self.report.per_class):
            lines.append(f"{name:<{width}}  {cm.precision:>9.2f}  {cm.recall:>9.2f}  {cm.f1:>9.2f}  {cm.support:>7d}")
        total = self.report.macro.support
        lines.append(f"{'Accuracy':<{width}}  {'':>9}  {'':>9}  {self.report.accuracy:>9.2f}  {total:>7d}")
        for label, cm in (("Macro Avg", self.report.macro), ("Weighted Avg", self.report.weighted)):
            lines.append(f"{label:<{width}}  {cm.precision:>9.2f}  {cm.recall:>9.2f}  {cm.f1:>9.2f}  {cm.support:>7d}")
        b = self.bootstrap
        lines.append("")
        lines.append(f"Bootstrap ({b.iterations} iterations): mean={b.mean:.3f} std={b.std:.4f} "
                     f"z={b.z} CI=[{b.low:.3f}, {b.high:.3f}]")
        return "\n".join(lines) + "\n"


def build_report(probs, labels, class_names, iterations=1000, seed=0, z=Z_99):
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    preds = probs.argmax(axis=1)
    k = len(class_names)
    matrix = confusion(preds, labels, k)
    roc = {}
    for c, name in enumerate(class_names):
        try:
            fpr, tpr, auc = roc_auc(probs[:, c], labels, c)
            roc[name] = {"fpr": [round_half_up(v, 6) for v in fpr], "tpr": [round_half_up(v, 6) for v in tpr],
                         "auc": round_half_up(auc, 6)}
        except ValueError:
            roc[name] = None
    return EvalReport(list(class_names), matrix, classification_report(matrix), roc,
                      bootstrap_ci(preds, labels, iterations, z, seed))
