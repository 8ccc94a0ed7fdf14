"""Binary prognostic metrics: AUC, accuracy, sensitivity, specificity, weighted Youden."""
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check(y_true, scores):
    y = np.asarray(y_true).astype(int).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise MetricError(f"{len(y)} labels vs {len(s)} scores")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    if y.min() == y.max():
        raise MetricError("both classes must be present")
    return y, s


def auc(y_true, scores):
    """Mann-Whitney AUC: P(positive outranks negative), ties counted as one half."""
    y, s = _check(y_true, scores)
    ranks = rankdata(s)
    n1 = y.sum()
    n0 = len(y) - n1
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def confusion_metrics(y_true, p1, threshold=0.5):
    """(accuracy, sensitivity, specificity); class 1 is positive and p1 >= threshold predicts it."""
    y, p = _check(y_true, p1)
    pred = (p >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    return (tp + tn) / len(y), tp / (tp + fn), tn / (tn + fp)


def weighted_youden(sensitivity, specificity, w, form="linear"):
    """Weighted Youden index.

    ``linear``: w*Se + (1-w)*Sp, the convention that reproduces published
    tables reporting J_w on the same scale as Se/Sp. ``classic``:
    2*(w*Se + (1-w)*Sp) - 1.
    """
    if not 0.0 <= w <= 1.0:
        raise MetricError(f"weight must lie in [0, 1], got {w}")
    j = w * sensitivity + (1.0 - w) * specificity
    if form == "linear":
        return j
    if form == "classic":
        return 2.0 * j - 1.0
    raise MetricError(f"unknown Youden form {form!r}")


@dataclass
class MetricsReport:
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    youden: dict = field(default_factory=dict)   # w -> J_w

    def as_row(self):
        row = {"auc": self.auc, "accuracy": self.accuracy,
               "sensitivity": self.sensitivity, "specificity": self.specificity}
        for w, j in self.youden.items():
            row[f"j_{w:g}"] = j
        return row


def evaluate(y_true, p1, weights=(0.5, 0.6), threshold=0.5):
    acc, se, sp = confusion_metrics(y_true, p1, threshold)
    return MetricsReport(auc(y_true, p1), acc, se, sp,
                         {w: weighted_youden(se, sp, w) for w in weights})
