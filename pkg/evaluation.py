"""
Recognition metrics for GCDR evaluation.

Multi-label view (one-vs-rest per class, macro averaged):
    aAUC   mean ROC-AUC over classes
    aFAR   mean false acceptance rate at per-class thresholds
    aFRR   mean false rejection rate at per-class thresholds
Multi-class view:
    ACC@1  top-1 accuracy
Fairness:
    EO gap mean total-variation distance between P(Y_hat | Y=y, Z=z) and
           P(Y_hat | Y=y, Z=z') over labels y and domain pairs (z, z')

Score matrices are (n, k) with columns indexed by 0-based class ids.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (e.g. a single class)."""


def roc_auc(scores, labels):
    """
    P(score+ > score-) + 0.5 P(tie), via rank statistics.

    Args:
        scores: (n,) real scores
        labels: (n,) binary labels
    """
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise UndefinedMetricError("roc_auc needs both positive and negative samples")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def per_class_auc(scores, labels):
    """One-vs-rest AUC for each class that has positives and negatives."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    result = {}
    skipped = []
    for c in range(scores.shape[1]):
        positives = labels == c
        if positives.all() or not positives.any():
            skipped.append(c)
            continue
        result[c] = roc_auc(scores[:, c], positives)
    return result, skipped


def a_auc(scores, labels, return_skipped=False):
    """
    Unweighted mean of one-vs-rest ROC-AUC over classes present in `labels`.

    With `return_skipped`, also returns the classes that had no positives.
    """
    if len(np.unique(labels)) < 2:
        raise UndefinedMetricError("a_auc needs at least two classes present")
    aucs, skipped = per_class_auc(scores, labels)
    if skipped:
        logger.warning("a_auc skipped classes without positives: %s", skipped)
    value = float(np.mean(list(aucs.values())))
    return (value, skipped) if return_skipped else value


def far_frr(scores, labels, thresholds):
    """
    Macro-averaged false acceptance and false rejection rates.

    Class c accepts a sample iff scores[:, c] >= thresholds[c]. Classes
    without positives (or without negatives) are skipped.

    Returns:
        (aFAR, aFRR)
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    fars, frrs, skipped = [], [], []
    for c in range(scores.shape[1]):
        positives = labels == c
        if positives.all() or not positives.any():
            skipped.append(c)
            continue
        accepted = scores[:, c] >= thresholds[c]
        fars.append(np.sum(accepted & ~positives) / np.sum(~positives))
        frrs.append(np.sum(~accepted & positives) / np.sum(positives))
    if not fars:
        raise UndefinedMetricError("far_frr needs at least one class with positives and negatives")
    if skipped:
        logger.warning("far_frr skipped classes without positives: %s", skipped)
    return float(np.mean(fars)), float(np.mean(frrs))


def select_thresholds(scores, labels, return_skipped=False):
    """
    Per class, the observed score minimizing FAR_c + FRR_c (lowest on ties).

    Classes absent from `labels` fall back to 1/k; with `return_skipped` the
    list of those classes is returned alongside the thresholds.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(scores) == 0:
        raise ValueError("threshold selection needs a nonempty validation set")
    k = scores.shape[1]
    thresholds = np.full(k, 1.0 / k)
    fallback = []
    for c in range(k):
        positives = labels == c
        if not positives.any():
            fallback.append(c)
            continue
        column = scores[:, c]
        candidates = np.unique(column)  # ascending
        n_pos = positives.sum()
        n_neg = len(labels) - n_pos
        best, best_cost = candidates[0], np.inf
        for t in candidates:
            accepted = column >= t
            far = np.sum(accepted & ~positives) / n_neg if n_neg else 0.0
            frr = np.sum(~accepted & positives) / n_pos
            if far + frr < best_cost:
                best, best_cost = t, far + frr
        thresholds[c] = best
    if fallback:
        logger.warning("No validation positives for classes %s; using threshold 1/%d", fallback, k)
    return (thresholds, fallback) if return_skipped else thresholds


def acc_at_1(scores, labels):
    """Fraction of rows whose argmax (first index on ties) equals the label."""
    scores = np.asarray(scores)
    if len(scores) == 0:
        raise ValueError("acc_at_1 needs at least one row")
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


def eo_gap(predictions, labels, domains, return_skipped=False):
    """
    Empirical equality-of-odds gap.

    For every true label y and unordered pair of domains (z, z') that both
    have samples with label y, take the total-variation distance between the
    prediction histograms; return the mean over all such (y, z, z').
    With `return_skipped`, also returns the (label, domain) cells that had no
    samples.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if len(np.unique(domains)) < 2:
        raise UndefinedMetricError("eo_gap needs at least two domains")
    classes = np.union1d(np.unique(predictions), np.unique(labels))

    gaps = []
    unsupported = []
    for y in np.unique(labels):
        histograms = {}
        for z in np.unique(domains):
            cell = predictions[(labels == y) & (domains == z)]
            if len(cell) == 0:
                unsupported.append((int(y), int(z)))
                continue
            histograms[z] = np.array([np.mean(cell == c) for c in classes])
        for z, zp in itertools.combinations(sorted(histograms), 2):
            gaps.append(0.5 * np.abs(histograms[z] - histograms[zp]).sum())
    if unsupported:
        logger.warning("eo_gap skipped %d (label, domain) cells without samples", len(unsupported))
    if not gaps:
        raise UndefinedMetricError("no label is observed under two domains")
    value = float(np.mean(gaps))
    return (value, unsupported) if return_skipped else value


@dataclass
class MetricsReport:
    """Metric values in [0, 1] plus the context they were measured in."""

    auc: float
    far: float
    frr: float
    acc: float
    eo_gap: float = None
    run_id: str = ""
    variant: str = ""
    stage: str = ""
    epoch: int = 0
    split: str = ""
    skipped: dict = field(default_factory=dict, compare=False)  # metric -> classes or cells left out

    def __post_init__(self):
        for name in ("auc", "far", "frr", "acc", "eo_gap"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} = {value} outside [0, 1]")

    @property
    def combined(self):
        return (self.far + self.frr) / 2

    def values(self):
        """(metric name, value) pairs in reporting order; EO gap only when defined."""
        pairs = [("aauc", self.auc), ("afar", self.far), ("afrr", self.frr),
                 ("combined", self.combined), ("acc1", self.acc)]
        if self.eo_gap is not None:
            pairs.append(("eo_gap", self.eo_gap))
        return pairs

    def rows(self):
        return [
            {"run_id": self.run_id, "variant": self.variant, "stage": self.stage,
             "epoch": self.epoch, "split": self.split, "metric": name, "value": value}
            for name, value in self.values()
        ]

    def describe(self):
        text = (f"aAUC {self.auc:.4f} | (aFAR+aFRR)/2 {self.combined:.4f} "
                f"(aFAR {self.far:.4f}, aFRR {self.frr:.4f}) | ACC@1 {self.acc:.4f}")
        if self.eo_gap is not None:
            text += f" | EO gap {self.eo_gap:.4f}"
        return text


def evaluate_scores(scores, labels, thresholds=None, domains=None, eo_pool=None, **tags):
    """
    Build a MetricsReport from a score matrix.

    Args:
        thresholds: per-class thresholds; selected on (scores, labels) if None
        domains: domain ids aligned with `labels` for the EO gap
        eo_pool: optional (predictions, labels, domains) used for the EO gap
            instead of this evaluation set

    Classes and cells the metrics had to leave out end up in `report.skipped`.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    skipped = {}
    if thresholds is None:
        thresholds, skipped["thresholds"] = select_thresholds(scores, labels, return_skipped=True)
    far, frr = far_frr(scores, labels, thresholds)
    auc, skipped["aauc"] = a_auc(scores, labels, return_skipped=True)

    gap = None
    if eo_pool is not None:
        pool = eo_pool
    elif domains is not None:
        pool = (np.argmax(scores, axis=1), labels, domains)
    else:
        pool = None
    if pool is not None:
        try:
            gap, skipped["eo_gap"] = eo_gap(*pool, return_skipped=True)
        except UndefinedMetricError:
            gap = None

    return MetricsReport(
        auc=auc,
        far=far,
        frr=frr,
        acc=acc_at_1(scores, labels),
        eo_gap=gap,
        skipped={name: cells for name, cells in skipped.items() if cells},
        **tags,
    )


CSV_COLUMNS = ["run_id", "variant", "stage", "epoch", "split", "metric", "value"]


def metrics_frame(reports, run_id=None):
    """Long-format table, one row per (report, metric)."""
    rows = []
    for report in reports:
        for row in report.rows():
            if run_id is not None:
                row["run_id"] = run_id
            rows.append(row)
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def write_metrics_csv(path, frame):
    """UTF-8, LF line endings, six decimals."""
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n", encoding="utf-8")
