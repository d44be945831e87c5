"""Ranking metrics (AP, mAP), thresholded precision/recall/F1, accuracy,
and the class-prior random baseline, plus CSV/table report rendering.

Average precision is the non-interpolated variant: items are ranked by
descending score with ties broken by original index ascending, and AP is
the mean of precision-at-rank over the relevant items.  mAP averages AP
over classes that have at least one relevant item; classes without any are
excluded with a warning.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from chromatile.errors import DataError, UsageError
from chromatile.seeding import rng_for


def average_precision(scores, relevance) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    relevant = np.asarray(relevance).ravel().astype(bool)
    if scores.shape != relevant.shape:
        raise UsageError("scores and relevance must have equal lengths")
    if scores.size == 0 or not relevant.any():
        raise UsageError("average precision needs at least one relevant item")
    order = np.argsort(-scores, kind="stable")
    hits = np.cumsum(relevant[order])
    ranks = np.arange(1, scores.size + 1)
    at_relevant = relevant[order]
    return float((hits[at_relevant] / ranks[at_relevant]).mean())


def mean_average_precision(scores, relevance) -> float:
    """Unweighted mean of per-class AP over (N, K) score/relevance columns."""
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevance).astype(bool)
    if scores.ndim != 2 or scores.shape != relevant.shape:
        raise UsageError("mean_average_precision expects matching (N, K) arrays")
    values = []
    skipped = []
    for k in range(scores.shape[1]):
        if relevant[:, k].any():
            values.append(average_precision(scores[:, k], relevant[:, k]))
        else:
            skipped.append(k)
    if skipped:
        warnings.warn(
            f"mAP excludes {len(skipped)} class(es) without relevant items: "
            f"{skipped}"
        )
    if not values:
        raise UsageError("mAP needs at least one class with a relevant item")
    return float(np.mean(values))


@dataclass(frozen=True)
class ClassificationScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float


def _safe_ratio(numerator, denominator, what):
    if denominator == 0:
        if numerator != 0:
            raise AssertionError("ratio numerator without denominator")
        warnings.warn(f"degenerate {what}: 0/0 reported as 0")
        return 0.0
    return numerator / denominator


def _f1(p, r):
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r)


def precision_recall_f1(probabilities, labels, threshold: float = 0.5):
    """Confusion-matrix scores per class plus micro/macro aggregates."""
    probs = np.asarray(probabilities, dtype=np.float64)
    truth = np.asarray(labels).astype(bool)
    if probs.ndim == 1:
        probs = probs[:, None]
    if truth.ndim == 1:
        truth = truth[:, None]
    if probs.shape != truth.shape:
        raise UsageError("probabilities and labels must have equal shapes")
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise UsageError("probabilities must lie in [0, 1]")
    predicted = probs >= threshold
    tp = (predicted & truth).sum(axis=0).astype(np.float64)
    fp = (predicted & ~truth).sum(axis=0).astype(np.float64)
    fn = (~predicted & truth).sum(axis=0).astype(np.float64)
    k = probs.shape[1]
    precision = np.array(
        [_safe_ratio(tp[i], tp[i] + fp[i], f"precision (class {i})") for i in range(k)]
    )
    recall = np.array(
        [_safe_ratio(tp[i], tp[i] + fn[i], f"recall (class {i})") for i in range(k)]
    )
    f1 = np.array([_f1(precision[i], recall[i]) for i in range(k)])
    micro_p = _safe_ratio(tp.sum(), tp.sum() + fp.sum(), "micro precision")
    micro_r = _safe_ratio(tp.sum(), tp.sum() + fn.sum(), "micro recall")
    return ClassificationScores(
        precision=precision,
        recall=recall,
        f1=f1,
        micro_precision=micro_p,
        micro_recall=micro_r,
        micro_f1=_f1(micro_p, micro_r),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def accuracy(predicted, true) -> float:
    predicted = np.asarray(predicted).ravel()
    true = np.asarray(true).ravel()
    if predicted.shape != true.shape:
        raise UsageError("accuracy expects equal-length class sequences")
    if predicted.size == 0:
        raise UsageError("accuracy of an empty sequence is undefined")
    return float((predicted == true).mean())


class RandomPriorClassifier:
    """Samples a class per item from the empirical training priors."""

    def __init__(self, train_labels, seed: int):
        labels = np.asarray(train_labels).ravel()
        if labels.size == 0:
            raise DataError("random prior classifier needs training labels")
        self.classes, counts = np.unique(labels, return_counts=True)
        self.priors = counts / counts.sum()
        self._rng = rng_for(seed, "random-prior")

    def predict(self, n_items: int) -> np.ndarray:
        if n_items < 0:
            raise UsageError("cannot predict a negative number of items")
        return self._rng.choice(self.classes, size=n_items, p=self.priors)


def random_prior_classifier(train_labels, seed: int) -> RandomPriorClassifier:
    return RandomPriorClassifier(train_labels, seed)


# ----------------------------------------------------------------- reporting


def render_table(rows, columns) -> str:
    """Aligned-column text table; cells are stringified values."""
    grid = [[str(row.get(col, "")) for col in columns] for row in rows]
    widths = [
        max(len(col), *(len(line[i]) for line in grid)) if grid else len(col)
        for i, col in enumerate(columns)
    ]
    header = "  ".join(col.ljust(widths[i]) for i, col in enumerate(columns))
    rule = "  ".join("-" * w for w in widths)
    body = [
        "  ".join(line[i].ljust(widths[i]) for i in range(len(columns)))
        for line in grid
    ]
    return "\n".join([header, rule, *body]) + "\n"


def render_csv(rows, columns) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(str(row.get(col, "")) for col in columns))
    return "\n".join(lines) + "\n"


def parse_csv(text: str):
    """Inverse of render_csv for the simple unquoted tables written here."""
    lines = [line for line in text.splitlines() if line]
    if not lines:
        return [], []
    columns = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(columns):
            raise DataError(f"malformed metrics row {line!r}")
        rows.append(dict(zip(columns, cells)))
    return rows, columns
