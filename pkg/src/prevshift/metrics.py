"""Confusion matrices and classification metrics, including Expected Cost.

Counting metrics are computed from confusion counts. The private ``_*_counts``
helpers accept a stack of count matrices with shape ``(..., C, C)`` so that a
threshold sweep can score every candidate cutoff at once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import check_costs, check_prevalence, zero_one_costs
from .errors import (
    DegenerateDataError,
    DimensionMismatchError,
    InvalidSpecError,
    MissingClassRatesError,
    NonConvergenceWarning,
    RuleArityMismatchError,
)

METRICS = ("accuracy", "f1", "mcc", "balanced_accuracy", "auroc", "expected_cost", "cwce", "brier")
COUNTING_METRICS = ("accuracy", "f1", "mcc", "balanced_accuracy", "expected_cost")
LOWER_IS_BETTER = frozenset({"expected_cost", "cwce", "brier"})
ALIASES = {"ec": "expected_cost", "acc": "accuracy", "ba": "balanced_accuracy", "bs": "brier", "auc": "auroc"}
DEFAULT_BINS = 15


@dataclass(frozen=True, eq=False)
class ConfusionSummary:
    """Counts (row = true class, column = predicted) and row-normalized rates.

    ``valid[k]`` is False when class k never occurs; its rates row is zero.
    """

    counts: np.ndarray
    rates: np.ndarray
    valid: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, n_classes: int) -> ConfusionSummary:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DimensionMismatchError(f"preds {preds.shape} and labels {labels.shape} differ")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DimensionMismatchError(f"{name} outside [0, {n_classes})")
    counts = np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return summary_from_counts(counts)


def summary_from_counts(counts) -> ConfusionSummary:
    counts = np.asarray(counts, dtype=np.int64)
    rows = counts.sum(axis=1)
    valid = rows > 0
    rates = np.zeros(counts.shape, dtype=np.float64)
    rates[valid] = counts[valid] / rows[valid, None]
    return ConfusionSummary(counts, rates, valid)


# ---------------------------------------------------------------------------
# Vectorized counting metrics over (..., C, C) stacks. Each returns (value, degenerate).
# ---------------------------------------------------------------------------


def _accuracy_counts(counts):
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=(-2, -1))
    trace = np.trace(counts, axis1=-2, axis2=-1)
    degenerate = total == 0
    return np.where(degenerate, 0.0, trace / np.where(degenerate, 1.0, total)), degenerate


def _balanced_accuracy_counts(counts):
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=-1)
    diag = np.diagonal(counts, axis1=-2, axis2=-1)
    valid = rows > 0
    recall = np.where(valid, diag / np.where(valid, rows, 1.0), 0.0)
    n_valid = valid.sum(axis=-1)
    degenerate = n_valid == 0
    return np.where(degenerate, 0.0, recall.sum(axis=-1) / np.maximum(n_valid, 1)), degenerate


def _f1_one_vs_rest(counts, k):
    counts = np.asarray(counts, dtype=np.float64)
    tp = counts[..., k, k]
    fn = counts[..., k, :].sum(axis=-1) - tp
    fp = counts[..., :, k].sum(axis=-1) - tp
    denom = 2 * tp + fp + fn
    degenerate = denom == 0
    return np.where(degenerate, 0.0, 2 * tp / np.where(degenerate, 1.0, denom)), degenerate


def _f1_counts(counts, positive_class=1, average="binary"):
    c = np.shape(counts)[-1]
    if average == "binary":
        if c != 2:
            raise RuleArityMismatchError("binary F1 needs two classes; use average='macro'")
        return _f1_one_vs_rest(counts, positive_class)
    if average != "macro":
        raise InvalidSpecError(f"unknown F1 average {average!r}")
    parts = [_f1_one_vs_rest(counts, k) for k in range(c)]
    value = sum(p[0] for p in parts) / c
    degenerate = np.logical_or.reduce([p[1] for p in parts])
    return value, degenerate


def _mcc_counts(counts):
    # Multiclass correlation form; reduces to (TP*TN - FP*FN)/sqrt(...) for C = 2.
    counts = np.asarray(counts, dtype=np.float64)
    s = counts.sum(axis=(-2, -1))
    correct = np.trace(counts, axis1=-2, axis2=-1)
    t = counts.sum(axis=-1)
    p = counts.sum(axis=-2)
    cov_yp = correct * s - np.sum(p * t, axis=-1)
    cov_pp = s**2 - np.sum(p * p, axis=-1)
    cov_yy = s**2 - np.sum(t * t, axis=-1)
    denom = np.sqrt(cov_pp * cov_yy)
    degenerate = denom == 0
    return np.where(degenerate, 0.0, cov_yp / np.where(degenerate, 1.0, denom)), degenerate


def _expected_cost_counts(counts, prevalence=None, costs=None):
    counts = np.asarray(counts, dtype=np.float64)
    c = counts.shape[-1]
    rows = counts.sum(axis=-1)
    valid = rows > 0
    rates = np.where(valid[..., None], counts / np.where(valid, rows, 1.0)[..., None], 0.0)
    costs = zero_one_costs(c) if costs is None else check_costs(costs, c)
    if prevalence is None:
        total = rows.sum(axis=-1, keepdims=True)
        prev = rows / np.where(total == 0, 1.0, total)
    else:
        prev = np.broadcast_to(check_prevalence(prevalence, n_classes=c), rows.shape)
    if np.any((prev > 0) & ~valid):
        missing = sorted(set(np.argwhere((prev > 0) & ~valid)[:, -1].tolist()))
        raise MissingClassRatesError(f"class(es) {missing} have prevalence > 0 but no samples to estimate rates")
    per_class = np.sum(costs * rates, axis=-1)
    return np.sum(prev * per_class, axis=-1), np.zeros(rows.shape[:-1], dtype=bool)


def counting_metric(name: str, counts, *, positive_class=1, average=None, prevalence=None, costs=None):
    """Evaluate a counting metric on one count matrix or a stack; returns (value, degenerate)."""
    c = np.shape(counts)[-1]
    if name == "accuracy":
        return _accuracy_counts(counts)
    if name == "balanced_accuracy":
        return _balanced_accuracy_counts(counts)
    if name == "f1":
        return _f1_counts(counts, positive_class, average or ("binary" if c == 2 else "macro"))
    if name == "mcc":
        return _mcc_counts(counts)
    if name == "expected_cost":
        return _expected_cost_counts(counts, prevalence, costs)
    raise InvalidSpecError(f"{name!r} is not a counting metric")


# ---------------------------------------------------------------------------
# Public scalar metrics
# ---------------------------------------------------------------------------


def expected_cost(summary: ConfusionSummary, prev=None, cost=None) -> float:
    """Sum over classes of prev(k) * sum_j cost(k, j) * rates(k, j).

    ``prev`` defaults to the empirical prevalence of the evaluated data, in
    which case zero-one costs give exactly ``1 - accuracy``. Passing the
    expected deployment prevalence instead gives a deployment estimate from
    development data.
    """
    return float(_expected_cost_counts(summary.counts, prev, cost)[0])


def accuracy(summary: ConfusionSummary) -> float:
    return float(_accuracy_counts(summary.counts)[0])


def balanced_accuracy(summary: ConfusionSummary) -> float:
    return float(_balanced_accuracy_counts(summary.counts)[0])


def f1(summary: ConfusionSummary, positive_class: int = 1, average: str | None = None) -> float:
    """Positive-class F1 for binary tasks, macro-F1 otherwise (or when asked)."""
    avg = average or ("binary" if summary.n_classes == 2 else "macro")
    return float(_f1_counts(summary.counts, positive_class, avg)[0])


def mcc(summary: ConfusionSummary) -> float:
    return float(_mcc_counts(summary.counts)[0])


def _positive_scores(scores, positive_class):
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        return s
    if s.shape[1] != 2:
        raise RuleArityMismatchError("AUROC is defined here for binary tasks only")
    return s[:, positive_class]


def auroc(scores, labels, positive_class: int = 1) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with mid-ranks for ties."""
    s = _positive_scores(scores, positive_class)
    y = np.asarray(labels) == positive_class
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("AUROC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def cwce(scores, labels, bins: int = DEFAULT_BINS) -> float:
    """Class-wise calibration error with equal-width bins.

    For every class k the samples are binned by s(k); each bin contributes
    |mean s(k) - frequency of class k| weighted by its share of samples. The
    per-class errors are averaged uniformly over classes.
    """
    if bins < 1:
        raise InvalidSpecError("bins must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = s.shape
    if n == 0:
        raise DegenerateDataError("calibration error of an empty set")
    per_class = np.empty(c)
    for k in range(c):
        sk = s[:, k]
        hit = (y == k).astype(np.float64)
        idx = np.minimum((sk * bins).astype(np.int64), bins - 1)
        occupancy = np.bincount(idx, minlength=bins)
        score_sum = np.bincount(idx, weights=sk, minlength=bins)
        hit_sum = np.bincount(idx, weights=hit, minlength=bins)
        per_class[k] = np.abs(score_sum - hit_sum).sum() / n
    return float(per_class.mean())


def brier(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros_like(s)
    onehot[np.arange(y.size), y] = 1.0
    return float(np.mean(np.sum((s - onehot) ** 2, axis=1)))


def estimate_prevalence_em(dep_scores, p_cal, tol: float = 1e-8, max_iter: int = 1000) -> np.ndarray:
    """Deployment prevalence from unlabeled scores by EM prior adjustment.

    ``dep_scores`` must be posteriors calibrated under ``p_cal``. Each round
    re-weights the posteriors by the ratio of the current prior estimate to
    ``p_cal`` and takes the mean adjusted posterior as the next estimate.
    """
    s = np.asarray(dep_scores, dtype=np.float64)
    p_cal = check_prevalence(p_cal, strict=True)
    if s.ndim != 2 or s.shape[0] == 0:
        raise DegenerateDataError("need at least one deployment score row")
    if s.shape[1] != p_cal.size:
        raise DimensionMismatchError(f"scores have {s.shape[1]} classes, prevalence has {p_cal.size}")
    q = p_cal.copy()
    for _ in range(max_iter):
        adj = s * (q / p_cal)
        adj /= adj.sum(axis=1, keepdims=True)
        q_new = adj.mean(axis=0)
        if np.max(np.abs(q_new - q)) < tol:
            return q_new / q_new.sum()
        q = q_new
    warnings.warn(f"EM prevalence estimate did not converge in {max_iter} iterations", NonConvergenceWarning, stacklevel=2)
    return q / q.sum()


# ---------------------------------------------------------------------------
# Metric selection and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSpec:
    """A metric name plus its configuration.

    ``prevalence`` overrides the class weighting of ``expected_cost``;
    ``costs`` defaults to zero-one.
    """

    name: str
    costs: tuple | None = None
    prevalence: tuple | None = None
    bins: int = DEFAULT_BINS
    positive_class: int = 1
    average: str | None = None

    def __post_init__(self):
        name = ALIASES.get(self.name, self.name)
        if name not in METRICS:
            raise InvalidSpecError(f"unknown metric {self.name!r}; choose from {METRICS}")
        object.__setattr__(self, "name", name)
        if self.costs is not None:
            object.__setattr__(self, "costs", tuple(tuple(float(v) for v in row) for row in self.costs))
        if self.prevalence is not None:
            object.__setattr__(self, "prevalence", tuple(float(v) for v in check_prevalence(self.prevalence)))

    @property
    def lower_is_better(self) -> bool:
        return self.name in LOWER_IS_BETTER

    @property
    def is_counting(self) -> bool:
        return self.name in COUNTING_METRICS


@dataclass(frozen=True)
class MetricResult:
    metric_id: str
    value: float
    flags: tuple = field(default=())

    def to_dict(self) -> dict:
        return {"metric_id": self.metric_id, "value": self.value, "flags": list(self.flags)}


def as_metric_spec(metric) -> MetricSpec:
    return metric if isinstance(metric, MetricSpec) else MetricSpec(metric)


def evaluate_metric(metric, scores, labels, preds=None) -> MetricResult:
    """Score one metric. Counting metrics use ``preds`` (argmax of ``scores`` if omitted)."""
    spec = as_metric_spec(metric)
    s = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if spec.is_counting:
        if preds is None:
            preds = np.argmax(s, axis=1)
        summary = confusion(preds, labels, s.shape[1])
        value, degenerate = counting_metric(
            spec.name,
            summary.counts,
            positive_class=spec.positive_class,
            average=spec.average,
            prevalence=spec.prevalence,
            costs=spec.costs,
        )
        flags = ("degenerate",) if bool(degenerate) else ()
        return MetricResult(spec.name, float(value), flags)
    if spec.name == "auroc":
        return MetricResult("auroc", auroc(s, labels, spec.positive_class))
    if spec.name == "cwce":
        return MetricResult("cwce", cwce(s, labels, spec.bins))
    return MetricResult("brier", brier(s, labels))
