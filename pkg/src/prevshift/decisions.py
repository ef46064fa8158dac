"""Decision rules: argmax, Bayes-optimal under a cost matrix, and binary thresholds."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import check_costs
from .errors import DegenerateDataError, InvalidSpecError, RuleArityMismatchError
from .metrics import as_metric_spec, counting_metric

RULE_KINDS = ("argmax", "bayes", "threshold")
METRIC_TIE_TOL = 1e-12
# Risks within this fraction of the row's cost scale count as tied. Exactly tied
# scores can give risks an ulp apart because the sums run in different orders.
RISK_TIE_TOL = 1e-12


@dataclass(frozen=True)
class DecisionRule:
    kind: str = "argmax"
    cost: tuple | None = None
    threshold: float | None = None
    positive_class: int | None = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise InvalidSpecError(f"unknown decision rule {self.kind!r}")
        if self.kind == "bayes":
            if self.cost is None:
                raise InvalidSpecError("bayes rule needs a cost matrix")
            c = check_costs(self.cost)
            object.__setattr__(self, "cost", tuple(tuple(float(v) for v in row) for row in c))
        if self.kind == "threshold":
            if self.threshold is None or not 0.0 <= self.threshold <= 1.0:
                raise InvalidSpecError(f"threshold must lie in [0, 1], got {self.threshold}")
            if self.positive_class not in (0, 1):
                raise RuleArityMismatchError("threshold rules are binary; positive_class must be 0 or 1")
            object.__setattr__(self, "threshold", float(self.threshold))

    @classmethod
    def argmax(cls):
        return cls("argmax")

    @classmethod
    def bayes(cls, cost):
        return cls("bayes", cost=cost)

    @classmethod
    def at_threshold(cls, threshold, positive_class=1):
        return cls("threshold", threshold=threshold, positive_class=positive_class)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "bayes":
            d["cost"] = [list(row) for row in self.cost]
        if self.kind == "threshold":
            d["threshold"] = self.threshold
            d["positive_class"] = self.positive_class
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionRule":
        return cls(d["kind"], cost=d.get("cost"), threshold=d.get("threshold"), positive_class=d.get("positive_class"))

    @classmethod
    def from_json(cls, text: str) -> "DecisionRule":
        return cls.from_dict(json.loads(text))


def _bayes_risks(scores, cost):
    # risk[:, k] = sum_j cost[j, k] * s[:, j], accumulated left to right in j
    risk = np.zeros(scores.shape, dtype=np.float64)
    for j in range(scores.shape[1]):
        risk += scores[:, j, None] * cost[j][None, :]
    return risk


def _argmin_lowest(risk, scores, cost):
    scale = np.abs(cost).max() * np.abs(scores).sum(axis=1) + np.finfo(np.float64).tiny
    near = risk <= risk.min(axis=1, keepdims=True) + RISK_TIE_TOL * scale[:, None]
    return np.argmax(near, axis=1)


def bayes_optimal_decision(score_row, cost) -> int:
    """argmin_k sum_j cost(j, k) * s(j); ties go to the lowest index."""
    s = np.asarray(score_row, dtype=np.float64).reshape(1, -1)
    c = check_costs(cost, s.shape[1])
    return int(_argmin_lowest(_bayes_risks(s, c), s, c)[0])


def decide(scores, rule: DecisionRule) -> np.ndarray:
    """Map every score row to a label according to ``rule``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise InvalidSpecError(f"scores must be N x C, got shape {s.shape}")
    if rule.kind == "argmax":
        return np.argmax(s, axis=1)
    if rule.kind == "bayes":
        c = check_costs(rule.cost, s.shape[1])
        return _argmin_lowest(_bayes_risks(s, c), s, c)
    if s.shape[1] != 2:
        raise RuleArityMismatchError(f"threshold rule applied to {s.shape[1]} classes")
    pos = rule.positive_class
    return np.where(s[:, pos] >= rule.threshold, pos, 1 - pos)


# ---------------------------------------------------------------------------
# Threshold sweeps
# ---------------------------------------------------------------------------


def threshold_candidates(pos_scores) -> np.ndarray:
    """0, 1 and the midpoints between consecutive distinct scores."""
    u = np.unique(np.asarray(pos_scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0], mids, [1.0]]))


def _sweep_counts(pos_scores, is_pos, positive_class, candidates):
    """Confusion counts (M x 2 x 2) for predicting positive iff score >= candidate."""
    s_pos = np.sort(pos_scores[is_pos])
    s_neg = np.sort(pos_scores[~is_pos])
    tp = s_pos.size - np.searchsorted(s_pos, candidates, side="left")
    fp = s_neg.size - np.searchsorted(s_neg, candidates, side="left")
    fn = s_pos.size - tp
    tn = s_neg.size - fp
    p, q = positive_class, 1 - positive_class
    counts = np.zeros((candidates.size, 2, 2), dtype=np.int64)
    counts[:, p, p] = tp
    counts[:, p, q] = fn
    counts[:, q, p] = fp
    counts[:, q, q] = tn
    return counts


class Sweep(NamedTuple):
    candidates: np.ndarray
    values: np.ndarray


def threshold_sweep(scores, labels, metric, positive_class: int | None = None) -> Sweep:
    """Metric value of every candidate threshold on the given data."""
    spec = as_metric_spec(metric)
    if not spec.is_counting:
        raise InvalidSpecError(f"{spec.name} does not depend on a decision threshold")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 2:
        raise RuleArityMismatchError("threshold sweeps need binary N x 2 scores")
    pos = spec.positive_class if positive_class is None else positive_class
    y = np.asarray(labels, dtype=np.int64)
    pos_scores = s[:, pos]
    cands = threshold_candidates(pos_scores)
    counts = _sweep_counts(pos_scores, y == pos, pos, cands)
    values, _ = counting_metric(
        spec.name, counts, positive_class=pos, average=spec.average, prevalence=spec.prevalence, costs=spec.costs
    )
    return Sweep(cands, values)


def _best_index(sweep: Sweep, lower_is_better: bool) -> int:
    vals = -sweep.values if lower_is_better else sweep.values
    best = vals.max()
    tied = np.flatnonzero(vals >= best - METRIC_TIE_TOL)
    # nearest to 0.5, then the smaller threshold
    order = np.lexsort((sweep.candidates[tied], np.abs(sweep.candidates[tied] - 0.5)))
    return int(tied[order[0]])


def tune_threshold(scores, labels, metric, positive_class: int | None = None) -> DecisionRule:
    """Cutoff that optimizes ``metric`` on the given (development) data."""
    spec = as_metric_spec(metric)
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0 or np.unique(y).size < 2:
        raise DegenerateDataError("threshold tuning needs both classes present")
    pos = spec.positive_class if positive_class is None else positive_class
    sweep = threshold_sweep(scores, y, spec, pos)
    i = _best_index(sweep, spec.lower_is_better)
    return DecisionRule.at_threshold(float(sweep.candidates[i]), pos)


class OracleResult(NamedTuple):
    score: float
    rule: DecisionRule


def optimal_achievable_score(scores, labels, metric, positive_class: int | None = None) -> OracleResult:
    """Best metric value any threshold reaches on this very data.

    An analysis oracle, not a deployable rule: it looks at the labels it is
    scored against.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 2:
        raise RuleArityMismatchError("the threshold oracle is defined for binary tasks")
    spec = as_metric_spec(metric)
    pos = spec.positive_class if positive_class is None else positive_class
    sweep = threshold_sweep(s, labels, spec, pos)
    i = _best_index(sweep, spec.lower_is_better)
    return OracleResult(float(sweep.values[i]), DecisionRule.at_threshold(float(sweep.candidates[i]), pos))

