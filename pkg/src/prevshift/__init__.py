"""Adapt a trained classifier's scores, decisions and evaluation to a new class prevalence."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationMap,
    apply_map,
    fit_calibration,
    prevalence_weights,
    softmax,
    weighted_cross_entropy,
)
from .data import (
    ScoreDataset,
    SyntheticSpec,
    empirical_prevalence,
    imbalance_ratio,
    perturb_prevalence,
    read_scores,
    split_dataset,
    subsample_at_ir,
    synth_generate,
    target_prevalence_for_ir,
    write_scores,
    zero_one_costs,
)
from .decisions import DecisionRule, bayes_optimal_decision, decide, optimal_achievable_score, tune_threshold
from .metrics import (
    MetricSpec,
    accuracy,
    auroc,
    balanced_accuracy,
    brier,
    confusion,
    cwce,
    estimate_prevalence_em,
    expected_cost,
    f1,
    mcc,
)
