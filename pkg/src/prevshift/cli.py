"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or convergence error. Output
files are written atomically, so a failed command leaves nothing behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationMap, apply_map, fit_calibration, prevalence_weights
from .data import (
    SyntheticSpec,
    atomic_write_text,
    check_costs,
    empirical_prevalence,
    format_scores_csv,
    perturb_prevalence,
    read_scores,
    subsample_at_ir,
    synth_generate,
    zero_one_costs,
)
from .decisions import DecisionRule, decide
from .errors import NonConvergenceWarning, PrevShiftError
from .experiments import (
    ExperimentConfig,
    default_tasks,
    emit_results,
    run_calibration_experiment,
    run_decision_rule_experiment,
    run_generalization_experiment,
    run_perturbation_sweep,
)
from .metrics import MetricSpec, evaluate_metric

CLI_PREV_TOL = 1e-6
RUNNERS = {
    "calibration": run_calibration_experiment,
    "decision_rule": run_decision_rule_experiment,
    "generalization": run_generalization_experiment,
    "perturbation": run_perturbation_sweep,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def parse_prevalence(text: str) -> np.ndarray:
    """Comma-separated decimals summing to 1 within 1e-6, renormalized exactly."""
    try:
        p = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise UsageError(f"cannot parse prevalence {text!r}") from None
    if p.size < 2 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise UsageError(f"prevalence {text!r} must have >= 2 nonnegative entries")
    if abs(p.sum() - 1.0) > CLI_PREV_TOL:
        raise UsageError(f"prevalence {text!r} sums to {p.sum()!r}, not 1")
    return p / p.sum()


def load_costs(spec: str, n_classes: int) -> np.ndarray:
    if spec == "zero-one":
        return zero_one_costs(n_classes)
    data = json.loads(Path(spec).read_text())
    if isinstance(data, dict):
        data = data["costs"]
    return check_costs(data, n_classes)


def _build_parser():
    p = _Parser(prog="prevshift", description="Prevalence-aware re-calibration, decisions and evaluation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("calibrate", help="fit a temperature/affine map on a calibration score file")
    c.add_argument("--scores", required=True)
    c.add_argument("--kind", choices=("temperature", "affine"), default="affine")
    c.add_argument("--cal-prev", default="auto", help="'auto' (empirical) or comma-separated prevalence")
    c.add_argument("--dep-prev", help="expected deployment prevalence; enables class weights")
    c.add_argument("--perturb-std", type=float, help="perturb --dep-prev with this std before weighting")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)

    def rule_args(sp):
        sp.add_argument("--scores", required=True)
        sp.add_argument("--map", help="CalibrationMap JSON applied before the rule")
        sp.add_argument("--rule", choices=("argmax", "bayes", "threshold"), default="argmax")
        sp.add_argument("--costs", default="zero-one", help="'zero-one' or a JSON cost matrix file")
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--positive-class", type=int, default=1)

    d = sub.add_parser("decide", help="turn scores into labels")
    rule_args(d)
    d.add_argument("--out", help="CSV of predictions (stdout if omitted)")

    e = sub.add_parser("evaluate", help="compute metrics on a score file")
    rule_args(e)
    e.add_argument("--metrics", default="expected_cost")
    e.add_argument("--prev-override", help="prevalence used by expected_cost instead of the empirical one")
    e.add_argument("--bins", type=int, default=15)
    e.add_argument("--out", help="JSON lines file of metric records (stdout always)")

    s = sub.add_parser("subsample", help="draw a subset at a given imbalance ratio")
    s.add_argument("--scores", required=True)
    s.add_argument("--ir", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)

    pp = sub.add_parser("perturb", help="perturb a prevalence vector")
    pp.add_argument("--prev", required=True)
    pp.add_argument("--std", type=float, required=True)
    pp.add_argument("--seed", type=int, required=True)

    g = sub.add_parser("synth", help="generate a synthetic score task")
    g.add_argument("--spec", help="SyntheticSpec JSON file")
    g.add_argument("--task", help="name of a built-in synthetic task, e.g. synth-bin-1")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out-dir", required=True)

    x = sub.add_parser("experiment", help="run the imbalance-ratio studies")
    x.add_argument("--config", help="ExperimentConfig JSON (defaults if omitted)")
    x.add_argument("--which", choices=tuple(RUNNERS) + ("all",), default="all")
    x.add_argument("--out", required=True)
    x.add_argument("--format", choices=("csv", "json"), default="csv")
    x.add_argument("--jobs", type=int)
    return p


def _scores_for(args):
    ds = read_scores(args.scores)
    cmap = CalibrationMap.from_json(Path(args.map).read_text()) if args.map else CalibrationMap.identity()
    return ds, apply_map(cmap, ds)


def _rule_for(args, n_classes):
    if args.rule == "argmax":
        return DecisionRule.argmax()
    if args.rule == "bayes":
        return DecisionRule.bayes(load_costs(args.costs, n_classes))
    return DecisionRule.at_threshold(args.threshold, args.positive_class)


def _validate(args):
    if args.command == "calibrate":
        if args.perturb_std is not None and (args.seed is None or args.dep_prev is None):
            raise UsageError("--perturb-std needs --dep-prev and --seed")
        if args.cal_prev != "auto":
            args.cal_prev_vec = parse_prevalence(args.cal_prev)
        if args.dep_prev is not None:
            args.dep_prev = parse_prevalence(args.dep_prev)
    if args.command in ("decide", "evaluate") and args.rule == "threshold" and args.threshold is None:
        raise UsageError("--rule threshold needs --threshold")
    if args.command == "evaluate" and args.prev_override is not None:
        args.prev_override = parse_prevalence(args.prev_override)
    if args.command == "perturb":
        args.prev = parse_prevalence(args.prev)
    if args.command == "synth" and (args.spec is None) == (args.task is None):
        raise UsageError("give exactly one of --spec or --task")


def cmd_calibrate(args, out):
    ds = read_scores(args.scores)
    weights = None
    if args.dep_prev is not None:
        p_cal = empirical_prevalence(ds) if args.cal_prev == "auto" else args.cal_prev_vec
        p_dep = args.dep_prev
        if args.perturb_std is not None:
            p_dep = perturb_prevalence(p_dep, args.perturb_std, args.seed)
        weights = prevalence_weights(p_dep, p_cal)
    with warnings.catch_warnings():
        warnings.simplefilter("error", NonConvergenceWarning)
        cmap = fit_calibration(ds, args.kind, weights)
    atomic_write_text(args.out, cmap.to_json() + "\n")
    print(cmap.to_json(), file=out)


def cmd_decide(args, out):
    ds, scores = _scores_for(args)
    preds = decide(scores, _rule_for(args, ds.class_count))
    text = "prediction\n" + "".join(f"{int(p)}\n" for p in preds)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        out.write(text)


def cmd_evaluate(args, out):
    ds, scores = _scores_for(args)
    preds = decide(scores, _rule_for(args, ds.class_count))
    records = []
    for name in args.metrics.split(","):
        name = name.strip()
        spec = MetricSpec(name, bins=args.bins, positive_class=args.positive_class)
        if spec.name == "expected_cost":
            spec = MetricSpec(
                name,
                costs=load_costs(args.costs, ds.class_count),
                prevalence=None if args.prev_override is None else tuple(args.prev_override),
                positive_class=args.positive_class,
            )
        records.append(evaluate_metric(spec, scores, ds.labels, preds).to_dict())
    text = "".join(json.dumps(r) + "\n" for r in records)
    if args.out:
        atomic_write_text(args.out, text)
    out.write(text)


def cmd_subsample(args, out):
    ds = read_scores(args.scores)
    sub = subsample_at_ir(ds, args.ir, args.seed)
    atomic_write_text(args.out, format_scores_csv(sub))
    print(",".join(repr(float(v)) for v in empirical_prevalence(sub)), file=out)


def cmd_perturb(args, out):
    q = perturb_prevalence(args.prev, args.std, args.seed)
    print(",".join(repr(float(v)) for v in q), file=out)


def cmd_synth(args, out):
    if args.spec:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        tasks = {t.task_id: t for t in default_tasks()}
        if args.task not in tasks:
            raise UsageError(f"unknown task {args.task!r}; choose from {sorted(tasks)}")
        spec = tasks[args.task].synthetic
    data = synth_generate(spec, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "dev.csv", format_scores_csv(data.dev))
    if len(data.dep):
        atomic_write_text(out_dir / "dep.csv", format_scores_csv(data.dep))
    print(f"dev: {len(data.dev)} rows, dep: {len(data.dep)} rows", file=out)


def cmd_experiment(args, out):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.jobs:
        cfg = ExperimentConfig(**{**cfg.__dict__, "n_jobs": args.jobs})
    if args.which == "all":
        table = run_calibration_experiment(cfg)
        for name in ("decision_rule", "generalization", "perturbation"):
            table = table.merge(RUNNERS[name](cfg))
    else:
        table = RUNNERS[args.which](cfg)
    emit_results(table, args.out, args.format)
    print(f"{len(table)} rows written to {args.out}", file=out)


COMMANDS = {
    "calibrate": cmd_calibrate,
    "decide": cmd_decide,
    "evaluate": cmd_evaluate,
    "subsample": cmd_subsample,
    "perturb": cmd_perturb,
    "synth": cmd_synth,
    "experiment": cmd_experiment,
}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args)
    except UsageError as exc:
        print(str(exc), file=err)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(str(exc), file=err)
        return 1
    except (PrevShiftError, NonConvergenceWarning, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"prevshift {args.command}: {type(exc).__name__}: {exc}", file=err)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
