"""Sweeps over imbalance ratios that measure what a prevalence shift does to a classifier.

Three studies share one pipeline: a calibration split, a class-balanced
development test split and a deployment pool. For every imbalance ratio r the
pool is subsampled to that ratio and each re-calibration variant is fitted on
the calibration split.

* calibration: CWCE and Brier score on the deployment subsample;
* decision rule: how far argmax and a cutoff tuned on the development test
  split fall behind the best threshold on the deployment subsample (binary
  tasks only);
* generalization: |metric on development test - metric on deployment| under
  argmax, with Expected Cost additionally evaluated on the development test
  split using the deployment prevalence.

The perturbation sweep repeats all three with a noisy deployment prevalence
in place of the true one.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .calibration import CalibrationMap, apply_map, fit_calibration, prevalence_weights
from .data import (
    ScoreDataset,
    SyntheticSpec,
    atomic_write_text,
    empirical_prevalence,
    perturb_prevalence,
    read_scores,
    split_dataset,
    subsample_at_ir,
    synth_generate,
)
from .decisions import DecisionRule, decide, optimal_achievable_score, tune_threshold
from .errors import InvalidSpecError, PrevShiftError
from .metrics import COUNTING_METRICS, MetricSpec, evaluate_metric

log = logging.getLogger(__name__)

VARIANTS = ("none", "temperature", "temperature+weights", "affine", "affine+weights")
EXPERIMENTS = ("calibration", "decision_rule", "generalization")
DEFAULT_IR_GRID = tuple(1.0 + 0.5 * i for i in range(19))
DEFAULT_METRICS = ("accuracy", "f1", "mcc", "expected_cost", "balanced_accuracy", "auroc")
DEFAULT_STDS = (0.05, 0.1)
EC_OVERRIDE = "expected_cost_override"

COLUMNS = ("task_id", "seed", "ir", "variant", "metric_id", "split", "value", "flags", "experiment", "std")
KEY_COLUMNS = ("experiment", "task_id", "seed", "ir", "variant", "std", "metric_id", "split")


def cell_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary key parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("|".join(repr(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSource:
    """Either a synthetic generator or three score files (calibration, dev test, deployment pool)."""

    task_id: str
    synthetic: SyntheticSpec | None = None
    cal_path: str | None = None
    test_path: str | None = None
    dep_path: str | None = None

    def __post_init__(self):
        files = (self.cal_path, self.test_path, self.dep_path)
        if self.synthetic is None and not all(files):
            raise InvalidSpecError(f"task {self.task_id!r} needs a synthetic spec or all of cal/test/dep paths")
        if self.synthetic is not None and any(files):
            raise InvalidSpecError(f"task {self.task_id!r} mixes synthetic and file sources")

    @property
    def n_classes(self) -> int:
        if self.synthetic is not None:
            return self.synthetic.n_classes
        with open(self.cal_path) as fh:
            return len(fh.readline().split(",")) - 1

    def to_dict(self) -> dict:
        if self.synthetic is not None:
            return {"task_id": self.task_id, "synthetic": self.synthetic.to_dict()}
        return {"task_id": self.task_id, "files": {"cal": self.cal_path, "test": self.test_path, "dep_pool": self.dep_path}}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSource":
        if "synthetic" in d:
            return cls(d["task_id"], synthetic=SyntheticSpec.from_dict(d["synthetic"]))
        files = d.get("files") or {}
        return cls(d["task_id"], cal_path=files.get("cal"), test_path=files.get("test"), dep_path=files.get("dep_pool"))


def _equidistant_means(n_classes: int, distance: float):
    # class k sits at (distance / sqrt 2) * e_k, so every pair is `distance` apart
    return tuple(tuple(distance / math.sqrt(2) * (i == k) for i in range(n_classes)) for k in range(n_classes))


def synthetic_task(task_id, n_classes=2, distance=2.0, t_distort=1.0, b_distort=None, n=40000) -> TaskSource:
    return TaskSource(
        task_id,
        synthetic=SyntheticSpec(
            class_means=_equidistant_means(n_classes, distance),
            scale=1.0,
            n_dev=n,
            t_distort=t_distort,
            b_distort=None if b_distort is None else tuple(b_distort),
        ),
    )


# (distance between class means, distortion temperature, distortion bias)
_BINARY_BATTERY = [
    (1.5, 1.0, 0.0),
    (2.0, 1.0, 0.25),
    (2.5, 1.5, 0.0),
    (3.0, 2.0, 0.5),
    (1.0, 0.8, 0.0),
    (2.0, 0.7, 0.5),
    (3.5, 1.25, 0.25),
    (1.75, 2.5, 0.75),
]


def default_tasks(n: int = 40000, binary_only: bool = False) -> tuple:
    """Eight binary and two three-class synthetic tasks of varying separability and distortion."""
    tasks = [
        synthetic_task(f"synth-bin-{i + 1}", 2, d, t, (beta, -beta), n) for i, (d, t, beta) in enumerate(_BINARY_BATTERY)
    ]
    if not binary_only:
        tasks.append(synthetic_task("synth-3cls-1", 3, 2.5, 1.5, (0.3, 0.0, -0.3), n))
        tasks.append(synthetic_task("synth-3cls-2", 3, 3.5, 0.8, (0.0, 0.4, -0.4), n))
    return tuple(tasks)


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple = field(default_factory=default_tasks)
    ir_grid: tuple = DEFAULT_IR_GRID
    variants: tuple = VARIANTS
    metrics: tuple = DEFAULT_METRICS
    perturbation_stds: tuple = DEFAULT_STDS
    seeds: tuple = (0,)
    costs: tuple | None = None
    cwce_bins: int = 15
    positive_class: int = 1
    n_jobs: int = 1

    def __post_init__(self):
        grid = tuple(float(r) for r in self.ir_grid)
        if not grid or any(r < 1 for r in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise InvalidSpecError("ir_grid must be nonempty, >= 1 and strictly increasing")
        object.__setattr__(self, "ir_grid", grid)
        if not self.variants or any(v not in VARIANTS for v in self.variants):
            raise InvalidSpecError(f"variants must be a nonempty subset of {VARIANTS}")
        if not self.metrics:
            raise InvalidSpecError("at least one metric is required")
        object.__setattr__(self, "metrics", tuple(MetricSpec(m).name for m in self.metrics))
        if not self.seeds:
            raise InvalidSpecError("at least one seed is required")
        if not self.tasks:
            raise InvalidSpecError("at least one task is required")
        if len({t.task_id for t in self.tasks}) != len(self.tasks):
            raise InvalidSpecError("task ids must be unique")
        if any(s < 0 for s in self.perturbation_stds):
            raise InvalidSpecError("perturbation stds must be >= 0")

    def to_dict(self) -> dict:
        return {
            "tasks": [t.to_dict() for t in self.tasks],
            "ir_grid": list(self.ir_grid),
            "variants": list(self.variants),
            "metrics": list(self.metrics),
            "perturbation_stds": list(self.perturbation_stds),
            "seeds": list(self.seeds),
            "costs": None if self.costs is None else [list(r) for r in self.costs],
            "cwce_bins": self.cwce_bins,
            "positive_class": self.positive_class,
            "n_jobs": self.n_jobs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        tasks = d.pop("tasks", "default")
        if tasks == "default":
            tasks = default_tasks()
        elif tasks == "default-binary":
            tasks = default_tasks(binary_only=True)
        else:
            tasks = tuple(TaskSource.from_dict(t) for t in tasks)
        unknown = set(d) - {f for f in cls.__dataclass_fields__ if f != "tasks"}
        if unknown:
            raise InvalidSpecError(f"unknown config keys {sorted(unknown)}")
        for key in ("ir_grid", "variants", "metrics", "perturbation_stds", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("costs") is not None:
            d["costs"] = tuple(tuple(row) for row in d["costs"])
        return cls(tasks=tasks, **d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InvalidSpecError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


class ResultRow(NamedTuple):
    task_id: str
    seed: int
    ir: float
    variant: str
    metric_id: str
    split: str
    value: float
    flags: tuple = ()
    experiment: str = ""
    std: float | None = None

    def key(self):
        return tuple(getattr(self, c) for c in KEY_COLUMNS)

    def sort_key(self):
        return tuple(-1.0 if v is None else v for v in self.key())


def _fmt_float(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


class ResultTable:
    """Rows keyed by (experiment, task_id, seed, ir, variant, std, metric_id, split), kept sorted."""

    def __init__(self, rows=()):
        rows = sorted(rows, key=ResultRow.sort_key)
        keys = [r.key() for r in rows]
        if len(set(keys)) != len(keys):
            dupes = {k for k in keys if keys.count(k) > 1}
            raise InvalidSpecError(f"duplicate result keys: {sorted(dupes, key=str)[:3]}")
        self.rows = rows

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __eq__(self, other):
        if not isinstance(other, ResultTable) or len(self) != len(other):
            return False
        for a, b in zip(self.rows, other.rows):
            if a.key() != b.key() or a.flags != b.flags:
                return False
            if not (a.value == b.value or (math.isnan(a.value) and math.isnan(b.value))):
                return False
        return True

    def merge(self, other: "ResultTable") -> "ResultTable":
        return ResultTable(self.rows + other.rows)

    def select(self, **where) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in where.items())]

    def values(self, **where) -> np.ndarray:
        return np.array([r.value for r in self.select(**where)], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r.task_id,
                    r.seed,
                    repr(float(r.ir)),
                    r.variant,
                    r.metric_id,
                    r.split,
                    _fmt_float(r.value),
                    ";".join(r.flags),
                    r.experiment,
                    "" if r.std is None else repr(float(r.std)),
                ]
            )
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = []
        for r in self.rows:
            d = r._asdict()
            d["value"] = None if math.isnan(r.value) else r.value
            d["flags"] = list(r.flags)
            lines.append(json.dumps({c: d[c] for c in COLUMNS}))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != COLUMNS:
            raise InvalidSpecError(f"result header must be {','.join(COLUMNS)}")
        rows = []
        for rec in reader:
            d = dict(zip(COLUMNS, rec))
            rows.append(
                ResultRow(
                    d["task_id"],
                    int(d["seed"]),
                    float(d["ir"]),
                    d["variant"],
                    d["metric_id"],
                    d["split"],
                    float(d["value"]),
                    tuple(f for f in d["flags"].split(";") if f),
                    d["experiment"],
                    None if d["std"] == "" else float(d["std"]),
                )
            )
        return cls(rows)

    @classmethod
    def from_jsonl(cls, text: str) -> "ResultTable":
        rows = []
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            d["value"] = math.nan if d["value"] is None else float(d["value"])
            d["flags"] = tuple(d["flags"])
            rows.append(ResultRow(**d))
        return cls(rows)


def emit_results(table: ResultTable, path, fmt: str = "csv"):
    """Write ``table`` as CSV or JSON lines; the file is replaced atomically."""
    if fmt == "csv":
        text = table.to_csv()
    elif fmt in ("json", "jsonl"):
        text = table.to_jsonl()
    else:
        raise InvalidSpecError(f"unknown result format {fmt!r}")
    atomic_write_text(path, text)


def read_results(path, fmt: str | None = None) -> ResultTable:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    text = path.read_text()
    return ResultTable.from_csv(text) if fmt == "csv" else ResultTable.from_jsonl(text)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TaskData:
    cal: ScoreDataset
    test: ScoreDataset
    pool: ScoreDataset

    @property
    def n_classes(self):
        return self.cal.class_count


def prepare_task(task: TaskSource, seed: int) -> TaskData:
    if task.synthetic is None:
        return TaskData(read_scores(task.cal_path), read_scores(task.test_path), read_scores(task.dep_path))
    data = synth_generate(task.synthetic, cell_seed(seed, task.task_id, "generate"))
    parts = split_dataset(data.dev, seed=cell_seed(seed, task.task_id, "split"), stratify=True)
    # the validation split doubles as the calibration split
    return TaskData(cal=parts.val, test=parts.test, pool=parts.dep)


def _variant_kind(variant):
    return None if variant == "none" else variant.split("+")[0]


def _oriented_gap(spec: MetricSpec, value, optimum):
    return value - optimum if spec.lower_is_better else optimum - value


class _Unit:
    """All cells of one (task, seed, perturbation std)."""

    def __init__(self, cfg: ExperimentConfig, task: TaskSource, seed: int, std, experiments):
        self.cfg, self.task, self.seed, self.std, self.experiments = cfg, task, seed, std, experiments
        self.rows = []

    def _row(self, experiment, ir, variant, metric_id, split, value, flags=()):
        self.rows.append(
            ResultRow(self.task.task_id, self.seed, float(ir), variant, metric_id, split, float(value), tuple(flags), experiment, self.std)
        )

    def _spec(self, name, **kw):
        costs = self.cfg.costs if name == "expected_cost" else None
        return MetricSpec(name, costs=costs, bins=self.cfg.cwce_bins, positive_class=self.cfg.positive_class, **kw)

    def expected_cells(self, n_classes):
        """(experiment, metric_id, split) triples every (ir, variant) must produce."""
        cells = []
        if "calibration" in self.experiments:
            cells += [("calibration", m, "dep") for m in ("cwce", "brier")]
        if "decision_rule" in self.experiments and n_classes == 2:
            for m in self.cfg.metrics:
                if m in COUNTING_METRICS:
                    cells += [("decision_rule", m, s) for s in ("oracle", "argmax_gap", "tuned_gap")]
        if "generalization" in self.experiments:
            for m in self.cfg.metrics:
                if m in ("cwce", "brier"):
                    continue
                cells += [("generalization", m, s) for s in ("dev", "dep", "abs_diff")]
                if m == "expected_cost":
                    cells += [("generalization", EC_OVERRIDE, s) for s in ("dev", "dep", "abs_diff")]
        return cells

    def run(self):
        cfg = self.cfg
        try:
            data = prepare_task(self.task, self.seed)
            p_cal = empirical_prevalence(data.cal)
            n_classes = data.n_classes
        except PrevShiftError as exc:
            n_classes = self.task.n_classes
            for ir in cfg.ir_grid:
                for v in cfg.variants:
                    self._fail_cells(ir, v, n_classes, exc)
            return self.rows

        unweighted = {"none": CalibrationMap.identity()}
        for v in cfg.variants:
            kind = _variant_kind(v)
            if kind and kind not in unweighted:
                unweighted[kind] = fit_calibration(data.cal, kind, warn=False)

        for ir in cfg.ir_grid:
            try:
                dep = subsample_at_ir(data.pool, ir, cell_seed(self.seed, self.task.task_id, ir, "subsample"))
                p_dep = empirical_prevalence(dep)
                if self.std is None:
                    p_est = p_dep
                else:
                    p_est = perturb_prevalence(p_dep, self.std, cell_seed(self.seed, self.task.task_id, ir, self.std, "perturb"))
                weights = prevalence_weights(p_est, p_cal)
            except PrevShiftError as exc:
                for v in cfg.variants:
                    self._fail_cells(ir, v, n_classes, exc)
                continue
            for v in cfg.variants:
                n_before = len(self.rows)
                try:
                    kind = _variant_kind(v)
                    if v.endswith("+weights"):
                        cmap = fit_calibration(data.cal, kind, weights, warn=False)
                    else:
                        cmap = unweighted[kind or "none"]
                    flags = () if cmap.converged else ("nonconvergence",)
                    self._cells(ir, v, cmap, data, dep, p_est, flags)
                except PrevShiftError as exc:
                    del self.rows[n_before:]
                    self._fail_cells(ir, v, n_classes, exc)
        return self.rows

    def _fail_cells(self, ir, variant, n_classes, exc):
        flag = f"failed:{type(exc).__name__}"
        log.warning("task %s seed %s ir %s variant %s failed: %s", self.task.task_id, self.seed, ir, variant, exc)
        for experiment, metric_id, split in self.expected_cells(n_classes):
            self._row(experiment, ir, variant, metric_id, split, math.nan, (flag,))

    def _cells(self, ir, variant, cmap, data: TaskData, dep: ScoreDataset, p_est, flags):
        cfg = self.cfg
        s_dep = apply_map(cmap, dep)
        s_test = apply_map(cmap, data.test)
        binary = data.n_classes == 2

        if "calibration" in self.experiments:
            for name in ("cwce", "brier"):
                res = evaluate_metric(self._spec(name), s_dep, dep.labels)
                self._row("calibration", ir, variant, name, "dep", res.value, flags)

        if "decision_rule" in self.experiments and binary:
            argmax_dep = decide(s_dep, DecisionRule.argmax())
            for name in cfg.metrics:
                if name not in COUNTING_METRICS:
                    continue
                spec = self._spec(name)
                oracle = optimal_achievable_score(s_dep, dep.labels, spec)
                arg = evaluate_metric(spec, s_dep, dep.labels, argmax_dep)
                tuned_rule = tune_threshold(s_test, data.test.labels, spec)
                tuned = evaluate_metric(spec, s_dep, dep.labels, decide(s_dep, tuned_rule))
                self._row("decision_rule", ir, variant, name, "oracle", oracle.score, flags)
                self._row("decision_rule", ir, variant, name, "argmax_gap", _oriented_gap(spec, arg.value, oracle.score), flags + arg.flags)
                self._row("decision_rule", ir, variant, name, "tuned_gap", _oriented_gap(spec, tuned.value, oracle.score), flags + tuned.flags)

        if "generalization" in self.experiments:
            pred_test = decide(s_test, DecisionRule.argmax())
            pred_dep = decide(s_dep, DecisionRule.argmax())
            for name in cfg.metrics:
                if name in ("cwce", "brier"):
                    continue
                if name == "auroc" and not binary:
                    for split in ("dev", "dep", "abs_diff"):
                        self._row("generalization", ir, variant, name, split, math.nan, flags + ("unsupported:multiclass",))
                    continue
                spec = self._spec(name)
                dev_res = evaluate_metric(spec, s_test, data.test.labels, pred_test)
                dep_res = evaluate_metric(spec, s_dep, dep.labels, pred_dep)
                self._generalization_rows(ir, variant, name, dev_res, dep_res, flags)
                if name == "expected_cost":
                    override = self._spec(name, prevalence=tuple(p_est))
                    dev_res = evaluate_metric(override, s_test, data.test.labels, pred_test)
                    self._generalization_rows(ir, variant, EC_OVERRIDE, dev_res, dep_res, flags)

    def _generalization_rows(self, ir, variant, metric_id, dev_res, dep_res, flags):
        self._row("generalization", ir, variant, metric_id, "dev", dev_res.value, flags + dev_res.flags)
        self._row("generalization", ir, variant, metric_id, "dep", dep_res.value, flags + dep_res.flags)
        extra = tuple(sorted(set(dev_res.flags) | set(dep_res.flags)))
        self._row("generalization", ir, variant, metric_id, "abs_diff", abs(dev_res.value - dep_res.value), flags + extra)


def _run(cfg: ExperimentConfig, experiments, stds) -> ResultTable:
    units = [_Unit(cfg, task, seed, std, experiments) for task in cfg.tasks for seed in cfg.seeds for std in stds]
    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            parts = list(pool.map(_Unit.run, units))
    else:
        parts = [u.run() for u in units]
    return ResultTable([row for part in parts for row in part])


def run_calibration_experiment(cfg: ExperimentConfig) -> ResultTable:
    """Miscalibration (CWCE, Brier) on the deployment subsample for every re-calibration variant."""
    return _run(cfg, ("calibration",), (None,))


def run_decision_rule_experiment(cfg: ExperimentConfig) -> ResultTable:
    """Suboptimality of argmax and of a dev-tuned cutoff relative to the best cutoff on the deployment subsample.

    Gaps are oriented so that 0 is optimal and larger is worse, whatever
    the metric's direction. Multiclass tasks are skipped.
    """
    return _run(cfg, ("decision_rule",), (None,))


def run_generalization_experiment(cfg: ExperimentConfig) -> ResultTable:
    return _run(cfg, ("generalization",), (None,))


def run_perturbation_sweep(cfg: ExperimentConfig, experiments=EXPERIMENTS) -> ResultTable:
    """Repeat the studies with weights and EC prevalences taken from a perturbed estimate.

    One sweep family per std in ``cfg.perturbation_stds``; rows carry the std.
    """
    if not cfg.perturbation_stds:
        raise InvalidSpecError("perturbation sweep needs at least one std")
    if not experiments or any(e not in EXPERIMENTS for e in experiments):
        raise InvalidSpecError(f"experiments must be a nonempty subset of {EXPERIMENTS}")
    return _run(cfg, tuple(experiments), tuple(float(s) for s in cfg.perturbation_stds))


def run_all(cfg: ExperimentConfig, perturbation: bool = True) -> ResultTable:
    stds = (None,) + (tuple(float(s) for s in cfg.perturbation_stds) if perturbation else ())
    return _run(cfg, EXPERIMENTS, stds)

