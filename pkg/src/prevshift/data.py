"""Score datasets, prevalence utilities, splitting, subsampling and synthetic tasks.

A :class:`ScoreDataset` holds the pre-softmax outputs of some upstream model
together with integer labels. Everything downstream (calibration, decisions,
metrics) consumes these objects; nothing here knows about images or models.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    InsufficientSamplesError,
    InvalidSpecError,
    ParseError,
    SchemaError,
    ZeroPrevalenceError,
)

PREVALENCE_TOL = 1e-9
PERTURB_FLOOR = 0.01
DEFAULT_FRACTIONS = {"dep": 0.3, "test": 0.1, "train": 0.5, "val": 0.1}


@dataclass(frozen=True, eq=False)
class ScoreDataset:
    """N x C logits plus N integer labels in ``[0, C)``.

    Arrays are copied and frozen on construction. An empty dataset (N = 0)
    is allowed so that splits with a zero fraction have a value to return.
    """

    logits: np.ndarray
    labels: np.ndarray
    class_count: int = field(default=None)

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels)
        if logits.ndim != 2:
            raise DimensionMismatchError(f"logits must be 2-D, got shape {logits.shape}")
        n, c = logits.shape
        if self.class_count is None:
            object.__setattr__(self, "class_count", c)
        if self.class_count < 2:
            raise InvalidSpecError("class_count must be >= 2")
        if c != self.class_count:
            raise DimensionMismatchError(f"logits have {c} columns, class_count={self.class_count}")
        if labels.ndim != 1 or labels.shape[0] != n:
            raise DimensionMismatchError(f"{n} logit rows but labels have shape {labels.shape}")
        if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
            raise SchemaError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise SchemaError(f"labels must lie in [0, {c})")
        if not np.all(np.isfinite(logits)):
            raise SchemaError("logits must be finite")
        logits.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ScoreDataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and np.array_equal(self.logits, other.logits)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    def subset(self, indices) -> "ScoreDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ScoreDataset(self.logits[idx], self.labels[idx], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


# ---------------------------------------------------------------------------
# Prevalences and costs
# ---------------------------------------------------------------------------


def check_prevalence(p, strict: bool = False, n_classes: int | None = None) -> np.ndarray:
    """Validate a prevalence vector and return it as a float array."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise InvalidSpecError(f"prevalence must be a vector of length >= 2, got shape {p.shape}")
    if n_classes is not None and p.size != n_classes:
        raise DimensionMismatchError(f"prevalence has {p.size} entries, expected {n_classes}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidSpecError("prevalence entries must be finite and nonnegative")
    if abs(p.sum() - 1.0) > PREVALENCE_TOL:
        raise InvalidSpecError(f"prevalence must sum to 1 (sum={p.sum()!r})")
    if strict and np.any(p == 0):
        raise ZeroPrevalenceError("prevalence has a zero entry")
    return p


def empirical_prevalence(ds: ScoreDataset) -> np.ndarray:
    """Class frequencies ``count(labels == k) / N``."""
    if len(ds) == 0:
        raise InsufficientSamplesError("empirical prevalence of an empty dataset")
    return ds.class_counts() / len(ds)


def imbalance_ratio(p) -> float:
    """max_k p(k) / min_k p(k)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ZeroPrevalenceError("imbalance ratio undefined with a zero prevalence")
    return float(p.max() / p.min())


def target_prevalence_for_ir(n_classes: int, ratio: float) -> np.ndarray:
    """Prevalence with imbalance ratio ``ratio``, class 0 most frequent.

    Multiclass profiles interpolate geometrically: p(k) ~ ratio^(-k/(C-1)).
    For C = 2 this is (r/(1+r), 1/(1+r)).
    """
    if n_classes < 2:
        raise InvalidSpecError("need at least two classes")
    if not ratio >= 1:
        raise InvalidSpecError(f"imbalance ratio must be >= 1, got {ratio}")
    if n_classes == 2:
        return np.array([ratio / (1.0 + ratio), 1.0 / (1.0 + ratio)])
    w = ratio ** (-np.arange(n_classes) / (n_classes - 1))
    return w / w.sum()


def zero_one_costs(n_classes: int) -> np.ndarray:
    return 1.0 - np.eye(n_classes)


def check_costs(costs, n_classes: int | None = None) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InvalidSpecError(f"cost matrix must be square, got shape {c.shape}")
    if n_classes is not None and c.shape[0] != n_classes:
        raise DimensionMismatchError(f"cost matrix is {c.shape[0]}x{c.shape[0]}, expected {n_classes} classes")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise InvalidSpecError("costs must be finite and nonnegative")
    return c


# ---------------------------------------------------------------------------
# Splitting and subsampling
# ---------------------------------------------------------------------------


class Splits(NamedTuple):
    dep: ScoreDataset
    test: ScoreDataset
    train: ScoreDataset
    val: ScoreDataset


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(ds: ScoreDataset, fractions=None, seed: int = 0, stratify: bool = True) -> Splits:
    """Partition ``ds`` into deployment pool, development test, train and validation.

    The deployment pool is held out first as a random fraction. With
    ``stratify`` the test split is class-balanced: every class contributes
    the same count, truncated to what the rarest class can supply, and any
    unused test budget falls through to the training split.
    """
    fr = dict(DEFAULT_FRACTIONS if fractions is None else fractions)
    if set(fr) != set(DEFAULT_FRACTIONS):
        raise InvalidSpecError(f"fractions must have keys {sorted(DEFAULT_FRACTIONS)}")
    if any(v < 0 for v in fr.values()) or abs(sum(fr.values()) - 1.0) > PREVALENCE_TOL:
        raise InvalidSpecError(f"fractions must be nonnegative and sum to 1, got {fr}")

    n = len(ds)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_dep = min(n, _round_half_up(fr["dep"] * n))
    n_test = _round_half_up(fr["test"] * n)
    n_val = _round_half_up(fr["val"] * n)

    dep_idx = perm[:n_dep]
    rest = perm[n_dep:]

    if stratify and n_test > 0:
        rest_labels = ds.labels[rest]
        per_class = n_test // ds.class_count
        available = np.bincount(rest_labels, minlength=ds.class_count)
        per_class = min(per_class, int(available.min()))
        if per_class == 0:
            raise InsufficientSamplesError(
                f"cannot build a class-balanced test split; class counts after hold-out: {available.tolist()}"
            )
        take = np.zeros(rest.size, dtype=bool)
        for k in range(ds.class_count):
            take[np.flatnonzero(rest_labels == k)[:per_class]] = True
        test_idx = rest[take]
        rest = rest[~take]
    else:
        test_idx = rest[:n_test]
        rest = rest[n_test:]

    val_idx = rest[:n_val]
    train_idx = rest[n_val:]
    return Splits(*(ds.subset(np.sort(i)) for i in (dep_idx, test_idx, train_idx, val_idx)))


def subsample_counts(pool_counts, target) -> np.ndarray:
    """Largest integer class counts fitting inside ``pool_counts`` at prevalence ``target``.

    The class that binds first keeps all its samples; every other class is
    rounded to the nearest count implied by the target ratio.
    """
    pool_counts = np.asarray(pool_counts, dtype=np.int64)
    target = np.asarray(target, dtype=np.float64)
    need = target > 0
    if np.any(pool_counts[need] == 0):
        missing = np.flatnonzero(need & (pool_counts == 0)).tolist()
        raise InsufficientSamplesError(f"deployment pool has no samples of class(es) {missing}")
    capacity = np.where(need, pool_counts / np.where(need, target, 1.0), np.inf)
    anchor = int(np.argmin(capacity))
    scale = pool_counts[anchor] / target[anchor]
    counts = np.floor(scale * target + 0.5).astype(np.int64)
    counts[anchor] = pool_counts[anchor]
    counts = np.minimum(counts, pool_counts)
    counts[need] = np.maximum(counts[need], 1)
    return counts


def subsample_at_ir(ds: ScoreDataset, ratio: float, seed: int) -> ScoreDataset:
    """Draw a subset without replacement whose imbalance ratio is ``ratio``.

    Retains as many samples as the pool allows. Selected rows keep their
    original relative order.
    """
    target = target_prevalence_for_ir(ds.class_count, ratio)
    counts = subsample_counts(ds.class_counts(), target)
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(ds.class_count):
        members = np.flatnonzero(ds.labels == k)
        chosen.append(rng.choice(members, size=counts[k], replace=False) if counts[k] < members.size else members)
    return ds.subset(np.sort(np.concatenate(chosen)))


def clamp_and_normalize(draws, floor: float = PERTURB_FLOOR) -> np.ndarray:
    q = np.maximum(np.asarray(draws, dtype=np.float64), floor)
    return q / q.sum()


def perturb_prevalence(p, std: float, seed: int) -> np.ndarray:
    """Noisy prevalence estimate: q(k) ~ N(p(k), std), floored at 0.01, renormalized."""
    p = check_prevalence(p)
    if std < 0:
        raise InvalidSpecError("std must be >= 0")
    if std == 0 and p.min() >= PERTURB_FLOOR:
        return p.copy()
    rng = np.random.default_rng(seed)
    return clamp_and_normalize(rng.normal(p, std))


# ---------------------------------------------------------------------------
# Synthetic anticausal tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator for a C-class task with Gaussian class-conditional features.

    ``class_means`` is C x d. Features are N(mean_y, scale^2 I). The emitted
    logits are the exact Bayes posterior log-odds under ``dev_prevalence``,
    then distorted as ``t_distort * (logits - b_distort)``.
    """

    class_means: tuple
    scale: float = 1.0
    n_dev: int = 10000
    n_dep: int = 0
    dev_prevalence: tuple | None = None
    dep_prevalence: tuple | None = None
    t_distort: float = 1.0
    b_distort: tuple | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_means)

    def to_dict(self) -> dict:
        return {
            "class_means": [list(map(float, m)) for m in self.class_means],
            "scale": self.scale,
            "n_dev": self.n_dev,
            "n_dep": self.n_dep,
            "dev_prevalence": None if self.dev_prevalence is None else list(self.dev_prevalence),
            "dep_prevalence": None if self.dep_prevalence is None else list(self.dep_prevalence),
            "t_distort": self.t_distort,
            "b_distort": None if self.b_distort is None else list(self.b_distort),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["class_means"] = tuple(tuple(float(v) for v in m) for m in d["class_means"])
        for key in ("dev_prevalence", "dep_prevalence", "b_distort"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpecError(str(exc)) from None


@dataclass(frozen=True, eq=False)
class SyntheticData:
    """Generated splits plus ground truth.

    Both posterior arrays are exact Bayes posteriors under the development
    prior, i.e. softmax of the undistorted logits.
    """

    dev: ScoreDataset
    dep: ScoreDataset
    dev_posteriors: np.ndarray
    dep_posteriors: np.ndarray
    dev_features: np.ndarray
    dep_features: np.ndarray


def _validate_synth(spec: SyntheticSpec):
    means = np.asarray(spec.class_means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise InvalidSpecError("class_means must be a C x d array with C >= 2")
    c = means.shape[0]
    if not spec.scale > 0:
        raise InvalidSpecError("scale must be > 0")
    if not spec.t_distort > 0:
        raise InvalidSpecError("distortion temperature must be > 0")
    if spec.n_dev < 0 or spec.n_dep < 0:
        raise InvalidSpecError("sample counts must be >= 0")
    dev_p = np.full(c, 1.0 / c) if spec.dev_prevalence is None else spec.dev_prevalence
    dep_p = dev_p if spec.dep_prevalence is None else spec.dep_prevalence
    try:
        dev_p = check_prevalence(dev_p, strict=True, n_classes=c)
        dep_p = check_prevalence(dep_p, n_classes=c)
    except (ZeroPrevalenceError, DimensionMismatchError) as exc:
        raise InvalidSpecError(str(exc)) from None
    b = np.zeros(c) if spec.b_distort is None else np.asarray(spec.b_distort, dtype=np.float64)
    if b.shape != (c,):
        raise InvalidSpecError(f"b_distort must have {c} entries")
    return means, dev_p, dep_p, b


def bayes_logits(features, class_means, scale, prior) -> np.ndarray:
    """Exact posterior log-scores for isotropic Gaussian classes (defined up to a row constant)."""
    means = np.asarray(class_means, dtype=np.float64)
    quad = features @ means.T - 0.5 * np.sum(means**2, axis=1)
    return np.log(prior) + quad / scale**2


def synth_generate(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Sample development and deployment data from the same class-conditionals.

    Labels follow ``dev_prevalence`` (resp. ``dep_prevalence``); features
    come from identical Gaussians in both splits. Logits for both splits are
    the posterior under the development prior, which is what a model trained
    on development data would see, followed by the distortion.
    """
    means, dev_p, dep_p, b = _validate_synth(spec)
    rng = np.random.default_rng(seed)

    def draw(n, prior):
        y = rng.choice(means.shape[0], size=n, p=prior) if n else np.zeros(0, dtype=np.int64)
        x = means[y] + spec.scale * rng.standard_normal((n, means.shape[1]))
        true_logits = bayes_logits(x, means, spec.scale, dev_p)
        if n:
            true_logits -= true_logits.max(axis=1, keepdims=True)
        post = np.exp(true_logits)
        if n:
            post /= post.sum(axis=1, keepdims=True)
        emitted = spec.t_distort * (true_logits - b)
        return ScoreDataset(emitted, y, means.shape[0]), post, x

    dev, dev_post, dev_x = draw(spec.n_dev, dev_p)
    dep, dep_post, dep_x = draw(spec.n_dep, dep_p)
    return SyntheticData(dev, dep, dev_post, dep_post, dev_x, dep_x)


# ---------------------------------------------------------------------------
# Score files
# ---------------------------------------------------------------------------


def atomic_write_text(path, text: str):
    """Write ``text`` to ``path`` via a temp file and rename; no partial file on failure."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_scores_csv(ds: ScoreDataset) -> str:
    header = ",".join([f"logit_{k}" for k in range(ds.class_count)] + ["label"])
    lines = [header]
    for row, y in zip(ds.logits.tolist(), ds.labels.tolist()):
        lines.append(",".join(repr(v) for v in row) + f",{y}")
    return "\n".join(lines) + "\n"


def write_scores(ds: ScoreDataset, path, class_names: Sequence[str] | None = None, metadata: dict | None = None):
    """Write ``logit_0..logit_{C-1},label`` CSV, with an optional ``<path>.json`` sidecar."""
    atomic_write_text(path, format_scores_csv(ds))
    if class_names is not None or metadata is not None:
        side = {"class_names": list(class_names) if class_names is not None else None, "metadata": metadata or {}}
        atomic_write_text(str(path) + ".json", json.dumps(side, indent=2) + "\n")


def read_sidecar(path) -> dict | None:
    side = Path(str(path) + ".json")
    if not side.exists():
        return None
    return json.loads(side.read_text())


def read_scores(path) -> ScoreDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        c = len(header) - 1
        expected = [f"logit_{k}" for k in range(c)] + ["label"]
        if c < 2 or header != expected:
            raise SchemaError(f"header must be logit_0..logit_{{C-1}},label with C >= 2, got {header}")
        logits, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != c + 1:
                raise SchemaError(f"line {lineno}: expected {c + 1} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row[:c]]
            except ValueError:
                raise ParseError(f"non-numeric logit in {row[:c]}", line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite logit", line=lineno)
            try:
                y = int(row[c])
            except ValueError:
                raise ParseError(f"label {row[c]!r} is not an integer", line=lineno) from None
            if not 0 <= y < c:
                raise SchemaError(f"line {lineno}: label {y} outside [0, {c})")
            logits.append(vals)
            labels.append(y)
    return ScoreDataset(np.array(logits, dtype=np.float64).reshape(-1, c), np.array(labels, dtype=np.int64), c)
