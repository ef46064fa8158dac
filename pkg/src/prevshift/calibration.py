"""Temperature and affine scaling of logits, fitted by prevalence-weighted cross-entropy.

The affine map is ``f(z) = z / t + b``; temperature scaling is the special
case ``b = 0``. Because softmax ignores a constant added to every logit, the
bias is kept in the sum-zero gauge. Fitting is done on ``(log t, b)`` so the
temperature stays positive without constraints.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import ScoreDataset, check_prevalence
from .errors import DimensionMismatchError, InvalidSpecError, NonConvergenceWarning, ZeroPrevalenceError

KINDS = ("identity", "temperature", "affine")
SCORE_FLOOR = 1e-12
_LOG_FLOOR = np.log(SCORE_FLOOR)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax, max-shifted. Accepts a single row or an N x C matrix."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class CalibrationMap:
    kind: str = "identity"
    t: float = 1.0
    b: tuple = ()
    converged: bool = field(default=True, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown calibration kind {self.kind!r}")
        if not (np.isfinite(self.t) and self.t > 0):
            raise InvalidSpecError(f"temperature must be positive and finite, got {self.t}")
        b = tuple(float(v) for v in self.b)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "t", float(self.t))
        if self.kind == "identity" and (self.t != 1.0 or any(b)):
            raise InvalidSpecError("identity map must have t = 1 and b = 0")
        if self.kind == "temperature" and any(b):
            raise InvalidSpecError("temperature map must have b = 0")
        if b and abs(sum(b)) > 1e-9:
            raise InvalidSpecError(f"bias must sum to zero, got sum {sum(b)!r}")

    @classmethod
    def identity(cls):
        return cls("identity")

    def bias(self, n_classes: int) -> np.ndarray:
        if not self.b:
            return np.zeros(n_classes)
        if len(self.b) != n_classes:
            raise DimensionMismatchError(f"map has {len(self.b)} biases, data has {n_classes} classes")
        return np.array(self.b)

    def transform(self, logits) -> np.ndarray:
        """Calibrated logits ``z / t + b``."""
        z = np.asarray(logits, dtype=np.float64)
        return z / self.t + self.bias(z.shape[-1])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "t": self.t, "b": list(self.b)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationMap":
        return cls(d["kind"], float(d.get("t", 1.0)), tuple(d.get("b") or ()))

    @classmethod
    def from_json(cls, text: str) -> "CalibrationMap":
        return cls.from_dict(json.loads(text))


def apply_map(m: CalibrationMap, ds: ScoreDataset) -> np.ndarray:
    """Predicted class scores ``softmax(logits / t + b)`` for every row of ``ds``."""
    return softmax(m.transform(ds.logits))


def prevalence_weights(p_dep, p_cal) -> np.ndarray:
    """Class weights ``p_dep(k) / p_cal(k)`` that move calibration to the deployment prior."""
    p_cal = check_prevalence(p_cal)
    p_dep = check_prevalence(p_dep, n_classes=p_cal.size)
    if np.any(p_cal == 0):
        raise ZeroPrevalenceError("calibration prevalence has a zero entry")
    if np.any(p_dep == 0):
        raise ZeroPrevalenceError("deployment prevalence has a zero entry")
    return p_dep / p_cal


def _check_weights(w, n_classes):
    w = np.ones(n_classes) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (n_classes,):
        raise DimensionMismatchError(f"expected {n_classes} class weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise InvalidSpecError("class weights must be positive and finite")
    return w


def weighted_cross_entropy(scores, labels, w=None) -> float:
    """Mean of ``-w(y_i) * log s_i(y_i)``, scores floored at 1e-12."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f"scores {s.shape} do not match {y.shape[0]} labels")
    w = _check_weights(w, s.shape[1])
    picked = np.maximum(s[np.arange(y.size), y], SCORE_FLOOR)
    return float(-np.sum(w[y] * np.log(picked)) / y.size)


def calibration_objective(params, logits, labels, w, kind: str = "affine"):
    """Weighted CE and its gradient with respect to ``params``.

    ``params`` is ``[log t]`` for temperature scaling or ``[log t, b_0..b_{C-1}]``
    for affine scaling.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    params = np.asarray(params, dtype=np.float64)
    inv_t = np.exp(-params[0])
    b = params[1:] if kind == "affine" else np.zeros(c)

    a = z * inv_t + b
    logp = _log_softmax(a)
    rows = np.arange(n)
    log_picked = logp[rows, y]
    active = log_picked > _LOG_FLOOR
    wy = w[y]
    loss = -np.sum(wy * np.maximum(log_picked, _LOG_FLOOR)) / n

    da = np.exp(logp)
    da[rows, y] -= 1.0
    da *= (wy * active / n)[:, None]
    g_logt = -np.sum(da * z) * inv_t
    if kind == "affine":
        grad = np.concatenate([[g_logt], da.sum(axis=0)])
    else:
        grad = np.array([g_logt])
    return float(loss), grad


def _project(params, kind):
    if kind == "affine":
        params = params.copy()
        params[1:] -= params[1:].mean()
    return params


def fit_calibration(
    cal: ScoreDataset,
    kind: str = "affine",
    w=None,
    max_iter: int = 2000,
    loss_tol: float = 1e-9,
    grad_tol: float = 1e-7,
    warn: bool = True,
) -> CalibrationMap:
    """Fit a temperature or affine map on ``cal`` by minimizing weighted cross-entropy.

    Quasi-Newton (BFGS) descent with an Armijo backtracking line search,
    started at the identity map, so the returned map never has a higher loss
    than the identity. If ``max_iter`` is reached the best iterate is
    returned with ``converged=False`` and, unless ``warn`` is False, a
    :class:`NonConvergenceWarning`.
    """
    if kind not in ("temperature", "affine"):
        raise InvalidSpecError(f"can only fit 'temperature' or 'affine', got {kind!r}")
    if len(cal) == 0:
        raise InvalidSpecError("calibration set is empty")
    c = cal.class_count
    w = _check_weights(w, c)
    present = cal.class_counts() > 0
    if warn and not present.all() and np.unique(w).size > 1:
        warnings.warn(
            f"classes {np.flatnonzero(~present).tolist()} are absent from the calibration set; "
            "their weights have no effect",
            stacklevel=2,
        )

    def f(p):
        return calibration_objective(p, cal.logits, cal.labels, w, kind)

    dim = 1 + c if kind == "affine" else 1
    x = np.zeros(dim)
    fx, g = f(x)
    h_inv = np.eye(dim)
    converged = False

    for _ in range(max_iter):
        if np.max(np.abs(g)) < grad_tol:
            converged = True
            break
        d = -h_inv @ g
        slope = g @ d
        if slope >= 0:
            h_inv = np.eye(dim)
            d, slope = -g, -(g @ g)
        step, accepted = 1.0, False
        for _ in range(60):
            x_new = _project(x + step * d, kind)
            f_new, g_new = f(x_new)
            if np.isfinite(f_new) and f_new <= fx + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if np.array_equal(h_inv, np.eye(dim)):
                converged = True  # no descent possible at machine precision
                break
            h_inv = np.eye(dim)
            continue
        s, yv = x_new - x, g_new - g
        improvement = fx - f_new
        x, fx, g = x_new, f_new, g_new
        sy = s @ yv
        if sy > 1e-12:
            rho = 1.0 / sy
            v = np.eye(dim) - rho * np.outer(s, yv)
            h_inv = v @ h_inv @ v.T + rho * np.outer(s, s)
        if improvement < loss_tol:
            converged = True
            break

    if warn and not converged:
        warnings.warn(f"calibration fit did not converge in {max_iter} iterations", NonConvergenceWarning, stacklevel=2)
    t = float(np.exp(x[0]))
    b = tuple(x[1:]) if kind == "affine" else ()
    return CalibrationMap(kind, t, b, converged=converged)
