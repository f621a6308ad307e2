"""Empirical SCOD evaluation: joint risk, risk-coverage curves, OOD metrics.

Decisions are boolean ``abstain`` arrays aligned with an :class:`EvaluationSet`.
Rejection scores follow "larger = more abstain-worthy" (OOD scores:
"larger = more OOD").
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError

CURVE_COLUMNS = (
    "target_fraction",
    "realized_fraction",
    "joint_risk",
    "inlier_accuracy",
    "ood_precision",
    "ood_recall",
)


class EmptyAcceptanceWarning(UserWarning):
    """Every sample was rejected, so a conditional metric was set to 0."""


@dataclass(frozen=True)
class EvaluationSet:
    """Labels of a pooled test sample: class index for inliers, -1 for outliers."""

    labels: np.ndarray
    is_outlier: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        out = np.asarray(self.is_outlier, dtype=bool)
        if labels.shape != out.shape or labels.ndim != 1:
            raise DataError("labels and outlier mask must be 1-D and aligned")
        if (labels[~out] < 0).any():
            raise DataError("every inlier needs a class label")
        if (labels[out] != -1).any():
            raise DataError("outliers must carry no label (-1)")
        object.__setattr__(self, "labels", labels.astype(int))
        object.__setattr__(self, "is_outlier", out)

    @classmethod
    def from_parts(cls, inlier_labels, n_outliers: int) -> "EvaluationSet":
        y = np.asarray(inlier_labels, dtype=int)
        labels = np.concatenate([y, np.full(n_outliers, -1)])
        return cls(labels, labels == -1)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n_in(self) -> int:
        return int((~self.is_outlier).sum())

    @property
    def n_out(self) -> int:
        return int(self.is_outlier.sum())


def _check(eval_set: EvaluationSet, *arrays):
    out = []
    for a in arrays:
        a = np.asarray(a)
        if a.shape != eval_set.labels.shape:
            raise DataError(f"decision array of shape {a.shape} does not cover {len(eval_set)} samples")
        out.append(a)
    return out


def _counts(eval_set, predictions, abstain):
    predictions, abstain = _check(eval_set, predictions, abstain)
    abstain = abstain.astype(bool)
    acc = ~abstain
    inl = ~eval_set.is_outlier
    return {
        "accepted": int(acc.sum()),
        "rejected": int(abstain.sum()),
        "err_acc": int((inl & acc & (predictions != eval_set.labels)).sum()),
        "ok_acc": int((inl & acc & (predictions == eval_set.labels)).sum()),
        "out_acc": int((eval_set.is_outlier & acc).sum()),
        "out_rej": int((eval_set.is_outlier & abstain).sum()),
    }


def _risk(c, c_fn):
    return ((1.0 - c_fn) * c["err_acc"] + c_fn * c["out_acc"]) / c["accepted"]


def joint_risk(eval_set: EvaluationSet, predictions, abstain, c_fn: float) -> float:
    """Joint SC+OOD risk conditioned on accepted samples.

    (1 - c_fn) #(accepted inlier errors) + c_fn #(accepted outliers), over the
    number of accepted samples. Defined as 0 (with a warning) if none are accepted.
    """
    c = _counts(eval_set, predictions, abstain)
    if c["accepted"] == 0:
        warnings.warn("all samples rejected; joint risk set to 0", EmptyAcceptanceWarning, stacklevel=2)
        return 0.0
    return _risk(c, c_fn)


def inlier_accuracy(eval_set: EvaluationSet, predictions, abstain) -> float:
    """Accepted correct inliers over all accepted samples (outliers included)."""
    c = _counts(eval_set, predictions, abstain)
    if c["accepted"] == 0:
        warnings.warn("all samples rejected; inlier accuracy set to 0", EmptyAcceptanceWarning, stacklevel=2)
        return 0.0
    return c["ok_acc"] / c["accepted"]


def ood_precision(eval_set: EvaluationSet, abstain) -> float:
    """Fraction of rejected samples that are outliers (0 if nothing is rejected)."""
    (abstain,) = _check(eval_set, abstain)
    abstain = abstain.astype(bool)
    n = abstain.sum()
    return float((abstain & eval_set.is_outlier).sum() / n) if n else 0.0


def ood_recall(eval_set: EvaluationSet, abstain) -> float:
    """Fraction of outliers that are rejected (0 if there are no outliers)."""
    (abstain,) = _check(eval_set, abstain)
    n = eval_set.n_out
    return float((abstain.astype(bool) & eval_set.is_outlier).sum() / n) if n else 0.0


def soft_penalty_risk(eval_set: EvaluationSet, predictions, abstain, costs) -> float:
    """Empirical soft-penalty risk with per-population means.

    (1 - c_in - c_out) P_in(err, accept) + c_in P_in(reject) + c_out P_out(accept).
    """
    predictions, abstain = _check(eval_set, predictions, abstain)
    abstain = abstain.astype(bool)
    inl, out = ~eval_set.is_outlier, eval_set.is_outlier
    if not inl.any() or not out.any():
        raise DataError("soft-penalty risk needs both inliers and outliers")
    w_err, c_in, c_out = costs.weights
    err = (predictions[inl] != eval_set.labels[inl]) & ~abstain[inl]
    return float(w_err * err.mean() + c_in * abstain[inl].mean() + c_out * (~abstain[out]).mean())


# --- risk-coverage curves -----------------------------------------------------


@dataclass(frozen=True)
class RiskCoverageCurve:
    target: np.ndarray
    fractions: np.ndarray
    risks: np.ndarray
    inlier_accuracy: np.ndarray
    ood_precision: np.ndarray
    ood_recall: np.ndarray
    auc_rc: float
    degenerate: bool = False

    def rows(self) -> list[tuple[float, ...]]:
        cols = (self.target, self.fractions, self.risks, self.inlier_accuracy, self.ood_precision, self.ood_recall)
        return [tuple(float(c[i]) for c in cols) for i in range(self.target.size)]

    def to_csv(self) -> str:
        return rows_to_csv(CURVE_COLUMNS, self.rows())


def auc_rc(fractions, risks) -> float:
    """Trapezoidal area under risk versus abstention fraction."""
    f = np.asarray(fractions, dtype=float)
    r = np.asarray(risks, dtype=float)
    if f.size != r.size:
        raise DataError("fractions and risks differ in length")
    if f.size < 2:
        return 0.0
    return float(np.sum(np.diff(f) * (r[1:] + r[:-1]) / 2.0))


def risk_coverage_curve(
    eval_set: EvaluationSet, score, predictions, c_fn: float, grid_size: int = 101
) -> RiskCoverageCurve:
    """Sweep thresholds on ``score`` (abstain iff score > t) over a fraction grid.

    Grid point k targets an abstention count of floor(k n / (grid_size - 1)).
    Ties make some counts unreachable; the largest reachable count not above
    the target is used and the realized fraction reported.
    """
    if grid_size < 2:
        raise ConfigError("grid_size must be at least 2")
    score, predictions = _check(eval_set, score, predictions)
    score = score.astype(float)
    if np.isnan(score).any():
        raise DataError("NaN rejection score")
    n = len(eval_set)
    if n == 0:
        raise DataError("empty evaluation set")

    order = np.argsort(-score, kind="stable")
    s_sorted = score[order]
    # abstaining on the top j samples is reachable by a threshold iff j is 0, n,
    # or the j-th and (j+1)-th largest scores differ
    reachable = np.zeros(n + 1, dtype=bool)
    reachable[0] = reachable[n] = True
    reachable[1:n] = s_sorted[:-1] > s_sorted[1:]
    last_ok = np.maximum.accumulate(np.where(reachable, np.arange(n + 1), 0))

    lab = eval_set.labels[order]
    out = eval_set.is_outlier[order]
    pred = predictions[order]
    err = (~out & (pred != lab)).astype(np.int64)
    ok = (~out & (pred == lab)).astype(np.int64)
    # counts among the accepted samples when the top j are rejected
    def suffix(v):
        return np.concatenate([np.cumsum(v[::-1])[::-1], [0]])

    err_acc, ok_acc, out_acc = suffix(err), suffix(ok), suffix(out.astype(np.int64))
    n_out = int(out.sum())

    G = grid_size
    target = np.arange(G) / (G - 1)
    js = last_ok[(np.arange(G) * n) // (G - 1)]
    accepted = n - js
    with np.errstate(invalid="ignore", divide="ignore"):
        risks = np.where(accepted > 0, ((1.0 - c_fn) * err_acc[js] + c_fn * out_acc[js]) / accepted, 0.0)
        acc = np.where(accepted > 0, ok_acc[js] / accepted, 0.0)
        out_rej = n_out - out_acc[js]
        prec = np.where(js > 0, out_rej / js, 0.0)
        rec = out_rej / n_out if n_out else np.zeros(G)
    fractions = js / n
    degenerate = bool(reachable[1:n].sum() == 0) and n > 1
    if degenerate:
        warnings.warn("constant rejection score: only 0% and 100% abstention are reachable", stacklevel=2)
    return RiskCoverageCurve(
        target, fractions, risks, acc, prec, np.asarray(rec, dtype=float), auc_rc(fractions, risks), degenerate
    )


# --- OOD detection metrics ----------------------------------------------------


@dataclass(frozen=True)
class OodMetrics:
    auc_roc: float
    fpr_at_95tpr: float
    threshold: float | None = None
    precision: float | None = None
    recall: float | None = None


def auc_roc(inlier_scores, outlier_scores) -> float:
    """P(outlier score > inlier score) + 0.5 P(tie), via average ranks."""
    a = np.asarray(inlier_scores, dtype=float).ravel()
    b = np.asarray(outlier_scores, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("need non-empty inlier and outlier score sets")
    ranks = rankdata(np.concatenate([a, b]))
    m = b.size
    u = ranks[a.size :].sum() - m * (m + 1) / 2.0
    return float(u / (a.size * m))


def fpr_at_95tpr(inlier_scores, outlier_scores) -> float:
    """Inlier fraction above the 5th-percentile outlier score ('lower' rule)."""
    a = np.asarray(inlier_scores, dtype=float).ravel()
    b = np.asarray(outlier_scores, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("need non-empty inlier and outlier score sets")
    t = np.percentile(b, 5, method="lower")
    return float(np.mean(a > t))


def ood_detection_metrics(inlier_scores, outlier_scores, threshold: float | None = None) -> OodMetrics:
    """AUC-ROC and FPR@95TPR; precision/recall of ``score > threshold`` if given."""
    auc = auc_roc(inlier_scores, outlier_scores)
    fpr = fpr_at_95tpr(inlier_scores, outlier_scores)
    if threshold is None:
        return OodMetrics(auc, fpr)
    a = np.asarray(inlier_scores, dtype=float).ravel()
    b = np.asarray(outlier_scores, dtype=float).ravel()
    tp, fp = int((b > threshold).sum()), int((a > threshold).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    return OodMetrics(auc, fpr, float(threshold), precision, tp / b.size)


# --- serialization ------------------------------------------------------------


def fmt(v) -> str:
    """Shortest round-trip decimal for floats; plain str otherwise."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return str(v.item())
    return str(v)


def rows_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def to_json(obj) -> str:
    """Deterministic JSON: sorted keys, non-finite floats as strings."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"
