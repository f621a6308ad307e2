"""Exact Bayes-optimal classifiers and rejectors.

All rules take (batches of) exact posteriors and density ratios and return a
:class:`Decision`. Rejection boundaries use strict inequalities, so a point
sitting exactly on the boundary is accepted. Argmax ties go to the lowest
class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, InvalidCostError, NumericError


@dataclass(frozen=True)
class CostSpec:
    """Soft-penalty costs: inlier abstention ``c_in`` and missed outlier ``c_out``.

    Misclassifying an accepted inlier costs ``1 - c_in - c_out``.
    """

    c_in: float
    c_out: float

    def __post_init__(self):
        for name in ("c_in", "c_out"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidCostError(f"{name} must lie in [0, 1], got {v}")
        if self.c_in + self.c_out > 1.0 + 1e-12:
            raise InvalidCostError(f"c_in + c_out must be <= 1, got {self.c_in + self.c_out}")

    @property
    def error_weight(self) -> float:
        return max(0.0, 1.0 - self.c_in - self.c_out)

    @property
    def weights(self) -> tuple[float, float, float]:
        """(error weight, inlier-abstention weight, outlier-acceptance weight)."""
        return self.error_weight, self.c_in, self.c_out


@dataclass(frozen=True)
class BudgetSpec:
    """Constrained form: outlier-miss cost, abstention budget, test inlier share."""

    c_fn: float
    b_rej: float
    pi_in_star: float

    def __post_init__(self):
        if not 0.0 <= self.c_fn <= 1.0:
            raise ConfigError(f"c_fn must lie in [0, 1], got {self.c_fn}")
        if not 0.0 <= self.b_rej <= 1.0:
            raise ConfigError(f"b_rej must lie in [0, 1], got {self.b_rej}")
        if not 0.0 < self.pi_in_star < 1.0:
            raise ConfigError(f"pi_in_star must lie in (0, 1), got {self.pi_in_star}")


@dataclass(frozen=True)
class Decision:
    """Per-sample outcome of a rejection rule.

    ``abstain`` is True where the rule rejects; ``label`` holds the
    classifier's prediction for every sample (None for pure OOD rules).
    ``score`` is oriented so that larger means more abstain-worthy, except
    for rules documented otherwise; ``threshold`` is what it is compared to.
    """

    abstain: np.ndarray
    label: np.ndarray | None
    score: np.ndarray
    threshold: float | np.ndarray

    @property
    def action(self) -> np.ndarray:
        """Predicted label, or -1 where the rule abstains."""
        if self.label is None:
            return np.where(self.abstain, -1, 0)
        return np.where(self.abstain, -1, self.label)

    def __len__(self) -> int:
        return np.size(self.abstain)


def _simplex(posterior) -> np.ndarray:
    p = np.asarray(posterior, dtype=float)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise DataError("posterior must have at least one class")
    if np.isnan(p).any():
        raise DataError("NaN in posterior")
    return p


def _reject_threshold(c_in: float) -> float:
    if c_in >= 1.0:
        raise InvalidCostError("c_in = 1 leaves the rejection threshold undefined")
    if c_in < 0.0:
        raise InvalidCostError(f"c_in must be non-negative, got {c_in}")
    return c_in / (1.0 - c_in)


def chow_rule(posterior, c_in: float) -> Decision:
    """Abstain iff 1 - max_y P(y|x) > c_in / (1 - c_in)."""
    p = _simplex(posterior)
    t = _reject_threshold(c_in)
    score = 1.0 - p.max(axis=-1)
    return Decision(score > t, p.argmax(axis=-1), score, t)


def density_rejection(ratio_out_in, c_in: float) -> Decision:
    """Abstain iff P_out(x) / P_in(x) > c_in / (1 - c_in); +inf always abstains."""
    r = np.asarray(ratio_out_in, dtype=float)
    if np.isnan(r).any():
        raise DataError("NaN density ratio")
    t = _reject_threshold(c_in)
    return Decision(r > t, None, r, t)


def weighted_reject(max_prob, ratio_out_in, w_err, w_in, w_out):
    """Generic sample-dependent rule with unnormalised weights.

    Returns ``(abstain, score)`` with score = w_err (1 - max_prob) + w_out ratio
    and abstain = score > w_in. A zero ``w_out`` never multiplies an infinite
    ratio (the term is dropped), so the rule degrades cleanly to Chow's.
    """
    m = np.asarray(max_prob, dtype=float)
    r = np.asarray(ratio_out_in, dtype=float)
    if w_out == 0:
        ood = np.zeros(np.broadcast(m, r).shape)
    else:
        with np.errstate(invalid="ignore"):
            ood = w_out * r
        # negative weight times +inf: the ratio is infinite, the term is -inf
        ood = np.where(np.isinf(r), np.sign(w_out) * np.inf, ood)
    score = w_err * (1.0 - m) + ood
    return score > w_in, score


def scod_bayes(posterior, ratio_out_in, costs: CostSpec) -> Decision:
    """Bayes-optimal SCOD rule for the soft-penalty risk.

    Abstain iff (1 - c_in - c_out)(1 - max_y P_in(y|x)) + c_out P_out/P_in > c_in.
    An infinite ratio (P_in(x) = 0) abstains whenever c_out > 0.
    """
    p = _simplex(posterior)
    r = np.asarray(ratio_out_in, dtype=float)
    if np.isnan(r).any():
        raise DataError("NaN density ratio")
    w_err, w_in, w_out = costs.weights
    abstain, score = weighted_reject(p.max(axis=-1), r, w_err, w_in, w_out)
    return Decision(abstain, p.argmax(axis=-1), score, w_in)


def _F(z: float) -> float:
    return 1.0 if np.isinf(z) else z / (1.0 + z)


def open_set_threshold(costs: CostSpec, held_out_prior: float) -> float:
    """t*_osc = F(c_in pi(L) / (c_out pi(not L))) with F(z) = z / (1 + z)."""
    if not 0.0 < held_out_prior < 1.0:
        raise ConfigError(f"held-out prior must lie in (0, 1), got {held_out_prior}")
    if abs(costs.c_in + costs.c_out - 1.0) > 1e-12:
        raise InvalidCostError("open-set rule requires c_in + c_out = 1; use scod_bayes otherwise")
    num = costs.c_in * held_out_prior
    den = costs.c_out * (1.0 - held_out_prior)
    if den == 0.0:
        return 1.0
    return _F(num / den)


def open_set_sample_dependent(full_posterior, held_out: int, t_osc: float) -> np.ndarray:
    """Second characterisation: reject iff max inlier posterior >= max known test posterior / (1 - t)."""
    p = _simplex(full_posterior)
    known = np.delete(p, held_out, axis=-1)
    mass_known = known.sum(axis=-1)
    top_known = known.max(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        top_in = np.where(mass_known > 0, top_known / mass_known, 0.0)
        rhs = top_known / (1.0 - t_osc) if t_osc < 1.0 else np.where(top_known > 0, np.inf, 0.0)
    return top_in >= rhs


def open_set_bayes(
    full_posterior, held_out: int, costs: CostSpec, held_out_prior: float, boundary_tol: float = 1e-9
) -> Decision:
    """Open-set Bayes rule: abstain iff P_te(held_out | x) > t*_osc.

    The equivalent sample-dependent form is evaluated alongside; the two must
    agree everywhere except within ``boundary_tol`` of the threshold.
    Labels returned are indices among the known classes (held-out removed).
    """
    p = _simplex(full_posterior)
    L = p.shape[-1]
    if not 0 <= held_out < L:
        raise ConfigError(f"held-out class {held_out} out of range for {L} classes")
    t = open_set_threshold(costs, held_out_prior)
    p_held = p[..., held_out]
    abstain = p_held > t
    alt = open_set_sample_dependent(p, held_out, t)
    clash = (abstain != alt) & (np.abs(p_held - t) > boundary_tol)
    if np.any(clash):
        raise NumericError("open-set characterisations disagree away from the threshold")
    label = np.delete(p, held_out, axis=-1).argmax(axis=-1)
    return Decision(abstain, label, p_held, t)


def msp_reject(inlier_posterior, t_msp: float) -> np.ndarray:
    """MSP baseline: abstain iff max_y P_in(y|x) < t_msp."""
    return _simplex(inlier_posterior).max(axis=-1) < t_msp


@dataclass(frozen=True)
class MspWitness:
    """Class-probability vector on which MSP and the open-set Bayes rule disagree.

    ``bayes_disagrees_for`` is the open interval of Bayes thresholds t*_osc
    over which the two decisions differ.
    """

    case: str
    test_posterior: np.ndarray
    inlier_posterior: np.ndarray
    msp_abstains: bool
    bayes_disagrees_for: tuple[float, float]


def msp_disagreement_witness(L: int, t_msp: float, epsilon: float) -> MspWitness:
    """Construct the two-case counterexample to thresholding the MSP.

    Case (i), t_msp <= 1/(L-1): the unknown class takes mass 1 - eps, so MSP
    accepts (its max is 1/(L-1)) while Bayes abstains for any t below 1 - eps.
    Case (ii), t_msp > 1/(L-1): the unknown class takes eps, MSP abstains,
    Bayes accepts for any t in [eps, 1). The held-out class is the last one.
    """
    if L < 2:
        raise ConfigError("need at least two classes")
    if not (0.0 < t_msp < 1.0 and 0.0 < epsilon < 1.0):
        raise ConfigError("t_msp and epsilon must lie in (0, 1)")
    uniform = 1.0 / (L - 1)
    if t_msp <= uniform:
        case, p_held, interval = "i", 1.0 - epsilon, (0.0, 1.0 - epsilon)
    else:
        case, p_held, interval = "ii", epsilon, (epsilon, 1.0)
    p = np.full(L, (1.0 - p_held) / (L - 1))
    p[-1] = p_held
    inlier = np.full(L - 1, uniform)
    return MspWitness(case, p, inlier, bool(msp_reject(inlier, t_msp)), interval)
