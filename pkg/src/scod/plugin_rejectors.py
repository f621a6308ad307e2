"""Plug-in estimators of the Bayes-optimal SCOD rule.

Two routes feed the same black-box rejector:

* black-box: any confidence score ``s_sc`` and any inlier/outlier
  density-ratio estimate ``s_ood`` (larger = more inlier-like);
* loss-based: a scorer trained with the decoupled loss against a wild
  mixture, whose OOD logit is corrected for the inliers hiding in the mix
  using a strictly-inlier sample.

The budget-constrained variant searches a grid of Lagrange multipliers over
rules built from one set of probability estimates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .bayes_rules import BudgetSpec, CostSpec, Decision, weighted_reject
from .errors import ConfigError, DataError
from .metrics import EvaluationSet

EPS_CLAMP = 1e-6
EPS_RATIO = 1e-9


class ClampWarning(UserWarning):
    """A plug-in estimate left its valid range and was clamped."""


def theta(s_ood):
    """z -> -1/z, with theta(+inf) = 0 and theta(0) = -inf."""
    z = np.asarray(s_ood, dtype=float)
    if np.isnan(z).any() or (z < 0).any():
        raise DataError("OOD density-ratio scores must be non-negative")
    with np.errstate(divide="ignore"):
        return np.where(np.isinf(z), 0.0, -1.0 / z)


@dataclass(frozen=True)
class PluginInputs:
    """Per-sample SC confidence, inlier/outlier ratio estimate and predicted label."""

    s_sc: np.ndarray
    s_ood: np.ndarray
    labels: np.ndarray | None = None
    class_probs: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.s_ood, dtype=float)
        if np.isnan(s).any() or (s < 0).any():
            raise DataError("s_ood must be positive or +inf")

    @property
    def ratio_out_in(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 1.0 / np.asarray(self.s_ood, dtype=float)

    def __len__(self) -> int:
        return np.size(self.s_sc)


def black_box_reject(inputs: PluginInputs, costs: CostSpec) -> Decision:
    """Abstain iff (1 - c_in - c_out) s_sc + c_out theta(s_ood) < 1 - 2 c_in - c_out.

    The stored score is the negated left-hand side, so larger still means
    more abstain-worthy and the comparison is score > -t.
    """
    w_err, c_in, c_out = costs.weights
    t_bb = 1.0 - 2.0 * c_in - c_out
    s_sc = np.asarray(inputs.s_sc, dtype=float)
    ood = c_out * theta(inputs.s_ood) if c_out > 0 else np.zeros_like(s_sc)
    combined = w_err * s_sc + ood
    return Decision(combined < t_bb, inputs.labels, -combined, -t_bb)


# --- noise correction ----------------------------------------------------------


@dataclass(frozen=True)
class MixtureEstimate:
    """Estimated inlier share of the wild mixture, from strictly-inlier points."""

    pi_mix_hat: float
    values: np.ndarray = field(repr=False)
    clamped: bool = False


def estimate_pi_mix(ood_logits) -> MixtureEstimate:
    """Mean of exp(-s(x)) over the strictly-inlier set, clamped into [0, 1 - 1e-6]."""
    s = np.asarray(ood_logits, dtype=float).ravel()
    if s.size == 0:
        raise DataError("strictly-inlier set is empty")
    with np.errstate(over="ignore"):
        values = np.exp(-s)
    raw = float(values.mean())
    est = min(max(raw, 0.0), 1.0 - EPS_CLAMP)
    clamped = est != raw
    if clamped:
        warnings.warn(f"pi_mix estimate {raw:.6g} clamped to {est:.6g}", ClampWarning, stacklevel=2)
    return MixtureEstimate(est, values, clamped)


def corrected_ratio(p_mix_over_p_in, pi_mix):
    """P_out/P_in = (P_mix/P_in - pi_mix) / (1 - pi_mix), unclamped.

    ``pi_mix`` may be a scalar or an array broadcastable against the ratio.
    """
    pi = np.asarray(pi_mix, dtype=float)
    if not np.all((pi >= 0.0) & (pi < 1.0)):
        raise ConfigError(f"pi_mix must lie in [0, 1), got {pi_mix}")
    r = np.asarray(p_mix_over_p_in, dtype=float)
    return (r - pi) / (1.0 - pi)


@dataclass(frozen=True)
class CorrectedScore:
    s_ood: np.ndarray
    ratio_out_in: np.ndarray
    clamped: np.ndarray


def noise_correct(p_mix_over_p_in, pi_mix: float) -> CorrectedScore:
    """Turn a mix/inlier ratio into an inlier/outlier ratio estimate ``s_ood``.

    A corrected ratio of exactly zero gives s_ood = +inf. Negative corrected
    ratios (estimation noise) are floored at 1e-9 and flagged.
    """
    q = np.atleast_1d(corrected_ratio(p_mix_over_p_in, pi_mix)).astype(float)
    clamped = q < 0
    q = np.where(clamped, EPS_RATIO, q)
    with np.errstate(divide="ignore"):
        s_ood = np.where(q == 0, np.inf, 1.0 / q)
    if np.ndim(p_mix_over_p_in) == 0:
        return CorrectedScore(s_ood[0], q[0], clamped[0])
    return CorrectedScore(s_ood, q, clamped)


# --- loss-based rule -------------------------------------------------------------


def _num_classes(model) -> int:
    if hasattr(model, "arch"):
        return model.arch.num_classes
    return model.num_classes


@dataclass(frozen=True)
class LossBasedRule:
    """Classifier + rejector assembled from a decoupled-loss scorer."""

    model: object
    costs: CostSpec
    mixture: MixtureEstimate

    def inputs(self, X) -> PluginInputs:
        logits, s = self.model.logits_and_ood(X)
        if s is None:
            raise ConfigError("loss-based rule needs a scorer with an OOD logit")
        probs = softmax(logits[:, : _num_classes(self.model)], axis=1)
        with np.errstate(over="ignore"):
            mix_over_in = np.exp(-np.asarray(s, dtype=float))
        corr = noise_correct(mix_over_in, self.mixture.pi_mix_hat)
        return PluginInputs(probs.max(axis=1), corr.s_ood, probs.argmax(axis=1), probs)

    def decide(self, X) -> Decision:
        return black_box_reject(self.inputs(X), self.costs)

    def report(self) -> dict:
        return {
            "rule": "plugin-loss-based",
            "c_in": self.costs.c_in,
            "c_out": self.costs.c_out,
            "pi_mix_hat": self.mixture.pi_mix_hat,
            "pi_mix_clamped": self.mixture.clamped,
        }


def loss_based_reject(model, strict_inlier_X, costs: CostSpec) -> LossBasedRule:
    """Estimate pi_mix on the strictly-inlier set and wrap the scorer into a rule."""
    _, s = model.logits_and_ood(strict_inlier_X)
    if s is None:
        raise ConfigError("loss-based rule needs a scorer with an OOD logit")
    return LossBasedRule(model, costs, estimate_pi_mix(s))


@dataclass(frozen=True)
class CoupledRule:
    """Reject iff the reject-class softmax mass beats every class's mass."""

    model: object

    def decide(self, X) -> Decision:
        logits, _ = self.model.logits_and_ood(X)
        L = _num_classes(self.model)
        zeta = softmax(np.asarray(logits, dtype=float), axis=1)
        top = zeta[:, :L].max(axis=1)
        score = zeta[:, L] - top
        return Decision(top < zeta[:, L], zeta[:, :L].argmax(axis=1), score, 0.0)

    def report(self) -> dict:
        return {"rule": "plugin-coupled"}


def coupled_reject(model) -> CoupledRule:
    if hasattr(model, "arch") and not model.arch.reject_logit:
        raise ConfigError("coupled rule needs a model with a reject logit")
    return CoupledRule(model)


def curve_score(inputs: PluginInputs, c_fn: float) -> np.ndarray:
    """Rejection score for threshold sweeps: (1 - c_fn)(1 - s_sc) + c_fn / s_ood.

    Sweeping a threshold on this score sweeps the inlier-abstention cost
    with the outlier-miss weight held at c_fn.
    """
    _, score = weighted_reject(inputs.s_sc, inputs.ratio_out_in, 1.0 - c_fn, 0.0, c_fn)
    return score


# --- budget-constrained search ------------------------------------------------


@dataclass(frozen=True)
class LagrangianPoint:
    """One multiplier on the grid, its rule weights and what it achieved.

    Weights are (error, inlier abstention, outlier acceptance) =
    (1 - c_fn, lam pi_in, c_fn - lam (1 - pi_in)); ``nu`` is the constant
    lam (1 - pi_in) - lam b_rej.
    """

    lam: float
    w_err: float
    w_in: float
    w_out: float
    nu: float
    abstention: float
    objective: float
    lagrangian: float
    feasible: bool

    @property
    def negative_ood_weight(self) -> bool:
        return self.w_out < 0

    @property
    def lagrangian_tuple(self) -> tuple[float, float, float]:
        """(outlier-acceptance weight, inlier-abstention weight, constant)."""
        return self.w_out, self.w_in, self.nu


def lagrangian_weights(lam: float, budget: BudgetSpec) -> tuple[float, float, float, float]:
    if lam < 0:
        raise ConfigError(f"Lagrange multiplier must be non-negative, got {lam}")
    p = budget.pi_in_star
    return (
        1.0 - budget.c_fn,
        lam * p,
        budget.c_fn - lam * (1.0 - p),
        lam * (1.0 - p) - lam * budget.b_rej,
    )


def default_lambda_grid(budget: BudgetSpec, n: int = 41) -> np.ndarray:
    """Zero plus ``n`` geometric points up to 4 c_fn / (1 - pi_in)."""
    upper = 4.0 * max(budget.c_fn, 1e-3) / (1.0 - budget.pi_in_star)
    return np.concatenate([[0.0], np.geomspace(upper * 1e-3, upper, n)])


@dataclass(frozen=True)
class WeightedRule:
    w_err: float
    w_in: float
    w_out: float

    def decide(self, inputs: PluginInputs) -> Decision:
        abstain, score = weighted_reject(inputs.s_sc, inputs.ratio_out_in, self.w_err, self.w_in, self.w_out)
        return Decision(abstain, inputs.labels, score, self.w_in)


def _empirical_terms(eval_set: EvaluationSet, predictions, abstain):
    inl, out = ~eval_set.is_outlier, eval_set.is_outlier
    acc = ~abstain
    err_in = (predictions[inl] != eval_set.labels[inl]) & acc[inl]
    p_err = err_in.mean() if inl.any() else 0.0
    p_in_rej = abstain[inl].mean() if inl.any() else 0.0
    p_out_acc = acc[out].mean() if out.any() else 0.0
    return float(p_err), float(p_in_rej), float(p_out_acc)


@dataclass(frozen=True)
class BudgetResult:
    best: LagrangianPoint
    rule: WeightedRule
    decision: Decision
    points: tuple[LagrangianPoint, ...]
    feasible: bool
    budget: BudgetSpec

    def report(self) -> dict:
        b = self.best
        return {
            "rule": "plugin-budget",
            "c_fn": self.budget.c_fn,
            "b_rej": self.budget.b_rej,
            "pi_in_star": self.budget.pi_in_star,
            "lambda": b.lam,
            "weights": [b.w_err, b.w_in, b.w_out],
            "abstention": b.abstention,
            "objective": b.objective,
            "feasible": self.feasible,
            "negative_ood_weight": b.negative_ood_weight,
        }


def evaluate_lambda(inputs: PluginInputs, eval_set: EvaluationSet, budget: BudgetSpec, lam: float):
    w_err, w_in, w_out, nu = lagrangian_weights(lam, budget)
    rule = WeightedRule(w_err, w_in, w_out)
    dec = rule.decide(inputs)
    abstain = np.asarray(dec.abstain, dtype=bool)
    p_err, p_in_rej, p_out_acc = _empirical_terms(eval_set, inputs.labels, abstain)
    objective = (1.0 - budget.c_fn) * p_err + budget.c_fn * p_out_acc
    lagr = w_err * p_err + w_out * p_out_acc + w_in * p_in_rej + nu
    rate = float(abstain.mean())
    point = LagrangianPoint(
        float(lam), w_err, w_in, w_out, nu, rate, float(objective), float(lagr), rate <= budget.b_rej
    )
    return point, rule, dec


def budget_search(
    inputs: PluginInputs, eval_set: EvaluationSet, budget: BudgetSpec, lambda_grid=None
) -> BudgetResult:
    """Grid search over Lagrange multipliers under an abstention budget.

    Among grid points whose empirical abstention rate is within ``b_rej``,
    returns the one with the smallest constrained objective
    (1 - c_fn) P_in(err, accept) + c_fn P_out(accept); ties go to the
    earliest grid point. If none is feasible, the point with the smallest
    budget overshoot is returned and ``feasible`` is False.
    """
    if len(eval_set) == 0 or len(inputs) == 0:
        raise DataError("budget search needs a non-empty evaluation set")
    if len(inputs) != len(eval_set):
        raise DataError("plug-in inputs and evaluation set differ in length")
    if inputs.labels is None:
        raise DataError("budget search needs predicted labels")
    grid = default_lambda_grid(budget) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        raise ConfigError("lambda grid is empty")
    evaluated = [evaluate_lambda(inputs, eval_set, budget, lam) for lam in grid]
    points = tuple(p for p, _, _ in evaluated)
    feasible = [i for i, p in enumerate(points) if p.feasible]
    if feasible:
        k = min(feasible, key=lambda i: (points[i].objective, i))
    else:
        k = min(range(len(points)), key=lambda i: (points[i].abstention - budget.b_rej, i))
    best, rule, dec = evaluated[k]
    return BudgetResult(best, rule, dec, points, bool(feasible), budget)


# --- constrained OOD formulation with separate inlier constraints -------------


@dataclass(frozen=True)
class KatzSamuelsReport:
    """min P_out(accept) s.t. P_in(reject) <= kappa and P_in(err, accept) <= tau."""

    p_out_accept: float
    p_in_reject: float
    p_in_error_accept: float
    kappa: float
    tau: float

    @property
    def feasible(self) -> bool:
        return self.p_in_reject <= self.kappa and self.p_in_error_accept <= self.tau

    @property
    def objective(self) -> float:
        return self.p_out_accept


def katz_samuels_objective(
    eval_set: EvaluationSet, predictions, abstain, kappa: float, tau: float
) -> KatzSamuelsReport:
    if not eval_set.is_outlier.any() or eval_set.is_outlier.all():
        raise DataError("need both inlier and outlier samples")
    abstain = np.asarray(abstain, dtype=bool)
    p_err, p_in_rej, p_out_acc = _empirical_terms(eval_set, np.asarray(predictions), abstain)
    return KatzSamuelsReport(p_out_acc, p_in_rej, p_err, kappa, tau)


def katz_samuels_search(
    inputs: PluginInputs, eval_set: EvaluationSet, kappa: float, tau: float, cost_grid
) -> tuple[CostSpec | None, KatzSamuelsReport | None, list[tuple[CostSpec, KatzSamuelsReport]]]:
    """Evaluate the black-box rule over a grid of costs; keep the feasible best."""
    rows = []
    for costs in cost_grid:
        dec = black_box_reject(inputs, costs)
        rows.append((costs, katz_samuels_objective(eval_set, inputs.labels, dec.abstain, kappa, tau)))
    feasible = [i for i, (_, r) in enumerate(rows) if r.feasible]
    if not feasible:
        return None, None, rows
    k = min(feasible, key=lambda i: (rows[i][1].objective, i))
    return rows[k][0], rows[k][1], rows


# --- regret accounting against exact densities ------------------------------


@dataclass(frozen=True)
class RegretReport:
    """Excess soft-penalty risk of a plug-in rule and the estimation-error bound.

    Both are expectations under the equal-weight inlier/outlier mixture and
    are estimated from stratified draws (half inlier, half outlier).
    ``inlier_share`` is P_in/(P_in+P_out) at each pooled draw.
    """

    regret: float
    bound: float
    se_gap: float
    inlier_share: np.ndarray = field(repr=False)

    @property
    def slack_in_se(self) -> float:
        return (self.bound - self.regret) / self.se_gap if self.se_gap > 0 else np.inf


def _pointwise_risk(eta, gamma, h, r, costs: CostSpec):
    w_err, c_in, c_out = costs.weights
    n = len(h)
    miss = 1.0 - eta[np.arange(n), h]
    acc = ~r
    return 2.0 * (w_err * gamma * miss * acc + c_in * gamma * r + c_out * (1.0 - gamma) * acc)


def regret_report(rule: LossBasedRule, env, X_in, X_out) -> RegretReport:
    """Regret of ``rule`` against the Bayes rule of ``env`` and the bound
    2 E[sum_y |P_in(y|x) - p_y(x)| + 2 |gamma(x) - s_ood/(1 + s_ood)|]."""
    from .bayes_rules import scod_bayes

    X = np.concatenate([X_in, X_out])
    strata = np.r_[np.zeros(len(X_in), bool), np.ones(len(X_out), bool)]
    eta = env.inlier_posterior(X)
    gamma = env.inlier_share(X)
    inputs = rule.inputs(X)
    hat = black_box_reject(inputs, rule.costs)
    star = scod_bayes(eta, env.density_ratio(X), rule.costs)
    risk_hat = _pointwise_risk(eta, gamma, inputs.labels, np.asarray(hat.abstain), rule.costs)
    risk_star = _pointwise_risk(eta, gamma, star.label, np.asarray(star.abstain), rule.costs)
    s = np.asarray(inputs.s_ood, dtype=float)
    with np.errstate(invalid="ignore"):
        gamma_hat = np.where(np.isinf(s), 1.0, s / (1.0 + s))
    rhs = 2.0 * (np.abs(eta - inputs.class_probs).sum(axis=1) + 2.0 * np.abs(gamma - gamma_hat))
    gap = risk_hat - risk_star - rhs

    def strat_mean(v):
        return 0.5 * v[~strata].mean() + 0.5 * v[strata].mean()

    se = 0.5 * np.sqrt(gap[~strata].var(ddof=1) / (~strata).sum() + gap[strata].var(ddof=1) / strata.sum())
    return RegretReport(strat_mean(risk_hat - risk_star), strat_mean(rhs), float(se), gamma)
