"""Selective classification with out-of-distribution detection.

Exact Bayes rules on synthetic environments, small trainable scorers,
post-hoc baselines, plug-in rejectors and the evaluation metrics used to
compare them.
"""

from .bayes_rules import (
    BudgetSpec,
    CostSpec,
    Decision,
    chow_rule,
    density_rejection,
    msp_disagreement_witness,
    open_set_bayes,
    scod_bayes,
)
from .distributions import (
    GaussianClassConditional,
    LabeledMixtureDistribution,
    ScodEnvironment,
    TruncatedGaussian,
    UniformBox,
    open_set_restrict,
)
from .errors import ConfigError, DataError, NumericError, ScodError
from .metrics import EvaluationSet, joint_risk, ood_detection_metrics, risk_coverage_curve
from .plugin_rejectors import (
    PluginInputs,
    black_box_reject,
    budget_search,
    coupled_reject,
    estimate_pi_mix,
    loss_based_reject,
    noise_correct,
)
from .scorer_models import Architecture, OracleScorer, ScorerModel, TrainConfig, train

__version__ = "0.1.0"
