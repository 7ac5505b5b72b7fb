"""Posterior learning-debt monitoring and cost-sensitive retraining policies
for conjugate Bayesian linear regression, with a deployment-calibrated
simulation harness."""

from .nig import (
    NigParams,
    Observation,
    StudentT,
    kl_nig,
    kl_nig_mc,
    log_score,
    predictive,
    predictive_debt_mc,
    update,
)
from .scenario import (
    KAPPA_COSTS,
    SHIFT_PROBS,
    PathData,
    RegimeKind,
    ScenarioCell,
    generate_path,
    warm_start,
)
from .monitor import (
    AgeAdjustment,
    MonitoringRecord,
    adjust,
    fit_age_adjustment,
    monitoring_features,
    raw_debt,
)
from .policies import (
    PathEngine,
    PolicyKind,
    PolicySpec,
    PolicyTrajectory,
    UtilityModel,
    binary_threshold,
    cusum_step,
    fit_utility_model,
    one_period_regret,
    predict_regret,
    run_policy,
)
from .evaluate import (
    ScoreUnit,
    ScoreUnitKind,
    objective,
    paired_bootstrap_ci,
    score_unit,
    tune_policy,
)
from .pipeline import PRIOR, ExperimentConfig, run_pipeline, selftest

__version__ = "0.1.0"
