"""Optimal dynamic monitoring-and-add-on regimes from longitudinal cohorts.

Estimates when a subject should be seen (a visit) and whether an add-on
intervention should accompany the visit, at each decision time, from
observational panel data.  Two estimators share one backward-induction
engine: a doubly robust weighted regression (``method="WOMA"``) and its
unweighted analog (``method="QLOMA"``).  Supporting modules provide
balancing/inverse-probability weights, censoring weights, missing-data
completion, a fully specified synthetic cohort generator with known optimal
rules, and a Monte Carlo study driver.  The :mod:`dmar.cli` module exposes
all of it as the ``dmar`` command.
"""

from .engine import (
    BlipSpec,
    FittedRegime,
    RegimeDecisions,
    StageFit,
    StageFitError,
    apply_regime,
    blip_addon,
    blip_visit,
    decide,
    fit_regime,
    load_regime,
    policy_from_regime,
    pseudo_outcome,
    regime_from_json,
    regime_to_json,
    sandwich_variance_one_stage,
    save_regime,
    stage_design,
)
from .glm import (
    DesignMatrix,
    FitResult,
    fit_logistic,
    fit_multinomial,
    fit_wls,
    predict_proba,
)
from .missing import (
    ImputationConfig,
    ImputationError,
    locf_complete,
    pool_regimes,
    sequential_impute,
)
from .panel import (
    Cohort,
    ColumnRoleMap,
    PanelError,
    PositivityError,
    StrategyCode,
    ValidationReport,
    load_cohort,
    validate_cohort,
    write_cohort,
)
from .simulate import (
    DgmScenario,
    PolicyValue,
    SCENARIO_PRESETS,
    TRUE_BLIPS,
    generate_cohort,
    scenario,
    true_optimal_policy,
    value_function,
    vectorized_policy,
)
from .study import (
    EstimatorSpec,
    StudyBundle,
    StudyConfig,
    StudyError,
    emit_bias_table,
    emit_value_report,
    run_study,
    standard_estimators,
    value_report,
)
from .weights import (
    BalanceTable,
    PropensityEstimates,
    WeightVector,
    balance_diagnostics,
    estimate_propensities_factorized,
    estimate_propensities_joint,
    ipcw_time_dependent,
    ipcw_time_fixed,
    ipt_weights,
    overlap_weights,
    product_weights,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # panel
    "Cohort",
    "ColumnRoleMap",
    "PanelError",
    "PositivityError",
    "StrategyCode",
    "ValidationReport",
    "load_cohort",
    "validate_cohort",
    "write_cohort",
    # glm
    "DesignMatrix",
    "FitResult",
    "fit_logistic",
    "fit_multinomial",
    "fit_wls",
    "predict_proba",
    # weights
    "BalanceTable",
    "PropensityEstimates",
    "WeightVector",
    "balance_diagnostics",
    "estimate_propensities_factorized",
    "estimate_propensities_joint",
    "ipcw_time_dependent",
    "ipcw_time_fixed",
    "ipt_weights",
    "overlap_weights",
    "product_weights",
    # engine
    "BlipSpec",
    "FittedRegime",
    "RegimeDecisions",
    "StageFit",
    "StageFitError",
    "apply_regime",
    "blip_addon",
    "blip_visit",
    "decide",
    "fit_regime",
    "load_regime",
    "policy_from_regime",
    "pseudo_outcome",
    "regime_from_json",
    "regime_to_json",
    "sandwich_variance_one_stage",
    "save_regime",
    "stage_design",
    # missing
    "ImputationConfig",
    "ImputationError",
    "locf_complete",
    "pool_regimes",
    "sequential_impute",
    # simulate
    "DgmScenario",
    "PolicyValue",
    "SCENARIO_PRESETS",
    "TRUE_BLIPS",
    "generate_cohort",
    "scenario",
    "true_optimal_policy",
    "value_function",
    "vectorized_policy",
    # study
    "EstimatorSpec",
    "StudyBundle",
    "StudyConfig",
    "StudyError",
    "emit_bias_table",
    "emit_value_report",
    "run_study",
    "standard_estimators",
    "value_report",
]
