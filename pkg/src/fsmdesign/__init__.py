"""Finite selection model designs for randomized experiments."""

from .baselines import (
    MahalanobisCriterion,
    RerandomizationBudgetError,
    RerandSpec,
    crd,
    estimate_threshold,
    max_pairwise_mahalanobis,
    rerandomize,
)
from .core import (
    CovariateTable,
    DataError,
    DesignSpec,
    FSMError,
    FullSampleStats,
    RngStream,
    Selection,
    SingularCovarianceError,
    SpecError,
    full_sample_stats,
    load_covariates,
    map_replicates,
)
from .designs import Design, DesignSampler, parse_design
from .diagnostics import (
    BalanceConfig,
    BalanceReport,
    GapMode,
    asmd,
    asmd_vector,
    frobenius_gap,
    second_order_expand,
    summarize_draws,
)
from .engine import AssignmentResult, TraceEntry, run_fsm, run_sequential, run_stratified
from .inference import (
    OutcomeTable,
    Statistic,
    TestResult,
    diff_in_means,
    randomization_se,
    randomization_test,
    regression_imputation,
)
from .selection import GroupState, Regime, select_next
from .simulation import hainmueller_covariates, potential_outcomes
from .som import SelectionOrderMatrix, StratifiedMethod, generate_som, generate_stratified_som

__all__ = [
    "asmd",
    "asmd_vector",
    "AssignmentResult",
    "BalanceConfig",
    "BalanceReport",
    "CovariateTable",
    "crd",
    "DataError",
    "Design",
    "DesignSampler",
    "DesignSpec",
    "diff_in_means",
    "estimate_threshold",
    "frobenius_gap",
    "FSMError",
    "full_sample_stats",
    "FullSampleStats",
    "GapMode",
    "generate_som",
    "generate_stratified_som",
    "GroupState",
    "hainmueller_covariates",
    "load_covariates",
    "MahalanobisCriterion",
    "map_replicates",
    "max_pairwise_mahalanobis",
    "OutcomeTable",
    "parse_design",
    "potential_outcomes",
    "randomization_se",
    "randomization_test",
    "Regime",
    "regression_imputation",
    "RerandomizationBudgetError",
    "rerandomize",
    "RerandSpec",
    "RngStream",
    "run_fsm",
    "run_sequential",
    "run_stratified",
    "second_order_expand",
    "select_next",
    "Selection",
    "SelectionOrderMatrix",
    "SingularCovarianceError",
    "SpecError",
    "Statistic",
    "StratifiedMethod",
    "summarize_draws",
    "TestResult",
    "TraceEntry",
]

__version__ = "0.1.0"
