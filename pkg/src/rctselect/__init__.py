"""Selecting ATE estimators and roll-out policies across a corpus of RCTs."""

from .aggregate import (
    ComparisonMatrix,
    RankRow,
    ScoreVector,
    TTestResult,
    compare_all,
    histogram,
    normalized_scores,
    rank_copeland,
    t_test_one_sample,
)
from .corpus import (
    Corpus,
    GeneratorConfig,
    Rct,
    TailReport,
    UnitRecord,
    Units,
    gini_curve,
    hill_estimate,
    ingest_csv,
    simulate_corpus,
)
from .crossval import (
    MseEstimate,
    SplitPlan,
    corpus_errors,
    corpus_errors_many,
    heldout_error,
    make_splits,
)
from .errors import DataError, DegenerateTailError, EstimatorFailure, NumericalError, SingularDesignError
from .estimators import (
    Estimate,
    EstimatorSpec,
    WinsorBounds,
    estimate_dm,
    estimate_gen_dd,
    estimate_gen_dd_w,
    estimate_mom,
    run_estimator,
    winsorize_apply,
    winsorize_fit,
)
from .policy import (
    ImpactEstimate,
    PolicyFeatures,
    PolicySpec,
    decide_t_threshold,
    f_hat,
    fit_linear_policy,
    online_policy_run,
    oracle_policy,
    sweep_critical_t,
)

__version__ = "0.1.0"
