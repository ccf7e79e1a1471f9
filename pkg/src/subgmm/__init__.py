"""Optimal subspace estimation from overidentifying moment vectors.

The estimator stacks m sample-averaged moment vectors whose expectations lie
in an unknown r-dimensional subspace, combines them with a data-adaptive
symmetric weight, and reads the subspace off the top-r eigenvectors of the
weighted outer product.  The package provides the moment constructions for
factor, mixture and index models, the two-step covariance-weighted procedure
with hard-thresholded pseudoinverse weighting, dimension estimation,
distributed aggregation over data shards, and a seeded Monte Carlo harness.
"""

from .chi2 import chi2_cdf, chi2_quantile, chi2_sf
from .distributed import InProcessTransport, LocalSummary, aggregate, distributed_pipeline, local_summarize
from .estimator import (
    MomentCovariance,
    RankEstimate,
    SubspaceEstimate,
    SubspaceMetrics,
    WeightMatrix,
    augmented_eigen,
    chi2_rank_statistic,
    estimate_rank,
    estimate_sigma,
    gmm_objective,
    subspace_metrics,
    thresholded_pinv,
    two_step_gmm,
    weighted_eigen,
)
from .harness import (
    ExperimentConfig,
    ExperimentResult,
    bootstrap,
    cosine_bank_scales,
    emit,
    evaluate_projection_r2,
    pooled_se,
    run_experiment,
    whiten,
)
from .models import (
    CsvParseError,
    Dataset,
    GroundTruth,
    gen_factor,
    gen_index_model,
    gen_mixed_linear,
    gen_mixed_logistic,
    index_model_mean,
    load_csv,
    write_csv,
)
from .moments import (
    DegenerateMomentError,
    MomentEvaluationError,
    MomentFunctionSet,
    MomentMatrix,
    concat,
    cosine_moments,
    custom_moments,
    factor_moments,
    materialize,
    mixture_moments,
    phd_moments,
    sign_robust_moments,
)
from .rng import derive_seed, substream

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GroundTruth",
    "CsvParseError",
    "gen_factor",
    "gen_mixed_linear",
    "gen_mixed_logistic",
    "gen_index_model",
    "index_model_mean",
    "load_csv",
    "write_csv",
    "MomentFunctionSet",
    "MomentMatrix",
    "MomentEvaluationError",
    "DegenerateMomentError",
    "factor_moments",
    "mixture_moments",
    "cosine_moments",
    "sign_robust_moments",
    "phd_moments",
    "custom_moments",
    "concat",
    "materialize",
    "WeightMatrix",
    "MomentCovariance",
    "SubspaceEstimate",
    "SubspaceMetrics",
    "RankEstimate",
    "weighted_eigen",
    "gmm_objective",
    "estimate_sigma",
    "thresholded_pinv",
    "two_step_gmm",
    "estimate_rank",
    "chi2_rank_statistic",
    "subspace_metrics",
    "augmented_eigen",
    "LocalSummary",
    "InProcessTransport",
    "local_summarize",
    "aggregate",
    "distributed_pipeline",
    "ExperimentConfig",
    "ExperimentResult",
    "run_experiment",
    "bootstrap",
    "evaluate_projection_r2",
    "whiten",
    "emit",
    "cosine_bank_scales",
    "pooled_se",
    "chi2_cdf",
    "chi2_sf",
    "chi2_quantile",
    "substream",
    "derive_seed",
]
