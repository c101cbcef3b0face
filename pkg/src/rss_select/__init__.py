"""Stability selection with constrained block subsampling for multi-center voxel data."""

from .analysis import (
    OverlapResult,
    estimate_false_positives,
    evaluate_prediction,
    fit_laplace,
    gap_threshold,
    laplace_support,
    overlap,
    threshold_support,
)
from .clustering import Clustering, cluster_voxels, kmeans, standardize_columns
from .data_model import (
    CenterCollection,
    Dataset,
    FormatError,
    ModelWeights,
    SupportSet,
    VoxelMask,
    load_dataset,
    save_dataset,
    voxel_index_to_coord,
)
from .rss_engine import RSSConfig, ScoreMap, randomized_l1_run, rss_run
from .solvers import (
    SolverConfig,
    compute_alpha_max,
    solve_l1_logistic,
    solve_l2_logistic,
    solve_l2_svm,
    two_sample_ttest,
)
from .subsampling import SubsampleConfig, make_draws
from .synthgen import GroundTruth, SynthConfig, generate_multicenter, score_support

__all__ = [
    "CenterCollection",
    "Clustering",
    "Dataset",
    "FormatError",
    "GroundTruth",
    "ModelWeights",
    "OverlapResult",
    "RSSConfig",
    "ScoreMap",
    "SolverConfig",
    "SubsampleConfig",
    "SupportSet",
    "SynthConfig",
    "VoxelMask",
    "cluster_voxels",
    "compute_alpha_max",
    "estimate_false_positives",
    "evaluate_prediction",
    "fit_laplace",
    "gap_threshold",
    "generate_multicenter",
    "kmeans",
    "laplace_support",
    "load_dataset",
    "make_draws",
    "overlap",
    "randomized_l1_run",
    "rss_run",
    "save_dataset",
    "score_support",
    "solve_l1_logistic",
    "solve_l2_logistic",
    "solve_l2_svm",
    "standardize_columns",
    "threshold_support",
    "two_sample_ttest",
    "voxel_index_to_coord",
]

__version__ = "0.1.0"
