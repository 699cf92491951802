"""Few-shot embedding evaluation with latent augmentation.

A seeded k-means dictionary of (prototype, covariance) pairs turns a
handful of novel-class embeddings into a full training set by sampling
intra-class variation observed on base classes. The package bundles the
dictionary builder, augmentation and calibration samplers, deterministic
meta-task evaluation, simple classifier heads, and a config-driven
experiment runner with a CLI.
"""

from ._parallel import THREADS_ENV, thread_count
from ._seeding import check_seed, derive_rng, derive_seeds
from ._version import __version__
from .classifiers import (
    CentroidModel,
    LinearModel,
    fit_logistic,
    fit_nearest_centroid,
    fit_ridge,
    logistic_objective,
    predict_linear,
    predict_nearest_centroid,
)
from .cluster import (
    ClusterModel,
    assign,
    kmeans_fit,
    load_cluster_model,
    nearest_prototype_cosine,
    save_cluster_model,
)
from .contrastive import (
    ViewBatch,
    infonce,
    momentum_update,
    symmetric_clp_loss,
)
from .dictionary import (
    BaseDictionary,
    ClassStats,
    CovarianceType,
    augment,
    build_dictionary,
    build_supervised_dictionary,
    class_stats,
    covariance_pearson,
    distribution_calibration,
    load_dictionary,
    sample_gaussian,
    sample_variations,
    save_dictionary,
)
from .estimators import (
    CentroidClassifier,
    LatentAugmenter,
    LogisticClassifier,
    RidgeClassifier,
    SeededKMeans,
)
from .experiment import (
    AugmentationConfig,
    ClassifierConfig,
    DataConfig,
    DictionaryConfig,
    ExperimentConfig,
    ExperimentError,
    ProtocolConfig,
    config_hash,
    replay_manifest,
    run_ablation_sweep,
    run_experiment,
)
from .metatask import (
    MetaTask,
    TaskProtocol,
    load_task_series,
    sample_series,
    sample_task,
    save_task_series,
    validate_task,
)
from .metrics import (
    AggregateReport,
    TaskScore,
    aggregate,
    build_report,
    f1_per_class,
    gfsl_task_metrics,
    group_task_metrics,
    hmean,
    mixture_task_metrics,
    report_csv_row,
    report_to_dict,
    sig6,
)
from .store import (
    EmbeddingDataset,
    SyntheticSpec,
    concat_datasets,
    generate_synthetic,
    l2_normalize,
    leave_one_class_out,
    load_embeddings,
    save_embeddings,
    save_embeddings_csv,
    synthetic_components,
)

__all__ = [
    "THREADS_ENV",
    "thread_count",
    "check_seed",
    "derive_rng",
    "derive_seeds",
    "__version__",
    "CentroidModel",
    "LinearModel",
    "fit_logistic",
    "fit_nearest_centroid",
    "fit_ridge",
    "logistic_objective",
    "predict_linear",
    "predict_nearest_centroid",
    "ClusterModel",
    "assign",
    "kmeans_fit",
    "load_cluster_model",
    "nearest_prototype_cosine",
    "save_cluster_model",
    "ViewBatch",
    "infonce",
    "momentum_update",
    "symmetric_clp_loss",
    "BaseDictionary",
    "ClassStats",
    "CovarianceType",
    "augment",
    "build_dictionary",
    "build_supervised_dictionary",
    "class_stats",
    "covariance_pearson",
    "distribution_calibration",
    "load_dictionary",
    "sample_gaussian",
    "sample_variations",
    "save_dictionary",
    "CentroidClassifier",
    "LatentAugmenter",
    "LogisticClassifier",
    "RidgeClassifier",
    "SeededKMeans",
    "AugmentationConfig",
    "ClassifierConfig",
    "DataConfig",
    "DictionaryConfig",
    "ExperimentConfig",
    "ExperimentError",
    "ProtocolConfig",
    "config_hash",
    "replay_manifest",
    "run_ablation_sweep",
    "run_experiment",
    "MetaTask",
    "TaskProtocol",
    "load_task_series",
    "sample_series",
    "sample_task",
    "save_task_series",
    "validate_task",
    "AggregateReport",
    "TaskScore",
    "aggregate",
    "build_report",
    "f1_per_class",
    "gfsl_task_metrics",
    "group_task_metrics",
    "hmean",
    "mixture_task_metrics",
    "report_csv_row",
    "report_to_dict",
    "sig6",
    "EmbeddingDataset",
    "SyntheticSpec",
    "concat_datasets",
    "generate_synthetic",
    "l2_normalize",
    "leave_one_class_out",
    "load_embeddings",
    "save_embeddings",
    "save_embeddings_csv",
    "synthetic_components",
]
