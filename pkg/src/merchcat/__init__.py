"""Multi-modal merchant category identification.

A merchant is described by two views: a daily transaction-feature time
series and a sparse vector of customers shared with known merchants.
This package provides encoders for both views, a fusion head that
generates a per-merchant classifier from the affinity representation,
training and evaluation protocols, and a synthetic transaction-world
generator for end-to-end experiments.
"""

from .affinity import AffinityVector, SparseFloatVector, affinity_encode, aggregate, l1_normalize, topk_truncate
from .autodiff import Tensor, no_grad
from .bundle import DatasetBundle, make_bundle, read_bundle, write_bundle
from .datagen import (
    FEATURE_NAMES,
    CategoryPattern,
    TransactionLog,
    WorldConfig,
    build_affinity,
    extract_features,
    generate_world,
)
from .errors import BundleFormatError, DimensionError, UsageError
from .estimators import (
    LogisticRegressionClassifier,
    MerchantRecord,
    NeuralCategoryClassifier,
    OneNearestNeighborClassifier,
    RandomGuessClassifier,
    build_estimator,
    records_from_bundle,
)
from .evaluation import (
    MetricReport,
    bad_actor_detection,
    compute_metrics,
    kmeans,
    mds_project,
    stratified_kfold,
    welch_ttest,
)
from .optim import OneCycleSchedule, SgdState, one_cycle_at, sgd_step

__version__ = "0.1.0"

__all__ = [
    "AffinityVector",
    "BundleFormatError",
    "CategoryPattern",
    "DatasetBundle",
    "DimensionError",
    "FEATURE_NAMES",
    "LogisticRegressionClassifier",
    "MerchantRecord",
    "MetricReport",
    "NeuralCategoryClassifier",
    "OneCycleSchedule",
    "OneNearestNeighborClassifier",
    "RandomGuessClassifier",
    "SgdState",
    "SparseFloatVector",
    "Tensor",
    "TransactionLog",
    "UsageError",
    "WorldConfig",
    "affinity_encode",
    "aggregate",
    "bad_actor_detection",
    "build_affinity",
    "build_estimator",
    "compute_metrics",
    "extract_features",
    "generate_world",
    "kmeans",
    "l1_normalize",
    "make_bundle",
    "mds_project",
    "no_grad",
    "one_cycle_at",
    "read_bundle",
    "records_from_bundle",
    "sgd_step",
    "stratified_kfold",
    "topk_truncate",
    "welch_ttest",
    "write_bundle",
]
