from .churn import ChurnCurve, churn_curve
from .distributions import (
    DEFAULT_QUANTILES,
    CohortColumns,
    CohortStats,
    Divergence,
    EcdfTable,
    QuantileReport,
    accuracy_bin,
    cohort_compare,
    cohort_labels,
    cohort_value,
    ecdf_and_quantiles,
    quantile_sorted,
)
from .spatial import (
    AttenuationResult,
    ModalityShare,
    attenuation_analysis,
    attribute_correlation,
    impute_attribute,
    modality_share,
)
from .stats import Correlation, pearson
from .subnets import (
    MovementReport,
    ScaleConfig,
    SubnetAggregate,
    VisitHistogram,
    mean_error_by_subnet,
    merge_visits,
    scale_error_correlation,
    subnet_aggregate,
    subnet_movement,
    visit_histogram,
    with_mean_errors,
)

__all__ = [
    "AttenuationResult",
    "ChurnCurve",
    "CohortColumns",
    "CohortStats",
    "Correlation",
    "DEFAULT_QUANTILES",
    "Divergence",
    "EcdfTable",
    "ModalityShare",
    "MovementReport",
    "QuantileReport",
    "ScaleConfig",
    "SubnetAggregate",
    "VisitHistogram",
    "accuracy_bin",
    "attenuation_analysis",
    "attribute_correlation",
    "churn_curve",
    "cohort_compare",
    "cohort_labels",
    "cohort_value",
    "ecdf_and_quantiles",
    "impute_attribute",
    "mean_error_by_subnet",
    "merge_visits",
    "modality_share",
    "pearson",
    "quantile_sorted",
    "scale_error_correlation",
    "subnet_aggregate",
    "subnet_movement",
    "visit_histogram",
    "with_mean_errors",
]
