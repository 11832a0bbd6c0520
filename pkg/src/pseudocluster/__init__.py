"""Pseudo-clustered survey data and weighted linear mixed models.

Combines survey datasets of different hierarchical depths into one
pseudo-clustered hierarchy, fits weighted (pseudo-maximum-likelihood)
random-intercept models with robust variances, and ships a Monte Carlo
harness for the multi-stage informative sampling designs used to study them.
"""

from .data import (ClusterRecord, DatasetSummary, HierarchicalDataset,
                   ObservationRecord, SuperclusterRecord, WeightScaling,
                   build_dataset, combine_datasets, combine_two_level,
                   rescale_weights, summarize)
from .csvio import read_csv, write_csv
from .errors import (DataError, EstimationError, IdentifiabilityError,
                     IngestionError, ModelError, NumericError,
                     PseudoclusterError, StructuralError)
from .fitting import (ConvergenceReport, FitResult, fit_intercept_closed_form,
                      fit_linear, fit_three_level, fit_two_level,
                      sandwich_variance)
from .likelihood import (CovarianceBlock, DesignedCluster, DesignedSupercluster,
                         MarginalCovariance, ThreeLevelParams, TwoLevelParams,
                         design_three_level, design_two_level, loglik_three_level,
                         loglik_two_level, marginal_covariance, score_three_level,
                         score_two_level)
from .quadrature import loglik_quadrature_oracle
from .simulation import (MonteCarloConfig, PopulationSpec, SampleDesign,
                         Scenario, SimulationReport, draw_singleton_sample,
                         generate_population, poisson_select_units,
                         pps_select_clusters, run_replication, run_table,
                         true_sigma_u_model4)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
