"""Heterogeneous treatment effect analysis for cluster-randomized trials.

Flexible and standard GLMMs, independence GEE with the Fay-Graubard
correction, small-sample Wald tests for the treatment-by-subgroup
interaction, and a Monte Carlo harness for their type I error.
"""

from .data import (DataError, Dataset, DesignMatrices, Family, ModelSpec, RankDeficientError,
                   build_design, get_family, load_dataset, write_dataset)
from .gee import GeeFitResult, fay_graubard_adjust, fit_gee
from .glmm import FitError, FitResult, fit_glmm, fit_two_step
from .inference import (HTETest, SubgroupEffects, between_within_df, cluster_level_columns,
                        n_minus_p_df, parametric_bootstrap_ci, satterthwaite_df, select_correction,
                        subgroup_effects, wald_interaction_test)
from .simulation import (ScenarioConfig, SimulationSummary, builtin_scenario, generate_dataset,
                         run_scenario, summarize)

__version__ = "0.1.0"
