"""Design and analysis of cluster-randomized SMARTs.

Weighted estimating-equation estimation of embedded cluster-level dynamic
treatment regimens, closed-form sample size calculators, and a Monte Carlo
data-generating harness for power studies.
"""

from smart_cluster.design import (
    ADEPT,
    PROTOTYPICAL,
    DesignKind,
    EmbeddedDtr,
    TreatmentPath,
    cell_label,
    consistent_dtrs,
    design_cells,
    embedded_dtrs,
    is_consistent,
    known_weight,
    parse_design,
)
from smart_cluster.data import (
    ClusterRecord,
    DataValidationError,
    TrialDataset,
    ValidationReport,
    parse_dataset,
    read_csv,
    validate,
    write_csv,
)
from smart_cluster.estimation import (
    ContrastResult,
    EstimationError,
    FitResult,
    MarginalMeanSpec,
    WorkingCovariance,
    contrast_vector,
    dtr_means,
    estimate_working_cov,
    fit,
    regressor_row,
    sandwich_covariance,
    solve_weighted_ee,
    wald_test,
)
from smart_cluster.power import (
    CellMoments,
    SampleSizeInputs,
    check_assumption2,
    detectable_effect_size,
    required_clusters,
    required_clusters_from_tau,
    rho_conditional,
    rho_unconditional,
    tau2_bound,
)
from smart_cluster.simulation import (
    MarginalMoments,
    Scenario,
    clip_fk,
    cov_clipped_normal,
    generate_trial,
    mc_power,
    mixture_moments,
    preset,
    unconditional_moments,
    var_clipped_normal,
)

__version__ = "0.1.0"
SCHEMA = "smart-cluster/v1"
