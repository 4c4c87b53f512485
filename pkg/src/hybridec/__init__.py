"""Treatment-effect estimation for hybrid trials with external controls.

The package covers the full analysis pipeline: data validation, selection
diagrams with d-separation to vet the adjustment set, cross-fitted
nuisance models, five effect estimators with influence-curve or bootstrap
inference, empirical diagnostics, and a Monte Carlo harness.
"""

__version__ = "0.1.0"

from .data import (
    TrialDataset,
    TrialSchema,
    ValidationReport,
    load_dataset,
    split_by_source,
    write_dataset,
)
from .diagnostics import (
    DiagnosticsReport,
    bucketed_outcomes,
    diagnostics_report,
    implication_test,
    propensity_difference,
)
from .estimators import (
    EstimatorConfig,
    TauEstimate,
    eif,
    eif_vector,
    estimate,
    tau_aipw,
    tau_ipdw,
    tau_om,
    tau_rct,
    tau_tmle,
)
from .graph import (
    AdjustmentVerdict,
    SelectionSwig,
    d_separated,
    minimal_adjustment_sets,
    node_split,
    parse_graph,
    verify_adjustment,
)
from .inference import InferenceResult, bootstrap_interval, hypothesis_test, ic_interval
from .learners import LearnerSpec, NuisanceFits, crossfit, estimate_variance_ratio, fit
from .simulation import (
    DgpConfig,
    EstimatorRun,
    SimulationResult,
    TrueNuisances,
    generate,
    power_curve,
    run_replicates,
    setting_dgp,
    setting_runs,
)

__all__ = [
    "__version__",
    "TrialDataset",
    "TrialSchema",
    "ValidationReport",
    "load_dataset",
    "split_by_source",
    "write_dataset",
    "LearnerSpec",
    "NuisanceFits",
    "fit",
    "crossfit",
    "estimate_variance_ratio",
    "TauEstimate",
    "EstimatorConfig",
    "estimate",
    "eif",
    "eif_vector",
    "tau_om",
    "tau_ipdw",
    "tau_aipw",
    "tau_tmle",
    "tau_rct",
    "InferenceResult",
    "ic_interval",
    "bootstrap_interval",
    "hypothesis_test",
    "SelectionSwig",
    "AdjustmentVerdict",
    "parse_graph",
    "node_split",
    "d_separated",
    "verify_adjustment",
    "minimal_adjustment_sets",
    "DiagnosticsReport",
    "propensity_difference",
    "bucketed_outcomes",
    "implication_test",
    "diagnostics_report",
    "DgpConfig",
    "TrueNuisances",
    "EstimatorRun",
    "SimulationResult",
    "generate",
    "run_replicates",
    "power_curve",
    "setting_dgp",
    "setting_runs",
]
