"""moelab: sparse mixture-of-experts gating and fusion, irregular
time-series encoding, and EM-based mixture-of-experts estimation with a
convergence-rate study harness."""

from .fusion import (
    ExpertParams,
    MissingEmbedding,
    ModalityBatch,
    RouterMode,
    entropy_reg_loss,
    expert_forward,
    fuse_with_gradients,
    importance_loss,
    route_and_fuse,
    substitute_missing,
)
from .gating import GateParams, SparseGateWeights, gate_jacobian, topk_gate
from .gmoe import (
    MixingMeasure,
    RegressionDataset,
    conditional_density,
    em_fit,
    init_near_truth,
    load_measure,
    log_likelihood,
    sample_synthetic,
    sample_true_measure,
    save_measure,
)
from .harness import RateStudyConfig, fit_slope, run_gradcheck, run_rate_study
from .irregularity import (
    DiscretizedEmbedding,
    IrregularSeries,
    TimeEmbedParams,
    load_series,
    mtand_discretize,
    save_series,
    time_embed,
    utde_combine,
    utde_impute,
)
from .voronoi import RBarTable, VoronoiCells, assign_cells, loss_d1, loss_d2, phi

__version__ = "0.1.0"

__all__ = [
    "ExpertParams",
    "MissingEmbedding",
    "ModalityBatch",
    "RouterMode",
    "entropy_reg_loss",
    "expert_forward",
    "fuse_with_gradients",
    "importance_loss",
    "route_and_fuse",
    "substitute_missing",
    "GateParams",
    "SparseGateWeights",
    "gate_jacobian",
    "topk_gate",
    "MixingMeasure",
    "RegressionDataset",
    "conditional_density",
    "em_fit",
    "init_near_truth",
    "load_measure",
    "log_likelihood",
    "sample_synthetic",
    "sample_true_measure",
    "save_measure",
    "RateStudyConfig",
    "fit_slope",
    "run_gradcheck",
    "run_rate_study",
    "DiscretizedEmbedding",
    "IrregularSeries",
    "TimeEmbedParams",
    "load_series",
    "mtand_discretize",
    "save_series",
    "time_embed",
    "utde_combine",
    "utde_impute",
    "RBarTable",
    "VoronoiCells",
    "assign_cells",
    "loss_d1",
    "loss_d2",
    "phi",
]
