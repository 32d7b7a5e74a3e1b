"""Latent factor analysis of sparse incomplete matrices with plain and PI-refined SGD."""

from .data import (
    ColdNodeWarning,
    DuplicateEntryError,
    HdiMatrix,
    ParseError,
    RatingTriple,
    SplitSpec,
    generate_synthetic,
    parse_ratings,
    split_ratings,
    write_csv,
)
from .harness import (
    ExperimentConfig,
    ExperimentResult,
    SweepConfig,
    SweepRow,
    emit_metrics_csv,
    read_metrics_csv,
    run_experiment,
    sweep_gains,
    train,
)
from .metrics import EpochReport, check_convergence, mae, rmse
from .model import (
    Hyperparams,
    LatentFactors,
    init_factors,
    instance_error,
    predict,
    regularized_loss,
)
from .optimizers import (
    DivergenceError,
    EpochStats,
    OptimizerKind,
    PiState,
    pi_refine_error,
    pilf_step,
    plain_sgd_step,
    run_epoch,
    snapshot_accumulators,
)

__version__ = "0.1.0"
