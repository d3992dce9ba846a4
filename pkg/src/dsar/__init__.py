"""Distributed least-squares estimation and inference for spatial autoregression."""
from .cluster import AggregateEstimate, Message, PipelineResult, aggregate_os, aggregate_wlse, run_pipeline, run_twlse
from .estimator import DistributedSAR
from .exceptions import (
    AggregationError,
    ConfigurationError,
    ConvergenceError,
    DimensionError,
    DSARError,
    IsolatedNodeWarning,
    ModelValidityError,
    NegativeVarianceError,
    ProtocolError,
    SolverError,
    WorkerFailure,
)
from .harness import ExperimentConfig, MetricsTable, fit_global, run_experiment
from .inference import (
    SandwichCovariance,
    build_pack,
    build_xi_vt,
    confidence_intervals,
    estimate_plugins,
    make_projectors,
    sandwich,
    sigma1_exact,
    sigma1_projected,
)
from .lse import LocalSummary, SolverOptions, eval_objective, fit_local
from .network import Partition, SparseNetwork, WorkerShard, build_shard, build_shards, partition_uniform, row_normalize
from .synth import NetworkSpec, NoiseModel, TrueModel, make_dataset

__version__ = "0.1.0"
