"""Layerwise Riemannian metrics for modular models.

Composable modules with per-layer Jacobians, Woodbury-based metric-preconditioned
gradient steps, and numerical laboratories for the action principle of gradient
flow and for leave-one-replaced algorithmic stability.
"""
from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    IoFailure,
    LayerwiseError,
    NonFinite,
    NotPositiveDefinite,
    NotSymmetric,
    RankDeficient,
    StaleTape,
    VerificationFailure,
)
from .metric import LayerMetric, assemble_layer_metrics, build_output_metric, riemannian_gradient, woodbury_apply_inverse
from .modules import (
    Bias,
    Linear,
    Parallel,
    ParameterState,
    PointwiseNonlinearity,
    Sequential,
    compose_parallel,
    compose_sequential,
    forward,
    init_params,
    layer_jacobians,
    mlp,
    parameter_gradient,
)
from .optimizer import OptimizerConfig, riemannian_sgd_step, sgd_baseline_step, train
from .rng import SplitMix64

__version__ = "0.1.0"
