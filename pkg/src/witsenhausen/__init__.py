"""Numerical design of Witsenhausen-type two-stage team decision policies."""

from .exactcost import CostReport, QuadratureConfig, stage1_cost, stage2_cost, total_cost
from .grid import (
    ChannelModel,
    Grid,
    build_channel,
    build_grid,
    channel_row_banded,
    channel_row_exact,
    grid_for,
    quantize,
)
from .optimizer import (
    DivergenceError,
    OptimizerConfig,
    ProblemParams,
    converge_inner,
    distortion_profile,
    run_relaxation,
    sample_cost,
    sample_source,
    update_inner,
    update_outer,
)
from .policy import (
    InnerPolicySamples,
    InnerPolicyThresholds,
    OuterPolicy,
    evaluate_inner,
    extract_thresholds,
    refine,
)

__version__ = "0.1.0"
