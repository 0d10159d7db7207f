"""Trace-driven simulator of proactive caching at cache-enabled base stations."""

from .placement import CachePlacement, StorageBudget, greedy_place, nestedness_check, optimal_place_bruteforce
from .popularity import (
    CfHyperParams,
    FactorModel,
    RatingMatrix,
    RatingSplit,
    TrainingError,
    build_rating_matrix,
    estimate_popularity,
    predict_rating,
    rating_rmse,
    split_ratings,
    train_reg_svd,
)
from .simcore import LinkConfig, SimResult, analytic_backhaul_load, backhaul_load, satisfaction, simulate
from .trace import (
    Catalog,
    Content,
    Request,
    RequestLog,
    SyntheticTraceParams,
    TraceStats,
    assign_requests_to_cells,
    generate_synthetic_trace,
    parse_final_traces,
    trace_stats,
)

__version__ = "0.1.0"
