"""Whole-body keypoint network toolkit: search-space modeling, analytic MAC
costing, weight-shared supernet training, budget-constrained architecture
search, geometry, metrics, and dataset utilities."""

__version__ = "0.1.0"

from .cost import CostReport, allocation_report, conv_cost, subnetwork_cost
from .estimators import ConstrainedSearch, SupernetTrainer
from .geometry import (
    AffineTransform,
    Box,
    HeatmapStack,
    decode_quarter_offset,
    encode_gaussian,
    expand_roi,
    roi_align,
)
from .metrics import OksParams, PoseResult, map_mar, oks
from .search import (
    SearchConfig,
    SearchResult,
    TrialRecord,
    pareto_report,
    run_constrained_search,
    run_proportional_baseline,
)
from .space import (
    SearchSpace,
    SubNetworkSpec,
    enumerate_count,
    enumerate_specs,
    get_preset,
    load_space,
    reference_spec,
    sample_extreme,
    sample_random,
    save_space,
    validate,
)
from .supernet import (
    SupernetConfig,
    SupernetParams,
    TrainBatch,
    forward_subnet,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_step_sandwich,
)

__all__ = [name for name in dir() if not name.startswith("_")]
