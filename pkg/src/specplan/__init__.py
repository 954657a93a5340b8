"""specplan: budget-aware draft-tree planning and simulation for speculative decoding."""

from .controller import ControllerConfig, ControllerDecision, replay_trace, run_cycle
from .cost_model import (
    CalibrationFit,
    CostModelParams,
    CycleLatencies,
    EmaBias,
    LatencyQuery,
    VerifyLatencyEstimator,
    bytes_moved,
    ema_update,
    estimate_verify_latency,
    fit_static_calibration,
    flops,
    roofline_latency,
)
from .draft_tree import (
    DraftTree,
    TreeNode,
    beam_expand,
    best_first_expand,
    build_tree,
    marginal_gains,
    surrogate_of,
)
from .lattice import (
    CandidateLattice,
    MarginalBlock,
    SyntheticPairConfig,
    generate_synthetic_pair,
    sample_continuation,
    top_k_truncate,
)
from .verify_sim import (
    AcceptanceRecord,
    CycleRecord,
    Policy,
    SimCache,
    SimConfig,
    TargetRule,
    ar_decode,
    commit,
    decode,
    linearize,
    realized_speedup,
    verify_tree,
)

__all__ = [
    "AcceptanceRecord",
    "CalibrationFit",
    "CandidateLattice",
    "ControllerConfig",
    "ControllerDecision",
    "CostModelParams",
    "CycleLatencies",
    "CycleRecord",
    "DraftTree",
    "EmaBias",
    "LatencyQuery",
    "MarginalBlock",
    "Policy",
    "SimCache",
    "SimConfig",
    "SyntheticPairConfig",
    "TargetRule",
    "TreeNode",
    "VerifyLatencyEstimator",
    "ar_decode",
    "beam_expand",
    "best_first_expand",
    "build_tree",
    "bytes_moved",
    "commit",
    "decode",
    "ema_update",
    "estimate_verify_latency",
    "fit_static_calibration",
    "flops",
    "generate_synthetic_pair",
    "linearize",
    "marginal_gains",
    "realized_speedup",
    "roofline_latency",
    "run_cycle",
    "replay_trace",
    "sample_continuation",
    "surrogate_of",
    "top_k_truncate",
    "verify_tree",
]

__version__ = "0.1.0"
