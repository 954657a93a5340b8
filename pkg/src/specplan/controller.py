"""Online budget controller: expand best-first, stop at the first speedup decrease.

Each decode cycle interleaves best-first tree growth with an estimated-speedup
trace: after adding the N-th node the controller computes
``S_hat(N) = A_hat * l_ar / (t_draft + verify_latency(N) + t_aux)`` and halts
as soon as the trace strictly decreases, keeping the best prefix seen.  With a
concave surrogate and a convex cost curve the trace is unimodal, so the first
decrease marks a global maximizer; the full trace is returned so callers can
inspect runs where a miscalibrated cost model breaks that assumption.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cost_model import CycleLatencies, VerifyLatencyEstimator
from .draft_tree import DraftTree, TreeNode, iter_best_first
from .lattice import CandidateLattice

STOP_FIRST_DECREASE = "first-decrease"
STOP_FRONTIER_EXHAUSTED = "frontier-exhausted"
STOP_BUDGET_CAP = "budget-cap"


@dataclass(frozen=True)
class ControllerConfig:
    """Per-cycle controller inputs."""

    n_max: int
    latencies: CycleLatencies
    variant: str
    context_len: int

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.context_len < 0:
            raise ValueError(f"context_len must be >= 0, got {self.context_len}")


@dataclass(frozen=True)
class ControllerDecision:
    """Outcome of one budget search.

    ``s_hat_trace[i]`` is the estimated speedup after adding node ``i + 1``;
    the trace covers every expanded node, including any past the returned
    budget.  ``tree`` is None for pure trace replays.
    """

    tree: DraftTree | None
    budget: int
    s_hat_trace: list[float] = field(repr=False)
    stop_reason: str = STOP_BUDGET_CAP


def run_cycle(
    lattice: CandidateLattice, cfg: ControllerConfig, model: VerifyLatencyEstimator
) -> ControllerDecision:
    """Pick the verification tree and budget for one decode cycle.

    Expands the lattice best-first, updating the surrogate incrementally and
    evaluating the estimated speedup after every node (a tree of N nodes is
    verified as N + 1 tokens).  Stops at the first strict decrease of the
    trace, on frontier exhaustion, or at ``cfg.n_max``, and returns the
    best-seen prefix tree.
    """
    if cfg.variant != model.variant:
        raise ValueError(
            f"config variant {cfg.variant!r} does not match estimator variant {model.variant!r}"
        )
    lat = cfg.latencies
    curve = model.curve(cfg.context_len)
    fixed_cost = lat.t_draft + lat.t_aux

    nodes: list[TreeNode] = []
    trace: list[float] = []
    a_hat = 1.0
    best_s = float("-inf")
    best_n = 0
    best_a = 1.0
    stop_reason = STOP_FRONTIER_EXHAUSTED
    for node in iter_best_first(lattice):
        nodes.append(node)
        n = len(nodes)
        a_hat += node.path_score
        c_hat = fixed_cost + curve.latency(n + 1)
        s_hat = a_hat * lat.l_ar / c_hat
        trace.append(s_hat)
        if s_hat > best_s:
            best_s = s_hat
            best_n = n
            best_a = a_hat
        elif s_hat < best_s:
            stop_reason = STOP_FIRST_DECREASE
            break
        if n >= cfg.n_max:
            stop_reason = STOP_BUDGET_CAP
            break

    root = TreeNode(id=0, parent=None, depth=0, token=None, path_score=1.0)
    tree = DraftTree(
        nodes=(root,) + tuple(nodes[:best_n]),
        lattice=lattice,
        surrogate=best_a,
        method="best_first",
    )
    return ControllerDecision(tree=tree, budget=best_n, s_hat_trace=trace, stop_reason=stop_reason)


def replay_trace(
    surrogate_gains: list[float], cost_curve: list[float], l_ar: float
) -> ControllerDecision:
    """Run the stopping rule on bare gain/cost sequences (no lattice, no tree).

    ``surrogate_gains[i]`` is the surrogate increment of step ``i + 1`` and
    must be non-negative and non-increasing; ``cost_curve[i]`` the estimated
    cycle cost at that budget, strictly positive.
    """
    if len(surrogate_gains) != len(cost_curve) or not surrogate_gains:
        raise ValueError("gains and costs must be equal-length and non-empty")
    if l_ar <= 0.0:
        raise ValueError(f"l_ar must be > 0, got {l_ar}")
    for i, gain in enumerate(surrogate_gains):
        if gain < 0.0:
            raise ValueError(f"gains must be non-negative, got {gain} at index {i}")
        if i > 0 and gain > surrogate_gains[i - 1]:
            raise ValueError("gains must be non-increasing (concave surrogate)")
    for i, cost in enumerate(cost_curve):
        if cost <= 0.0:
            raise ValueError(f"costs must be strictly positive, got {cost} at index {i}")

    trace: list[float] = []
    a_hat = 1.0
    best_s = float("-inf")
    best_n = 0
    stop_reason = STOP_BUDGET_CAP
    for i, gain in enumerate(surrogate_gains):
        a_hat += gain
        s_hat = a_hat * l_ar / cost_curve[i]
        trace.append(s_hat)
        if s_hat > best_s:
            best_s = s_hat
            best_n = i + 1
        elif s_hat < best_s:
            stop_reason = STOP_FIRST_DECREASE
            break
    return ControllerDecision(tree=None, budget=best_n, s_hat_trace=trace, stop_reason=stop_reason)
