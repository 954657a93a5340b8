"""Brute-force reference implementations.

Everything here exists to cross-check the optimized paths and deliberately
shares no logic with them: committed lengths are obtained by enumerating or
sampling outcomes, optimal trees by exhaustive search over prefix-closed
subsets, and stopping points by scanning every budget.  These functions are
slow by design and refuse inputs beyond their enumeration limits.
"""

from __future__ import annotations

import numpy as np

from .draft_tree import DraftTree, TreeNode
from .lattice import CandidateLattice, MarginalBlock

EXACT_OUTCOME_LIMIT = 10**6
ENUM_GAMMA_LIMIT = 4
ENUM_TOPK_LIMIT = 3
ENUM_SIZE_LIMIT = 12


class OracleRefusal(RuntimeError):
    """Raised when an instance is too large for exhaustive treatment."""


def exact_expected_commit(tree: DraftTree, block: MarginalBlock) -> float:
    """Exact expected committed length under drafter self-verification.

    Enumerates all ``vocab_size ** gamma`` outcomes, counts the tree nodes
    whose root path matches each outcome's prefix, and averages under the
    outcome probabilities.  Refuses when the outcome space exceeds
    ``EXACT_OUTCOME_LIMIT``; use :func:`monte_carlo_commit` instead.
    """
    n_outcomes = block.vocab_size**block.gamma
    if n_outcomes > EXACT_OUTCOME_LIMIT:
        raise OracleRefusal(
            f"{block.vocab_size}^{block.gamma} = {n_outcomes} outcomes exceed "
            f"{EXACT_OUTCOME_LIMIT}; use monte_carlo_commit"
        )
    _check_tree_fits_block(tree, block)

    grids = np.meshgrid(*([np.arange(block.vocab_size)] * block.gamma), indexing="ij")
    outcomes = np.stack([g.ravel() for g in grids], axis=1)  # (n_outcomes, gamma)

    probs = np.ones(n_outcomes, dtype=np.float64)
    for k in range(block.gamma):
        probs *= block.probs[k][outcomes[:, k]]

    counts = np.ones(n_outcomes, dtype=np.int32)  # root is always covered
    masks: dict[int, np.ndarray] = {0: np.ones(n_outcomes, dtype=bool)}
    pending_children = {n.id: 0 for n in tree.nodes}
    for node in tree.nodes[1:]:
        pending_children[node.parent] += 1
    for node in tree.nodes[1:]:
        mask = masks[node.parent] & (outcomes[:, node.depth - 1] == node.token)
        counts += mask
        if pending_children[node.id] > 0:
            masks[node.id] = mask
        pending_children[node.parent] -= 1
        if pending_children[node.parent] == 0 and node.parent != 0:
            del masks[node.parent]
    return float(probs @ counts)


def monte_carlo_commit(
    tree: DraftTree, block: MarginalBlock, n_samples: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte-Carlo estimate of the self-verified committed length.

    Draws ``n_samples`` continuations from the block's marginals, computes
    each sample's covered node count, and asserts on every sample that the
    covered set is an ancestor-closed chain with at most one node per depth.
    Returns (sample mean, standard error).
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    _check_tree_fits_block(tree, block)

    samples = _sample_matrix(block, rng, n_samples)  # (n_samples, gamma)
    # Cover indicators are computed from each node's full path, independently
    # of its parent's indicator, so the chain assertions below are real checks.
    masks: dict[int, np.ndarray] = {0: np.ones(n_samples, dtype=bool)}
    counts = np.ones(n_samples, dtype=np.int64)
    depth_hits: dict[int, np.ndarray] = {}
    for node in tree.nodes[1:]:
        path = tree.node_path(node.id)
        mask = np.ones(n_samples, dtype=bool)
        for j, token in enumerate(path):
            mask &= samples[:, j] == token
        if np.any(mask & ~masks[node.parent]):
            raise AssertionError("covered set is not ancestor-closed")
        masks[node.id] = mask
        counts += mask
        hits = depth_hits.get(node.depth)
        depth_hits[node.depth] = mask.astype(np.int64) if hits is None else hits + mask
    for depth, hits in depth_hits.items():
        if int(hits.max()) > 1:
            raise AssertionError(f"more than one covered node at depth {depth}")
    # Ancestor closure plus one-per-depth forces contiguous depths 0..m, i.e. a
    # single root-anchored chain; verify the count matches the deepest cover.
    deepest = np.zeros(n_samples, dtype=np.int64)
    for depth in sorted(depth_hits):
        deepest = np.where(depth_hits[depth] > 0, depth, deepest)
    if not np.array_equal(counts, deepest + 1):
        raise AssertionError("covered set is not a contiguous root chain")

    mean = float(counts.mean())
    if n_samples == 1:
        return mean, 0.0
    std_err = float(counts.std(ddof=1) / np.sqrt(n_samples))
    return mean, std_err


def enumerate_optimal_trees(
    lattice: CandidateLattice, n_max: int
) -> list[tuple[float, DraftTree]]:
    """Exhaustive optima for every size 1..n_max in one enumeration pass.

    Recursively extends the frontier over all prefix-closed subsets (each
    visited exactly once via the ordered-extension discipline) and records the
    best surrogate and a witness per size.  Entry ``i`` (0-based) of the
    result is for size ``i + 1``.  Refuses instances beyond the enumeration
    limits and errors if no size-``n_max`` tree exists.
    """
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    if lattice.gamma > ENUM_GAMMA_LIMIT or lattice.top_k > ENUM_TOPK_LIMIT or n_max > ENUM_SIZE_LIMIT:
        raise OracleRefusal(
            f"enumeration limited to gamma <= {ENUM_GAMMA_LIMIT}, top_k <= {ENUM_TOPK_LIMIT}, "
            f"n <= {ENUM_SIZE_LIMIT}; got gamma={lattice.gamma}, K={lattice.top_k}, n={n_max}"
        )

    gamma = lattice.gamma
    entries = [lattice.position_entries(k) for k in range(1, gamma + 1)]

    best_sum = [-1.0] * (n_max + 1)
    witnesses: list[list[tuple[int, int, int, float]] | None] = [None] * (n_max + 1)

    # Parallel extension arrays; chosen[i] = (parent_handle, depth, token, rho)
    # with parent_handle an index into chosen (-1 for the root).
    ext_parent: list[int] = []
    ext_depth: list[int] = []
    ext_token: list[int] = []
    ext_rho: list[float] = []
    for token, prob in entries[0]:
        ext_parent.append(-1)
        ext_depth.append(1)
        ext_token.append(token)
        ext_rho.append(prob)
    chosen: list[tuple[int, int, int, float]] = []

    def recurse(start: int, acc: float) -> None:
        size = len(chosen) + 1
        for i in range(start, len(ext_parent)):
            rho = ext_rho[i]
            depth = ext_depth[i]
            total = acc + rho
            chosen.append((ext_parent[i], depth, ext_token[i], rho))
            if total > best_sum[size]:
                best_sum[size] = total
                witnesses[size] = chosen.copy()
            if size < n_max:
                if depth < gamma:
                    mark = len(ext_parent)
                    handle = len(chosen) - 1
                    for token, prob in entries[depth]:
                        ext_parent.append(handle)
                        ext_depth.append(depth + 1)
                        ext_token.append(token)
                        ext_rho.append(rho * prob)
                    recurse(i + 1, total)
                    del ext_parent[mark:], ext_depth[mark:], ext_token[mark:], ext_rho[mark:]
                else:
                    recurse(i + 1, total)
            chosen.pop()

    recurse(0, 0.0)

    results: list[tuple[float, DraftTree]] = []
    for size in range(1, n_max + 1):
        witness = witnesses[size]
        if witness is None:
            raise ValueError(f"lattice has no prefix-closed tree of size {size}")
        results.append((1.0 + best_sum[size], _tree_from_witness(lattice, witness)))
    return results


def enumerate_optimal_tree(lattice: CandidateLattice, n: int) -> tuple[float, DraftTree]:
    """Best surrogate over all size-``n`` prefix-closed trees, with one witness."""
    return enumerate_optimal_trees(lattice, n)[n - 1]


def scan_optimal_budget(surrogates: list[float], costs: list[float], l_ar: float) -> int:
    """Exhaustive argmax of ``surrogates[N] * l_ar / costs[N]`` (1-based; ties to smaller N).

    Scans every budget without assuming any shape of the speedup curve.
    """
    if len(surrogates) != len(costs) or not surrogates:
        raise ValueError("surrogates and costs must be equal-length and non-empty")
    if l_ar <= 0.0:
        raise ValueError(f"l_ar must be > 0, got {l_ar}")
    best_idx = 0
    best_val = -np.inf
    for i, (a_hat, cost) in enumerate(zip(surrogates, costs)):
        if cost <= 0.0:
            raise ValueError(f"costs must be strictly positive, got {cost} at index {i}")
        val = a_hat * l_ar / cost
        if val > best_val:
            best_val = val
            best_idx = i
    return best_idx + 1


def _tree_from_witness(
    lattice: CandidateLattice, witness: list[tuple[int, int, int, float]]
) -> DraftTree:
    nodes = [TreeNode(id=0, parent=None, depth=0, token=None, path_score=1.0)]
    surrogate = 1.0
    for handle, depth, token, rho in witness:
        nodes.append(
            TreeNode(id=len(nodes), parent=handle + 1, depth=depth, token=token, path_score=rho)
        )
        surrogate += rho
    return DraftTree(nodes=tuple(nodes), lattice=lattice, surrogate=surrogate, method="manual")


def _sample_matrix(block: MarginalBlock, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` continuations at once via per-row inverse-CDF sampling."""
    out = np.empty((n, block.gamma), dtype=np.int64)
    for k in range(block.gamma):
        cdf = np.cumsum(block.probs[k])
        cdf[-1] = 1.0
        out[:, k] = np.searchsorted(cdf, rng.random(n), side="right")
    return out


def _check_tree_fits_block(tree: DraftTree, block: MarginalBlock) -> None:
    for node in tree.nodes[1:]:
        if node.depth > block.gamma:
            raise ValueError(f"tree node {node.id} deeper than block size {block.gamma}")
        if not 0 <= node.token < block.vocab_size:
            raise ValueError(f"tree node {node.id} token {node.token} outside vocabulary")
