"""Prefix-closed candidate trees over a top-K lattice.

A draft tree collects candidate continuations as a rooted tree whose non-root
nodes each carry one token for their depth's position.  Every node has a path
score: the product of the marginal probabilities along its root path.  The sum
of path scores over the tree (root counts as 1) is the tree's surrogate for
the expected number of tokens a self-verifying drafter would commit.

Two builders are provided: best-first expansion, which adds the open node of
globally maximal path score and is optimal at every intermediate size, and a
rigid width-by-depth beam baseline.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

from .lattice import CandidateLattice

SURROGATE_TOL = 1e-9


@dataclass(frozen=True, slots=True)
class TreeNode:
    """One tree node; the root has ``parent is None`` and ``token is None``."""

    id: int
    parent: int | None
    depth: int
    token: int | None
    path_score: float


@dataclass(frozen=True)
class DraftTree:
    """Immutable prefix-closed tree; ``nodes[0]`` is the root, insertion order = expansion order."""

    nodes: tuple[TreeNode, ...]
    lattice: CandidateLattice
    surrogate: float
    method: str

    @property
    def size(self) -> int:
        """Number of non-root nodes (the verification budget N)."""
        return len(self.nodes) - 1

    def node_path(self, node_id: int) -> tuple[int, ...]:
        """Token path from the root down to ``node_id``."""
        tokens: list[int] = []
        node = self.nodes[node_id]
        while node.parent is not None:
            tokens.append(node.token)  # type: ignore[arg-type]
            node = self.nodes[node.parent]
        return tuple(reversed(tokens))

    def child_index(self) -> dict[int, dict[int, int]]:
        """Map parent id -> {token -> child id}."""
        index: dict[int, dict[int, int]] = {n.id: {} for n in self.nodes}
        for n in self.nodes:
            if n.parent is not None:
                index[n.parent][n.token] = n.id  # type: ignore[index]
        return index


class ExpansionFrontier:
    """Max-priority frontier with the lazy child/sibling push discipline.

    Entries are keyed (path_score desc, depth asc, token asc, parent asc).  At
    any point the frontier holds exactly the not-yet-added nodes whose parent
    is in the tree, restricted to each added node's highest-probability child
    and each popped entry's next sibling.  This bounds the frontier to O(tree
    size) entries with two pushes per pop.
    """

    def __init__(self, lattice: CandidateLattice) -> None:
        self._lattice = lattice
        # heap entries: (-rho, depth, token, parent_id, rank)
        self._heap: list[tuple[float, int, int, int, int]] = []
        first = lattice.position_entries(1)
        if first and first[0][1] > 0.0:
            token, prob = first[0]
            heapq.heappush(self._heap, (-prob, 1, token, 0, 0))

    def __bool__(self) -> bool:
        return bool(self._heap)

    def pop(self) -> tuple[float, int, int, int, int]:
        """Remove and return (rho, depth, token, parent_id, rank) of the best open node."""
        neg_rho, depth, token, parent, rank = heapq.heappop(self._heap)
        return -neg_rho, depth, token, parent, rank

    def push_child(self, node_id: int, depth: int, rho: float) -> None:
        """Push the highest-probability child of the node just added to the tree."""
        if depth >= self._lattice.gamma:
            return
        entries = self._lattice.position_entries(depth + 1)
        token, prob = entries[0]
        child_rho = rho * prob
        if child_rho > 0.0:
            heapq.heappush(self._heap, (-child_rho, depth + 1, token, node_id, 0))

    def push_sibling(self, popped: tuple[float, int, int, int, int], parent_rho: float) -> None:
        """Push the next sibling (same parent, next lattice rank) of a popped entry."""
        _, depth, _, parent, rank = popped
        entries = self._lattice.position_entries(depth)
        if rank + 1 >= len(entries):
            return
        token, prob = entries[rank + 1]
        rho = parent_rho * prob
        if rho > 0.0:
            heapq.heappush(self._heap, (-rho, depth, token, parent, rank + 1))


def iter_best_first(lattice: CandidateLattice) -> Iterator[TreeNode]:
    """Yield nodes in best-first order (ids 1, 2, ...; the root id 0 is implicit).

    Stops when the lattice's positive-probability nodes are exhausted.  The
    yielded path scores are non-increasing.
    """
    frontier = ExpansionFrontier(lattice)
    scores = [1.0]  # path score by node id; root = 1
    next_id = 1
    while frontier:
        popped = frontier.pop()
        rho, depth, token, parent, _ = popped
        node = TreeNode(id=next_id, parent=parent, depth=depth, token=token, path_score=rho)
        scores.append(rho)
        next_id += 1
        frontier.push_child(node.id, depth, rho)
        frontier.push_sibling(popped, scores[parent])
        yield node


def best_first_expand(lattice: CandidateLattice, n_max: int) -> DraftTree:
    """Grow the surrogate-optimal tree one node at a time, up to ``n_max`` non-root nodes.

    Every prefix of the expansion order is itself the optimal tree of that
    size, so the result is the nested family's member at
    ``min(n_max, reachable lattice size)``.
    """
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    _require_nonempty(lattice)
    nodes = [TreeNode(id=0, parent=None, depth=0, token=None, path_score=1.0)]
    surrogate = 1.0
    for node in iter_best_first(lattice):
        nodes.append(node)
        surrogate += node.path_score
        if len(nodes) - 1 >= n_max:
            break
    return DraftTree(nodes=tuple(nodes), lattice=lattice, surrogate=surrogate, method="best_first")


def beam_expand(lattice: CandidateLattice, width: int, depth: int) -> DraftTree:
    """Rigid beam baseline: keep the ``width`` best extensions level by level.

    Extensions are scored by cumulative path score.  If the lattice cannot
    fill a level the beam truncates silently.
    """
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    if not 1 <= depth <= lattice.gamma:
        raise ValueError(f"depth must be in [1, {lattice.gamma}], got {depth}")
    _require_nonempty(lattice)
    nodes = [TreeNode(id=0, parent=None, depth=0, token=None, path_score=1.0)]
    surrogate = 1.0
    survivors = [nodes[0]]
    for level in range(1, depth + 1):
        entries = lattice.position_entries(level)
        candidates = [
            (parent.path_score * prob, token, parent.id)
            for parent in survivors
            for token, prob in entries
            if parent.path_score * prob > 0.0
        ]
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        survivors = []
        for rho, token, parent in candidates[:width]:
            node = TreeNode(id=len(nodes), parent=parent, depth=level, token=token, path_score=rho)
            nodes.append(node)
            surrogate += rho
            survivors.append(node)
    return DraftTree(nodes=tuple(nodes), lattice=lattice, surrogate=surrogate, method="beam")


def surrogate_of(tree: DraftTree) -> float:
    """Sum of path scores over all nodes, root included (fresh recomputation)."""
    return math.fsum(node.path_score for node in tree.nodes)


def marginal_gains(tree: DraftTree) -> list[float]:
    """Per-step surrogate increments of a best-first expansion (non-increasing)."""
    if tree.method != "best_first":
        raise ValueError(f"marginal gains are defined for best-first trees, got {tree.method!r}")
    return [node.path_score for node in tree.nodes[1:]]


def build_tree(lattice: CandidateLattice, paths: Sequence[Sequence[int]]) -> DraftTree:
    """Assemble a tree from explicit token paths, in the given insertion order.

    Each path must extend an already-present path by exactly one token; path
    scores come from the source block's rows.  Intended for fixtures, oracle
    witnesses, and deserialization.
    """
    probs = lattice.source.probs
    nodes = [TreeNode(id=0, parent=None, depth=0, token=None, path_score=1.0)]
    by_path: dict[tuple[int, ...], TreeNode] = {(): nodes[0]}
    for raw in paths:
        path = tuple(int(t) for t in raw)
        if not path:
            raise ValueError("paths must be non-empty (the root is implicit)")
        if path in by_path:
            raise ValueError(f"duplicate path {path}")
        parent = by_path.get(path[:-1])
        if parent is None:
            raise ValueError(f"path {path} arrives before its parent (tree must stay prefix-closed)")
        depth = len(path)
        if depth > lattice.gamma:
            raise ValueError(f"path {path} exceeds block size {lattice.gamma}")
        token = path[-1]
        if not 0 <= token < lattice.source.vocab_size:
            raise ValueError(f"token {token} outside the vocabulary")
        rho = parent.path_score * float(probs[depth - 1][token])
        node = TreeNode(id=len(nodes), parent=parent.id, depth=depth, token=token, path_score=rho)
        nodes.append(node)
        by_path[path] = node
    surrogate = math.fsum(n.path_score for n in nodes)
    return DraftTree(nodes=tuple(nodes), lattice=lattice, surrogate=surrogate, method="manual")


def validate_tree(tree: DraftTree, rel_tol: float = 1e-12) -> None:
    """Check structural invariants; raises ValueError on the first violation.

    Verifies prefix closure, the parent-product identity for path scores, path
    monotonicity, (parent, token) uniqueness, and agreement between the cached
    surrogate and a fresh sum.  Meant for tests and debugging, not hot paths.
    """
    nodes = tree.nodes
    root = nodes[0]
    if root.parent is not None or root.depth != 0 or root.path_score != 1.0:
        raise ValueError("root must have no parent, depth 0, and path score exactly 1")
    probs = tree.lattice.source.probs
    seen_edges: set[tuple[int, int]] = set()
    present = {root.id}
    for node in nodes[1:]:
        if node.parent not in present:
            raise ValueError(f"node {node.id} added before its parent {node.parent}")
        present.add(node.id)
        parent = nodes[node.parent]
        if node.depth != parent.depth + 1:
            raise ValueError(f"node {node.id} depth {node.depth} != parent depth + 1")
        edge = (node.parent, node.token)
        if edge in seen_edges:
            raise ValueError(f"duplicate (parent, token) pair {edge}")
        seen_edges.add(edge)
        expected = parent.path_score * float(probs[node.depth - 1][node.token])
        if not math.isclose(node.path_score, expected, rel_tol=rel_tol, abs_tol=0.0):
            raise ValueError(f"node {node.id} path score {node.path_score!r} != {expected!r}")
        if node.path_score > parent.path_score:
            raise ValueError(f"node {node.id} path score exceeds its parent's")
    fresh = math.fsum(n.path_score for n in nodes)
    if abs(fresh - tree.surrogate) > SURROGATE_TOL:
        raise ValueError(f"cached surrogate {tree.surrogate!r} != recomputed {fresh!r}")


def tree_to_text(tree: DraftTree) -> str:
    """Line format ``id parent depth token path_score``; root uses -1 sentinels."""
    lines = []
    for n in tree.nodes:
        parent = -1 if n.parent is None else n.parent
        token = -1 if n.token is None else n.token
        lines.append(f"{n.id} {parent} {n.depth} {token} {repr(n.path_score)}")
    return "\n".join(lines) + "\n"


def tree_from_text(text: str, lattice: CandidateLattice) -> DraftTree:
    """Parse :func:`tree_to_text` output back into a tree (method ``manual``)."""
    nodes: list[TreeNode] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        node_id, parent, depth, token, score = line.split()
        nodes.append(
            TreeNode(
                id=int(node_id),
                parent=None if parent == "-1" else int(parent),
                depth=int(depth),
                token=None if token == "-1" else int(token),
                path_score=float(score),
            )
        )
    if not nodes or nodes[0].parent is not None:
        raise ValueError("serialized tree must start with the root row")
    surrogate = math.fsum(n.path_score for n in nodes)
    return DraftTree(nodes=tuple(nodes), lattice=lattice, surrogate=surrogate, method="manual")


def _require_nonempty(lattice: CandidateLattice) -> None:
    first = lattice.position_entries(1)
    if not first or first[0][1] <= 0.0:
        raise ValueError("lattice has no positive-probability candidates at position 1")
