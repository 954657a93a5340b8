"""Position-wise drafter marginals and the top-K candidate lattice.

A parallel block drafter emits, in one forward pass, an independent token
distribution for each of the next ``gamma`` positions.  Everything downstream
(tree construction, surrogates, simulation) consumes either the raw
distributions (:class:`MarginalBlock`) or their per-position top-K truncation
(:class:`CandidateLattice`).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .verify_sim import TargetRule

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class MarginalBlock:
    """Per-position token distributions ``q_1..q_gamma`` over a shared vocabulary.

    ``probs[k - 1]`` holds the distribution for future position ``k``.  Rows
    must each sum to 1 within ``ROW_SUM_TOL``.  Instances are immutable and
    safe to share across threads.
    """

    gamma: int
    vocab_size: int
    probs: np.ndarray

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (self.gamma, self.vocab_size):
            raise ValueError(
                f"probs must have shape ({self.gamma}, {self.vocab_size}), got {probs.shape}"
            )
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        row_sums = probs.sum(axis=1)
        bad = np.abs(row_sums - 1.0) > ROW_SUM_TOL
        if np.any(bad):
            k = int(np.argmax(bad))
            raise ValueError(f"row {k} sums to {row_sums[k]!r}, expected 1 +/- {ROW_SUM_TOL}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def row(self, position: int) -> np.ndarray:
        """Distribution for 1-based future position ``position``."""
        if not 1 <= position <= self.gamma:
            raise ValueError(f"position must be in [1, {self.gamma}], got {position}")
        return self.probs[position - 1]


@dataclass(frozen=True)
class CandidateLattice:
    """Top-K truncation of a marginal block.

    ``entries[k - 1]`` lists position ``k``'s K strongest ``(token, prob)``
    pairs, probability descending with ties broken by ascending token id.  The
    lattice is the implicit complete K-ary candidate tree that all draft-tree
    builders draw from.
    """

    source: MarginalBlock
    top_k: int
    entries: tuple[tuple[tuple[int, float], ...], ...]

    @property
    def gamma(self) -> int:
        return self.source.gamma

    def position_entries(self, position: int) -> tuple[tuple[int, float], ...]:
        """Entries for 1-based position ``position``."""
        return self.entries[position - 1]

    def reachable_size(self) -> int:
        """Number of positive-probability lattice nodes (excludes the root)."""
        total = 0
        layer = 1
        for pos_entries in self.entries:
            width = sum(1 for _, p in pos_entries if p > 0.0)
            layer *= width
            total += layer
            if layer == 0:
                break
        return total


@dataclass(frozen=True)
class SyntheticPairConfig:
    """Knobs for a deterministic synthetic drafter/target pair.

    ``alignment`` sets the probability that, at each future position, the
    drafter's argmax equals the token the target would actually pick there.
    With probability ``1 - alignment`` the drafter's argmax lands on a
    uniformly random token, so the measured agreement rate is
    ``alignment + (1 - alignment) / vocab_size``.  ``concentration`` shapes
    row peakedness (smaller = spikier rows).
    """

    gamma: int
    vocab_size: int
    alignment: float
    concentration: float
    seed: int

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 0.0 <= self.alignment <= 1.0:
            raise ValueError(f"alignment must be in [0, 1], got {self.alignment}")
        if not self.concentration > 0.0:
            raise ValueError(f"concentration must be > 0, got {self.concentration}")


def top_k_truncate(block: MarginalBlock, k: int) -> CandidateLattice:
    """Keep each position's k most probable tokens.

    Ordering within a position is (probability desc, token id asc); the tie
    break makes lattices reproducible across runs and platforms.  ``block``
    is not modified.
    """
    if not 1 <= k <= block.vocab_size:
        raise ValueError(f"k must be in [1, {block.vocab_size}], got {k}")
    entries = []
    for row in block.probs:
        # lexsort uses the last key as primary: prob desc, then token asc.
        order = np.lexsort((np.arange(block.vocab_size), -row))[:k]
        entries.append(tuple((int(t), float(row[t])) for t in order))
    return CandidateLattice(source=block, top_k=k, entries=tuple(entries))


def sample_continuation(block: MarginalBlock, rng: np.random.Generator) -> np.ndarray:
    """Draw one length-gamma continuation, position k sampled from row k independently."""
    out = np.empty(block.gamma, dtype=np.int64)
    for i in range(block.gamma):
        out[i] = rng.choice(block.vocab_size, p=block.probs[i])
    return out


def generate_synthetic_pair(cfg: SyntheticPairConfig) -> "tuple[MarginalBlock, TargetRule]":
    """Build a deterministic (drafter block, target rule) pair.

    The returned block is the drafter's marginals for the empty committed
    prefix; the rule re-derives fresh marginals for any later prefix via
    ``TargetRule.drafter_marginals``.  Identical configs give bit-identical
    outputs.
    """
    from .verify_sim import TargetRule

    rule = TargetRule.from_config(cfg)
    return rule.drafter_marginals(()), rule


def block_to_text(block: MarginalBlock) -> str:
    """Serialize to the fixture format: ``gamma vocab_size`` header, one row per line."""
    buf = io.StringIO()
    buf.write(f"{block.gamma} {block.vocab_size}\n")
    for row in block.probs:
        buf.write(" ".join(repr(float(p)) for p in row))
        buf.write("\n")
    return buf.getvalue()


def block_from_text(text: str) -> MarginalBlock:
    """Parse the output of :func:`block_to_text`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty block text")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"bad header line: {lines[0]!r}")
    gamma, vocab_size = int(header[0]), int(header[1])
    if len(lines) != 1 + gamma:
        raise ValueError(f"expected {gamma} rows, found {len(lines) - 1}")
    probs = np.array([[float(x) for x in ln.split()] for ln in lines[1:]], dtype=np.float64)
    return MarginalBlock(gamma=gamma, vocab_size=vocab_size, probs=probs)


def block_from_rows(rows: Sequence[Sequence[float]]) -> MarginalBlock:
    """Convenience constructor from a nested sequence of row probabilities."""
    probs = np.asarray(rows, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("rows must be a 2-D table")
    return MarginalBlock(gamma=probs.shape[0], vocab_size=probs.shape[1], probs=probs)
