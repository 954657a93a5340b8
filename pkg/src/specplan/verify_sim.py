"""Simulated target-side verification and the full multi-cycle decode loop.

No tensors are involved: a deterministic, seed-keyed target rule stands in for
the target model, and per-cycle drafter marginals are regenerated conditioned
on the committed prefix with a configurable agreement rate against the
target's own greedy continuation.  One cycle runs drafting, tree planning,
linearization with an ancestor-only attention mask, longest-consistent-path
acceptance (always followed by the target's bonus token), and cache commit.
Cycle time is charged by the same cost model the controller plans with, so
planning decisions and realized speedups share one clock.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .controller import ControllerConfig, run_cycle
from .cost_model import VerifyLatencyEstimator
from .draft_tree import DraftTree, beam_expand, best_first_expand
from .lattice import CandidateLattice, MarginalBlock, SyntheticPairConfig, top_k_truncate

CYCLE_CSV_COLUMNS = (
    "cycle",
    "policy",
    "N",
    "accepted_len",
    "surrogate",
    "t_draft",
    "t_verify",
    "t_aux",
    "cum_tokens",
    "cum_time",
)

# Spread (in natural-log units) of the difficulty jitter applied to the latent
# distribution's concentration.  Difficulty is shared across a window of
# neighboring stream positions: real text alternates between easy spans
# (peaked, predictable) and hard ones, and that shared variation is what makes
# the tree surrogate an informative per-cycle signal.
_DIFFICULTY_LOG_SPREAD = 1.25
_DIFFICULTY_WINDOW = 32
# When the drafter misses, the target's token is demoted to this geometric
# rank among the drafter's candidates (p = 0.5: rank 2 half the time, ...).
# Near-misses keep the target's path inside the drafter's top-K, which is the
# regime tree drafting is built for.
_DEMOTION_P = 0.5
# Rows drawn when precomputing the mean confidence deficit that normalizes
# per-position miss probabilities.
_CALIBRATION_DRAWS = 512


class TargetRule:
    """Deterministic stand-in for the target model, linked to a synthetic drafter.

    Every committed sequence carries a latent next-token distribution (a
    seed-keyed Dirichlet draw whose peakedness drifts across the stream).  The
    target's greedy choice is its argmax; at temperature > 0 the rule instead
    samples once per (sequence, temperature) from the tempered distribution
    and memoizes the draw.

    The paired drafter predicts along the target's own greedy continuation:
    its row for a future position is the latent distribution at that point,
    except that the true argmax may be demoted to a geometrically distributed
    lower rank (a near-miss that keeps the target's token among the drafter's
    next-best candidates).  The per-position miss probability is
    ``(1 - alignment)`` scaled by the row's confidence deficit ``1 - q_max``
    relative to its precomputed mean, so confident positions miss less often,
    mean argmax agreement across positions stays at ``alignment``, and perfect
    alignment agrees at every position exactly.
    """

    def __init__(self, cfg: SyntheticPairConfig, mode: str = "greedy-aligned") -> None:
        if mode not in ("greedy-aligned", "sampled"):
            raise ValueError(f"mode must be 'greedy-aligned' or 'sampled', got {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.seed = cfg.seed
        self.vocab_size = cfg.vocab_size
        self.gamma = cfg.gamma
        self.alignment = cfg.alignment
        self._dists: dict[tuple[int, ...], np.ndarray] = {}
        self._rows: dict[tuple[int, ...], np.ndarray] = {}
        self._samples: dict[tuple[tuple[int, ...], float], int] = {}
        self._mean_deficit = _mean_confidence_deficit(cfg)

    @classmethod
    def from_config(cls, cfg: SyntheticPairConfig) -> "TargetRule":
        return cls(cfg)

    def target_distribution(self, prefix: Sequence[int]) -> np.ndarray:
        """The latent next-token distribution after ``prefix`` (read-only)."""
        key = tuple(prefix)
        dist = self._dists.get(key)
        if dist is None:
            difficulty_rng = self._rng("difficulty", (len(key) // _DIFFICULTY_WINDOW,))
            spread = difficulty_rng.uniform(-_DIFFICULTY_LOG_SPREAD, _DIFFICULTY_LOG_SPREAD)
            temperature = self.cfg.concentration * float(np.exp(spread))
            dist = _peaked_distribution(self._rng("dist", key), self.vocab_size, temperature)
            dist.setflags(write=False)
            self._dists[key] = dist
        return dist

    def choice(self, prefix: Sequence[int]) -> int:
        """Greedy (temperature-0) target token after ``prefix``."""
        return int(np.argmax(self.target_distribution(prefix)))

    def sample(self, prefix: Sequence[int], temperature: float) -> int:
        """Temperature sample, drawn once per (prefix, temperature) and memoized."""
        if temperature <= 0.0:
            return self.choice(prefix)
        key = (tuple(prefix), float(temperature))
        token = self._samples.get(key)
        if token is None:
            powered = self.target_distribution(key[0]) ** (1.0 / temperature)
            powered /= powered.sum()
            rng = self._rng("sample", key[0], extra=repr(float(temperature)))
            token = int(rng.choice(self.vocab_size, p=powered))
            self._samples[key] = token
        return token

    def next_token(self, prefix: Sequence[int], temperature: float) -> int:
        return self.choice(prefix) if temperature <= 0.0 else self.sample(prefix, temperature)

    def rollout(self, prefix: Sequence[int], length: int) -> tuple[int, ...]:
        """Greedy continuation of ``prefix`` for ``length`` tokens."""
        seq = list(prefix)
        out = []
        for _ in range(length):
            token = self.choice(seq)
            out.append(token)
            seq.append(token)
        return tuple(out)

    def drafter_row(self, prefix: Sequence[int]) -> np.ndarray:
        """The drafter's prediction of the target's next-token distribution."""
        key = tuple(prefix)
        row = self._rows.get(key)
        if row is None:
            dist = self.target_distribution(key)
            rng = self._rng("row", key)
            deficit_ratio = (1.0 - float(dist.max())) / self._mean_deficit
            miss_p = min(1.0, (1.0 - self.alignment) * deficit_ratio)
            if rng.random() >= miss_p:
                row = dist
            else:
                row = dist.copy()
                order = np.argsort(-row, kind="stable")
                rank = min(int(rng.geometric(_DEMOTION_P)), self.vocab_size - 1)
                row[order[0]], row[order[rank]] = row[order[rank]], row[order[0]]
                row.setflags(write=False)
            self._rows[key] = row
        return row

    def drafter_marginals(self, prefix: Sequence[int]) -> MarginalBlock:
        """Fresh drafter block conditioned on the committed prefix.

        Row ``k`` predicts the target's token at the k-th future position of
        its own greedy continuation, per the drafter-target linkage above.
        """
        key = tuple(prefix)
        targets = self.rollout(key, self.gamma)
        probs = np.empty((self.gamma, self.vocab_size), dtype=np.float64)
        for k in range(self.gamma):
            probs[k] = self.drafter_row(key + targets[:k])
        return MarginalBlock(gamma=self.gamma, vocab_size=self.vocab_size, probs=probs)

    def _rng(self, tag: str, prefix: tuple[int, ...], extra: str = "") -> np.random.Generator:
        digest = hashlib.blake2b(digest_size=16)
        digest.update(f"{self.seed}|{tag}|{extra}|".encode())
        digest.update(np.asarray(prefix, dtype=np.int64).tobytes())
        key = int.from_bytes(digest.digest(), "little")
        return np.random.Generator(np.random.Philox(key=key))


def _peaked_distribution(rng: np.random.Generator, size: int, temperature: float) -> np.ndarray:
    """Softmax of scaled Gaussian scores; ``temperature`` -> 0 degenerates to one-hot."""
    scores = rng.standard_normal(size) / max(temperature, 1e-12)
    scores -= scores.max()
    weights = np.exp(scores)
    return weights / weights.sum()


def _mean_confidence_deficit(cfg: SyntheticPairConfig) -> float:
    """Mean of ``1 - q_max`` over the latent row distribution for this config.

    Keyed on the shape parameters only (not the seed), so all pairs sharing a
    configuration use one normalizer and stay comparable across seeds.
    """
    digest = hashlib.blake2b(
        f"deficit-calibration|{cfg.vocab_size}|{cfg.concentration!r}".encode(), digest_size=16
    )
    rng = np.random.Generator(np.random.Philox(key=int.from_bytes(digest.digest(), "little")))
    deficits = []
    for _ in range(_CALIBRATION_DRAWS):
        spread = rng.uniform(-_DIFFICULTY_LOG_SPREAD, _DIFFICULTY_LOG_SPREAD)
        temperature = cfg.concentration * float(np.exp(spread))
        row = _peaked_distribution(rng, cfg.vocab_size, temperature)
        deficits.append(1.0 - float(row.max()))
    return max(float(np.mean(deficits)), 1e-9)


@dataclass(frozen=True)
class LinearizedTree:
    """Flat verifier input: tree tokens in expansion order plus the attention mask.

    ``tokens[0]`` is the root slot (-1; its token is the last committed one).
    ``position_ids`` are node depths.  ``parents[i]`` indexes within the tree
    block (-1 for the root).  ``mask`` spans prefix + tree positions: a row
    may attend to every prefix column and, within the tree, to its own
    ancestor-or-self columns only — never to siblings.
    """

    tokens: tuple[int, ...]
    position_ids: tuple[int, ...]
    parents: tuple[int, ...]
    prefix_len: int
    mask: np.ndarray


@dataclass(frozen=True)
class AcceptanceRecord:
    """Longest target-consistent root chain plus the target's bonus token."""

    accepted_path: tuple[int, ...]
    accepted_len: int
    bonus_token: int

    def __post_init__(self) -> None:
        if self.accepted_len != len(self.accepted_path):
            raise ValueError("accepted_len must count accepted draft tokens plus the bonus")


@dataclass(frozen=True)
class SimCache:
    """The target's committed context (token ids only; no tensors)."""

    tokens: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class CycleRecord:
    """Everything measured in one decode cycle."""

    tree_size: int
    accepted_len: int
    surrogate: float
    t_draft: float
    t_verify: float
    t_aux: float
    l_ar: float
    cycle_speedup: float

    @property
    def cycle_time(self) -> float:
        return self.t_draft + self.t_verify + self.t_aux


@dataclass(frozen=True)
class Policy:
    """Tree-planning policy for the decode loop."""

    kind: str
    n: int = 0
    width: int = 0
    depth: int = 0

    @classmethod
    def adaptive(cls) -> "Policy":
        return cls(kind="adaptive")

    @classmethod
    def fixed(cls, n: int) -> "Policy":
        if n < 1:
            raise ValueError("fixed policy needs n >= 1")
        return cls(kind="fixed", n=n)

    @classmethod
    def greedy_chain(cls) -> "Policy":
        return cls(kind="greedy-chain")

    @classmethod
    def beam(cls, width: int, depth: int) -> "Policy":
        if width < 1 or depth < 1:
            raise ValueError("beam policy needs width >= 1 and depth >= 1")
        return cls(kind="beam", width=width, depth=depth)

    @property
    def label(self) -> str:
        if self.kind == "fixed":
            return f"fixed-{self.n}"
        if self.kind == "beam":
            return f"beam-{self.width}x{self.depth}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """Parse labels like ``adaptive``, ``greedy-chain``, ``fixed-64``, ``beam-4x15``."""
        text = text.strip()
        if text == "adaptive":
            return cls.adaptive()
        if text in ("greedy-chain", "greedy"):
            return cls.greedy_chain()
        if text.startswith("fixed-"):
            return cls.fixed(int(text.split("-", 1)[1]))
        if text.startswith("beam-"):
            width, _, depth = text.split("-", 1)[1].partition("x")
            return cls.beam(int(width), int(depth))
        raise ValueError(f"unknown policy {text!r}")


@dataclass(frozen=True)
class SimConfig:
    """Decode-loop settings: controller inputs plus run length and drafting knobs."""

    controller: ControllerConfig
    run_length: int
    top_k: int = 8
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.run_length < 1:
            raise ValueError("run_length must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")


def linearize(tree: DraftTree, prefix_len: int) -> LinearizedTree:
    """Flatten a tree in expansion order and build its verification mask."""
    if prefix_len < 0:
        raise ValueError("prefix_len must be >= 0")
    nodes = tree.nodes
    t = len(nodes)
    tokens = tuple(-1 if n.token is None else n.token for n in nodes)
    position_ids = tuple(n.depth for n in nodes)
    parents = tuple(-1 if n.parent is None else n.parent for n in nodes)
    total = prefix_len + t
    mask = np.zeros((total, total), dtype=bool)
    mask[:, :prefix_len] = True
    mask[prefix_len, prefix_len] = True  # root attends to itself
    for i in range(1, t):
        row = prefix_len + i
        mask[row] = mask[prefix_len + parents[i]]
        mask[row, row] = True
    return LinearizedTree(
        tokens=tokens, position_ids=position_ids, parents=parents, prefix_len=prefix_len, mask=mask
    )


def verify_tree(
    lin: LinearizedTree,
    tree: DraftTree,
    target: TargetRule,
    temperature: float,
    prefix: Sequence[int] = (),
) -> AcceptanceRecord:
    """Walk the tree along the target's choices; return the accepted chain + bonus.

    From the root downward, the target's next token (greedy at temperature 0,
    a memoized sample above) either matches a child — which is then committed —
    or ends the walk; the mismatching choice itself is the bonus token, so
    every cycle commits at least one token.
    """
    if temperature < 0.0:
        raise ValueError("temperature must be >= 0")
    if len(lin.tokens) != len(tree.nodes):
        raise ValueError("linearization does not match the tree")
    children = tree.child_index()
    seq = list(prefix)
    path = [0]
    current = 0
    while True:
        token = target.next_token(seq, temperature)
        child = children[current].get(token)
        if child is None:
            bonus = token
            break
        path.append(child)
        seq.append(token)
        current = child
    return AcceptanceRecord(accepted_path=tuple(path), accepted_len=len(path), bonus_token=bonus)


def commit(cache: SimCache, rec: AcceptanceRecord, tree: DraftTree) -> SimCache:
    """Append the accepted tokens and the bonus; rejected tree tokens vanish."""
    path = rec.accepted_path
    if not path or path[0] != 0:
        raise ValueError("accepted path must start at the root")
    tokens: list[int] = []
    for parent_id, node_id in zip(path, path[1:]):
        if node_id >= len(tree.nodes):
            raise ValueError(f"accepted node {node_id} is not in the tree")
        node = tree.nodes[node_id]
        if node.parent != parent_id:
            raise ValueError("accepted path is not a root-anchored chain in this tree")
        tokens.append(node.token)  # type: ignore[arg-type]
    return SimCache(tokens=cache.tokens + tuple(tokens) + (rec.bonus_token,))


def plan_tree(
    lattice: CandidateLattice,
    policy: Policy,
    cfg: ControllerConfig,
    estimator: VerifyLatencyEstimator,
) -> DraftTree:
    """Build this cycle's verification tree under the chosen policy."""
    if policy.kind == "adaptive":
        return run_cycle(lattice, cfg, estimator).tree  # type: ignore[return-value]
    if policy.kind == "fixed":
        return best_first_expand(lattice, policy.n)
    if policy.kind == "greedy-chain":
        return beam_expand(lattice, width=1, depth=lattice.gamma)
    if policy.kind == "beam":
        return beam_expand(lattice, width=policy.width, depth=policy.depth)
    raise ValueError(f"unknown policy kind {policy.kind!r}")


def decode_full(
    pair: tuple[MarginalBlock, TargetRule] | TargetRule,
    cfg: SimConfig,
    policy: Policy,
    estimator: VerifyLatencyEstimator,
) -> tuple[list[CycleRecord], tuple[int, ...]]:
    """Like :func:`decode`, additionally returning the committed token stream."""
    rule = pair[1] if isinstance(pair, tuple) else pair
    lat = cfg.controller.latencies
    cache = SimCache()
    records: list[CycleRecord] = []
    while len(cache) < cfg.run_length:
        prefix = cache.tokens
        context = cfg.controller.context_len + len(prefix)
        block = rule.drafter_marginals(prefix)
        lattice = top_k_truncate(block, min(cfg.top_k, block.vocab_size))
        ctrl_cfg = replace(cfg.controller, context_len=context)
        tree = plan_tree(lattice, policy, ctrl_cfg, estimator)
        lin = linearize(tree, prefix_len=context)
        rec = verify_tree(lin, tree, rule, cfg.temperature, prefix)
        cache = commit(cache, rec, tree)
        t_verify = estimator.estimate_for_budget(tree.size, context)
        cycle_time = lat.t_draft + t_verify + lat.t_aux
        records.append(
            CycleRecord(
                tree_size=tree.size,
                accepted_len=rec.accepted_len,
                surrogate=tree.surrogate,
                t_draft=lat.t_draft,
                t_verify=t_verify,
                t_aux=lat.t_aux,
                l_ar=lat.l_ar,
                cycle_speedup=rec.accepted_len * lat.l_ar / cycle_time,
            )
        )
    return records, cache.tokens


def decode(
    pair: tuple[MarginalBlock, TargetRule] | TargetRule,
    cfg: SimConfig,
    policy: Policy,
    estimator: VerifyLatencyEstimator,
) -> list[CycleRecord]:
    """Run decode cycles until ``cfg.run_length`` tokens are committed.

    Each cycle re-queries the drafter on the committed prefix, plans a tree,
    verifies, commits, and charges simulated time from the shared cost model
    (a tree of N nodes costs one pass of N + 1 tokens).  The configured
    ``context_len`` acts as a synthetic prompt: it contributes to latency
    queries but not to token identity.
    """
    records, _ = decode_full(pair, cfg, policy, estimator)
    return records


def realized_speedup(records: Sequence[CycleRecord]) -> float:
    """Committed tokens times the AR step latency, over total simulated time."""
    if not records:
        raise ValueError("realized_speedup needs at least one cycle record")
    total_tokens = sum(r.accepted_len for r in records)
    total_time = sum(r.cycle_time for r in records)
    return total_tokens * records[0].l_ar / total_time


def ar_decode(rule: TargetRule, length: int, temperature: float = 0.0) -> tuple[int, ...]:
    """Reference autoregressive decode of the target rule (one token per step)."""
    seq: list[int] = []
    for _ in range(length):
        seq.append(rule.next_token(seq, temperature))
    return tuple(seq)


def cycle_csv_rows(records: Iterable[CycleRecord], policy_label: str) -> list[str]:
    """Render records as CSV rows (no header) in the fixed column order."""
    rows = []
    cum_tokens = 0
    cum_time = 0.0
    for i, r in enumerate(records):
        cum_tokens += r.accepted_len
        cum_time += r.cycle_time
        rows.append(
            f"{i},{policy_label},{r.tree_size},{r.accepted_len},{r.surrogate!r},"
            f"{r.t_draft!r},{r.t_verify!r},{r.t_aux!r},{cum_tokens},{cum_time!r}"
        )
    return rows
