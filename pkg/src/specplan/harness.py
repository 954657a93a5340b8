"""Experiment orchestration, metrics aggregation, and file I/O.

An experiment is a grid of (pair, policy, trial) cells, each a full simulated
decode run.  Every cell writes its own raw cycle CSV (so one failing cell
cannot corrupt another's output) and a summary CSV aggregates speedup,
accepted length, and realized budget per policy.  The module also hosts the
calibration workflow, surrogate/acceptance correlation, and the oracle bridge
check used as a self-test.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import oracle
from .controller import ControllerConfig, replay_trace, run_cycle
from .cost_model import (
    CalibrationFit,
    CostModelParams,
    CycleLatencies,
    LatencyQuery,
    VerifyLatencyEstimator,
    fit_static_calibration,
    load_params,
    load_trace,
    roofline_latency,
    trace_predictions,
)
from .draft_tree import best_first_expand, marginal_gains, surrogate_of
from .lattice import MarginalBlock, SyntheticPairConfig, top_k_truncate
from .verify_sim import (
    CYCLE_CSV_COLUMNS,
    CycleRecord,
    Policy,
    SimConfig,
    TargetRule,
    cycle_csv_rows,
    decode,
)

DEFAULT_FIXED_GRID = (32, 64, 128, 256, 512, 1024)

_CONFIG_DEFAULTS = {
    "gamma": "16",
    "vocab_size": "64",
    "alignment": "0.8",
    "concentration": "0.1",
    "pair_seed": "1",
    "run_length": "256",
    "trials": "3",
    "seed": "0",
    "top_k": "8",
    "temperature": "0.0",
    "n_max": "1024",
    "t_draft": "0.0",
    "t_aux": "0.0",
    "context_len": "256",
    "variant": "static",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: synthetic pair(s) x policies x trials on one hardware profile."""

    pairs: tuple[SyntheticPairConfig, ...]
    policies: tuple[Policy, ...]
    fixed_grid: tuple[int, ...]
    profile_path: Path
    run_length: int
    trials: int
    seed: int
    top_k: int
    temperature: float
    n_max: int
    t_draft: float
    t_aux: float
    l_ar: float | None
    context_len: int
    variant: str
    out_dir: Path

    def __post_init__(self) -> None:
        if not self.policies:
            raise ValueError("at least one policy is required")
        if self.run_length < 1 or self.trials < 1:
            raise ValueError("run_length and trials must be positive")


@dataclass(frozen=True)
class SummaryRow:
    """Per-(pair, policy) aggregate over trials."""

    pair: int
    policy: str
    trials: int
    mean_speedup: float
    se_speedup: float
    mean_aal: float
    se_aal: float
    mean_budget: float
    se_budget: float


def parse_experiment_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse the flat ``key = value`` experiment format (``policy`` may repeat).

    ``policy = fixed-sweep`` expands into one fixed-N policy per grid entry.
    Relative paths resolve against ``base_dir``.
    """
    base = base_dir or Path.cwd()
    values = dict(_CONFIG_DEFAULTS)
    policies: list[str] = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "policy":
            policies.append(value)
        else:
            values[key] = value
    if not policies:
        raise ValueError("config must list at least one policy")
    known = set(_CONFIG_DEFAULTS) | {"profile", "fixed_grid", "l_ar", "out"}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "profile" not in values:
        raise ValueError("config must set a hardware profile path")

    grid = DEFAULT_FIXED_GRID
    if "fixed_grid" in values:
        grid = tuple(int(x) for x in values["fixed_grid"].split(","))
    parsed: list[Policy] = []
    for label in policies:
        if label.strip() == "fixed-sweep":
            parsed.extend(Policy.fixed(n) for n in grid)
        else:
            parsed.append(Policy.parse(label))

    pair = SyntheticPairConfig(
        gamma=int(values["gamma"]),
        vocab_size=int(values["vocab_size"]),
        alignment=float(values["alignment"]),
        concentration=float(values["concentration"]),
        seed=int(values["pair_seed"]),
    )
    return ExperimentConfig(
        pairs=(pair,),
        policies=tuple(parsed),
        fixed_grid=grid,
        profile_path=(base / values["profile"]).resolve(),
        run_length=int(values["run_length"]),
        trials=int(values["trials"]),
        seed=int(values["seed"]),
        top_k=int(values["top_k"]),
        temperature=float(values["temperature"]),
        n_max=int(values["n_max"]),
        t_draft=float(values["t_draft"]),
        t_aux=float(values["t_aux"]),
        l_ar=float(values["l_ar"]) if "l_ar" in values else None,
        context_len=int(values["context_len"]),
        variant=values["variant"],
        out_dir=(base / values.get("out", "out")).resolve(),
    )


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_experiment_config(path.read_text(), base_dir=path.parent)


def trial_rule_seed(base_seed: int, pair: SyntheticPairConfig, trial: int) -> int:
    """Seed for one (pair, trial) cell; shared across policies so runs are paired."""
    return pair.seed + 1_000_003 * trial + 998_244_353 * base_seed


def resolve_l_ar(cfg: ExperimentConfig, params: CostModelParams) -> float:
    """Configured AR step latency, or the roofline at one token over the prompt."""
    if cfg.l_ar is not None:
        return cfg.l_ar
    return roofline_latency(params, LatencyQuery(s=1, c=cfg.context_len))


def _cell_records(
    cfg: ExperimentConfig, params: CostModelParams, pair_idx: int, policy: Policy, trial: int
) -> list[CycleRecord]:
    pair_cfg = replace(cfg.pairs[pair_idx], seed=trial_rule_seed(cfg.seed, cfg.pairs[pair_idx], trial))
    rule = TargetRule.from_config(pair_cfg)
    estimator = VerifyLatencyEstimator(params, variant=cfg.variant)
    latencies = CycleLatencies(t_draft=cfg.t_draft, t_aux=cfg.t_aux, l_ar=resolve_l_ar(cfg, params))
    sim = SimConfig(
        controller=ControllerConfig(
            n_max=cfg.n_max, latencies=latencies, variant=cfg.variant, context_len=cfg.context_len
        ),
        run_length=cfg.run_length,
        top_k=cfg.top_k,
        temperature=cfg.temperature,
    )
    return decode(rule, sim, policy, estimator)


def _run_cell(args: tuple) -> tuple[int, str]:
    cfg, params, pair_idx, policy, trial, cell_idx, cell_path = args
    records = _cell_records(cfg, params, pair_idx, policy, trial)
    body = "\n".join([",".join(CYCLE_CSV_COLUMNS)] + cycle_csv_rows(records, policy.label)) + "\n"
    Path(cell_path).write_text(body)
    return cell_idx, body


def run_experiment(
    cfg: ExperimentConfig, out_dir: Path | None = None, workers: int = 1
) -> tuple[list[Path], Path]:
    """Execute every (pair, policy, trial) cell; write per-cell raw CSVs and a summary.

    Deterministic in the config: a rerun produces byte-identical files.
    Returns (cell CSV paths, summary path).
    """
    out = Path(out_dir) if out_dir is not None else cfg.out_dir
    params = load_params(cfg.profile_path)  # fail fast, before any cell runs
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    try:
        probe.write_text("")
    finally:
        if probe.exists():
            probe.unlink()

    cells = []
    for pair_idx in range(len(cfg.pairs)):
        for policy in cfg.policies:
            for trial in range(cfg.trials):
                cell_idx = len(cells)
                path = out / f"raw_p{pair_idx}_{policy.label}_t{trial}.csv"
                cells.append((cfg, params, pair_idx, policy, trial, cell_idx, str(path)))

    bodies: dict[int, str] = {}
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for cell_idx, body in pool.map(_run_cell, cells):
                bodies[cell_idx] = body
    else:
        for cell in cells:
            cell_idx, body = _run_cell(cell)
            bodies[cell_idx] = body

    l_ar = resolve_l_ar(cfg, params)
    summary_rows: list[SummaryRow] = []
    for pair_idx in range(len(cfg.pairs)):
        for policy in cfg.policies:
            trial_csvs = [
                bodies[idx]
                for (_, _, p, pol, _, idx, _) in cells
                if p == pair_idx and pol == policy
            ]
            summary_rows.append(_summarize(pair_idx, policy.label, trial_csvs, l_ar))
    summary_path = out / "summary.csv"
    summary_path.write_text(render_summary_csv(summary_rows))
    return [Path(c[6]) for c in cells], summary_path


def _trial_aggregates(csv_body: str) -> tuple[int, float, int, float]:
    """(total tokens, total time, cycles, mean budget) from one cell's raw CSV."""
    rows = parse_cycle_csv(csv_body)
    if not rows:
        raise ValueError("cell CSV has no cycles")
    last = rows[-1]
    total_tokens = int(last["cum_tokens"])
    total_time = float(last["cum_time"])
    budgets = [int(r["N"]) for r in rows]
    return total_tokens, total_time, len(rows), float(np.mean(budgets))


def _summarize(pair_idx: int, policy_label: str, trial_csvs: list[str], l_ar: float) -> SummaryRow:
    speedups, aals, budgets = [], [], []
    for body in trial_csvs:
        tokens, total_time, cycles, mean_budget = _trial_aggregates(body)
        speedups.append(tokens * l_ar / total_time)
        aals.append(tokens / cycles)
        budgets.append(mean_budget)
    return SummaryRow(
        pair=pair_idx,
        policy=policy_label,
        trials=len(trial_csvs),
        mean_speedup=float(np.mean(speedups)),
        se_speedup=_std_err(speedups),
        mean_aal=float(np.mean(aals)),
        se_aal=_std_err(aals),
        mean_budget=float(np.mean(budgets)),
        se_budget=_std_err(budgets),
    )


def _std_err(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def render_summary_csv(rows: list[SummaryRow]) -> str:
    buf = io.StringIO()
    buf.write("pair,policy,trials,mean_speedup,se_speedup,mean_aal,se_aal,mean_budget,se_budget\n")
    for r in rows:
        buf.write(
            f"{r.pair},{r.policy},{r.trials},{r.mean_speedup!r},{r.se_speedup!r},"
            f"{r.mean_aal!r},{r.se_aal!r},{r.mean_budget!r},{r.se_budget!r}\n"
        )
    return buf.getvalue()


def parse_cycle_csv(body: str) -> list[dict[str, str]]:
    reader = csv.DictReader(io.StringIO(body))
    if reader.fieldnames is None or tuple(reader.fieldnames) != CYCLE_CSV_COLUMNS:
        raise ValueError(f"raw CSV must have columns {','.join(CYCLE_CSV_COLUMNS)}")
    return list(reader)


def summarize_from_files(
    cell_paths: list[Path], cfg: ExperimentConfig, params: CostModelParams
) -> str:
    """Independent aggregation path: rebuild the summary from raw CSV files on disk."""
    l_ar = resolve_l_ar(cfg, params)
    by_cell: dict[tuple[int, str], list[str]] = {}
    for path in cell_paths:
        name = Path(path).stem  # raw_p{pair}_{policy}_t{trial}
        parts = name.split("_")
        pair_idx = int(parts[1][1:])
        policy_label = "_".join(parts[2:-1])
        by_cell.setdefault((pair_idx, policy_label), []).append(Path(path).read_text())
    rows = [
        _summarize(pair_idx, policy_label, trial_csvs, l_ar)
        for (pair_idx, policy_label), trial_csvs in sorted(by_cell.items())
    ]
    return render_summary_csv(rows)


@dataclass(frozen=True)
class CalibrationReport:
    fit: CalibrationFit
    n_points: int

    @property
    def reduction_pct(self) -> float:
        if self.fit.rmse_before == 0.0:
            return 0.0
        return 100.0 * (1.0 - self.fit.rmse_after / self.fit.rmse_before)

    def render(self) -> str:
        return (
            f"n_points = {self.n_points}\n"
            f"slope = {self.fit.slope!r}\n"
            f"intercept = {self.fit.intercept!r}\n"
            f"rmse_before = {self.fit.rmse_before!r}\n"
            f"rmse_after = {self.fit.rmse_after!r}\n"
            f"reduction_pct = {self.reduction_pct!r}\n"
        )


def calibrate(profile_path: str | Path, trace_path: str | Path) -> CalibrationReport:
    """Fit the offline latency calibration from a measured trace."""
    params = load_params(profile_path)
    rows = load_trace(trace_path)
    pairs = trace_predictions(params, rows)
    fit = fit_static_calibration(pairs)
    return CalibrationReport(fit=fit, n_points=len(pairs))


def correlate(csv_bodies: list[str]) -> tuple[float, float]:
    """Pearson and Spearman correlation between per-cycle surrogate and accepted length."""
    surrogate: list[float] = []
    accepted: list[float] = []
    for body in csv_bodies:
        for row in parse_cycle_csv(body):
            surrogate.append(float(row["surrogate"]))
            accepted.append(float(row["accepted_len"]))
    if len(surrogate) < 30:
        raise ValueError(f"need at least 30 cycles, got {len(surrogate)}")
    if np.ptp(surrogate) == 0.0 or np.ptp(accepted) == 0.0:
        raise ValueError("correlation undefined: a column is constant")
    pearson = float(stats.pearsonr(surrogate, accepted).statistic)
    spearman = float(stats.spearmanr(surrogate, accepted).statistic)
    return pearson, spearman


@dataclass(frozen=True)
class OracleCheckResult:
    checks: list[tuple[str, bool, str]]
    overhead_us_per_node: float

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def render(self) -> str:
        lines = [
            f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}" for name, ok, detail in self.checks
        ]
        lines.append(f"controller overhead: {self.overhead_us_per_node:.2f} us/node")
        return "\n".join(lines) + "\n"


def _random_block(rng: np.random.Generator, gamma: int, vocab: int) -> MarginalBlock:
    probs = rng.dirichlet(np.full(vocab, 0.7), size=gamma)
    return MarginalBlock(gamma=gamma, vocab_size=vocab, probs=probs)


def oracle_check(seed: int = 0) -> OracleCheckResult:
    """Run the oracle bridge suite at reduced scale plus the overhead timing.

    Covers: surrogate vs exact enumeration, Monte-Carlo chain structure,
    best-first vs exhaustive optima, first-decrease vs exhaustive budget scan,
    and mean controller bookkeeping time per expanded node.
    """
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, bool, str]] = []

    worst = 0.0
    for _ in range(40):
        gamma = int(rng.integers(1, 5))
        vocab = int(rng.integers(2, 6))
        block = _random_block(rng, gamma, vocab)
        lattice = top_k_truncate(block, vocab)
        tree = best_first_expand(lattice, int(rng.integers(1, 13)))
        worst = max(worst, abs(oracle.exact_expected_commit(tree, block) - surrogate_of(tree)))
    checks.append(("surrogate-exactness", worst <= 1e-9, f"max |exact - surrogate| = {worst:.3g}"))

    structure_violations = 0
    clt_misses = 0
    n_fixtures = 300
    for _ in range(n_fixtures):
        gamma = int(rng.integers(1, 5))
        vocab = int(rng.integers(2, 6))
        block = _random_block(rng, gamma, vocab)
        tree = best_first_expand(top_k_truncate(block, vocab), int(rng.integers(1, 10)))
        try:
            mean, se = oracle.monte_carlo_commit(tree, block, 1000, rng)
        except AssertionError:
            structure_violations += 1
            continue
        if abs(mean - surrogate_of(tree)) > max(3.0 * se, 1e-9):
            clt_misses += 1
    # Chain structure is exact (zero tolerance); the 3-sigma CLT bound may miss
    # on up to 1% of fixtures by design.
    ok = structure_violations == 0 and clt_misses <= n_fixtures // 100
    checks.append(
        (
            "monte-carlo-chain",
            ok,
            f"{n_fixtures} fixtures, {structure_violations} structure violations, "
            f"{clt_misses} beyond 3 sigma",
        )
    )

    mismatch = 0
    for _ in range(40):
        gamma = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        vocab = int(rng.integers(max(k, 2), 7))
        lattice = top_k_truncate(_random_block(rng, gamma, vocab), k)
        n_cap = min(lattice.reachable_size(), 8)
        if n_cap < 1:
            continue
        optima = oracle.enumerate_optimal_trees(lattice, n_cap)
        for n in range(1, n_cap + 1):
            fast = best_first_expand(lattice, n)
            if abs(surrogate_of(fast) - optima[n - 1][0]) > 1e-12:
                mismatch += 1
    checks.append(("best-first-optimality", mismatch == 0, f"{mismatch} mismatches"))

    stop_mismatch = 0
    for _ in range(300):
        n = int(rng.integers(2, 40))
        gains = np.sort(rng.random(n))[::-1]
        increments = np.cumsum(rng.random(n) * 0.2)
        costs = 1.0 + np.cumsum(increments)
        l_ar = float(rng.uniform(0.5, 2.0))
        decision = replay_trace(list(gains), list(costs), l_ar)
        surr = []
        acc = 1.0
        for g in gains:
            acc += g
            surr.append(acc)
        if decision.budget != oracle.scan_optimal_budget(surr, list(costs), l_ar):
            stop_mismatch += 1
    checks.append(("first-decrease-stopping", stop_mismatch == 0, f"{stop_mismatch} mismatches"))

    overhead = controller_overhead_us(seed=seed)
    return OracleCheckResult(checks=checks, overhead_us_per_node=overhead)


def controller_overhead_us(seed: int = 0, cycles: int = 12, n_max: int = 4096) -> float:
    """Mean wall time per expanded node for full controller cycles (microseconds)."""
    rng = np.random.default_rng(seed)
    # Toy dimensions with huge peaks keep the estimated verification cost far
    # below t_draft, so the trace never decreases and every cycle expands all
    # n_max nodes; per-node arithmetic is identical to a production profile.
    params = CostModelParams(
        L=2, h=64, n_q=4, n_kv=2, d=16, h_ffn=128, V=256, bp=2,
        peak_flops=1e18, bandwidth=1e17,
    )
    estimator = VerifyLatencyEstimator(params, variant="static")
    latencies = CycleLatencies(t_draft=1.0, t_aux=0.0, l_ar=1.0)
    cfg = ControllerConfig(n_max=n_max, latencies=latencies, variant="static", context_len=512)
    total_nodes = 0
    total_time = 0.0
    for _ in range(cycles):
        block = _random_block(rng, gamma=24, vocab=64)
        lattice = top_k_truncate(block, 16)
        start = time.perf_counter()
        decision = run_cycle(lattice, cfg, estimator)
        total_time += time.perf_counter() - start
        total_nodes += len(decision.s_hat_trace)
    return total_time / total_nodes * 1e6


def best_first_concavity_check(seed: int, lattices: int = 50) -> int:
    """Count violations of non-increasing marginal gains over random expansions."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(lattices):
        gamma = int(rng.integers(1, 6))
        vocab = int(rng.integers(2, 9))
        k = int(rng.integers(1, vocab + 1))
        lattice = top_k_truncate(_random_block(rng, gamma, vocab), k)
        tree = best_first_expand(lattice, int(rng.integers(1, 40)))
        gains = marginal_gains(tree)
        if any(gains[i + 1] > gains[i] for i in range(len(gains) - 1)):
            bad += 1
    return bad
