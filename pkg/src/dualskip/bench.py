"""Cost model, ablation sweeps, trace files and trace audits."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .orchestrator import summarize
from .rollout import RolloutResult, ScenarioSpec, run_rollout
from .types import (
    BRANCHES,
    BranchKind,
    ConfigError,
    ControllerConfig,
    Decision,
    DecisionTrace,
    DiffusionGrid,
    StepSummary,
    TraceEntry,
    make_uniform_grid,
)

log = logging.getLogger(__name__)

TRACE_SCHEMA = 1

V, T = BranchKind.VISION, BranchKind.TRAJECTORY


@dataclass(frozen=True)
class CostModel:
    """Per-branch cost of one full K-step sampling pass, plus a fixed per-rollout-step overhead (ms).

    Defaults are measured full-compute latencies of the trajectory and vision
    diffusion transformers and the shared context encoder.
    """

    trajectory_ms: float = 20.23
    vision_ms: float = 244.19
    overhead_ms: float = 168.03

    def __post_init__(self):
        for name in ("trajectory_ms", "vision_ms", "overhead_ms"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a nonnegative number")

    def full_pass(self, branch: BranchKind) -> float:
        return self.vision_ms if branch is V else self.trajectory_ms


def simulated_latency(summary: StepSummary, cost: CostModel = CostModel()) -> float:
    """Branch latency for one rollout step: the full-pass cost scaled by the compute ratio."""
    return cost.full_pass(summary.branch) * summary.compute_ratio


def step_latency(summary_v: StepSummary, summary_t: StepSummary, cost: CostModel = CostModel()) -> float:
    return cost.overhead_ms + simulated_latency(summary_v, cost) + simulated_latency(summary_t, cost)


def speedup_from_ratio(compute_ratio: float) -> float:
    return math.inf if compute_ratio == 0 else 1.0 / compute_ratio


@dataclass(frozen=True)
class RolloutCost:
    vision_ms: float
    trajectory_ms: float
    overhead_ms: float
    baseline_vision_ms: float
    baseline_trajectory_ms: float

    @property
    def speedup_vision(self) -> float:
        return _ratio(self.baseline_vision_ms, self.vision_ms)

    @property
    def speedup_trajectory(self) -> float:
        return _ratio(self.baseline_trajectory_ms, self.trajectory_ms)

    @property
    def speedup_diffusion(self) -> float:
        return _ratio(self.baseline_vision_ms + self.baseline_trajectory_ms,
                      self.vision_ms + self.trajectory_ms)

    @property
    def speedup_total(self) -> float:
        return _ratio(self.baseline_vision_ms + self.baseline_trajectory_ms + self.overhead_ms,
                      self.vision_ms + self.trajectory_ms + self.overhead_ms)


def _ratio(num, den):
    return math.inf if den == 0 else num / den


def rollout_cost(result: RolloutResult, cost: CostModel = CostModel()) -> RolloutCost:
    S = len(result.steps)
    return RolloutCost(
        vision_ms=sum(simulated_latency(r.summary_v, cost) for r in result.steps),
        trajectory_ms=sum(simulated_latency(r.summary_t, cost) for r in result.steps),
        overhead_ms=S * cost.overhead_ms,
        baseline_vision_ms=S * cost.vision_ms,
        baseline_trajectory_ms=S * cost.trajectory_ms,
    )


# --------------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepSpec:
    """Full factorial grid over controller hyperparameters."""

    thetas: Sequence[float] = (0.005, 0.01, 0.02)
    c_maxes: Sequence[int] = (2, 4, 8)
    warmups: Sequence[int] = (0, 3, 5)
    epsilons: Sequence[float] = (1e-6, 1e-4, 1e-2)
    repetitions: int = 1
    base: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        if not (self.thetas and self.c_maxes and self.warmups and self.epsilons):
            raise ConfigError("sweep grid must be non-empty on every axis")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")

    def points(self) -> list[ControllerConfig]:
        return [self.base.replace(theta=float(th), c_max=int(c), warmup=int(w), epsilon=float(e))
                for th, c, w, e in itertools.product(self.thetas, self.c_maxes, self.warmups,
                                                      self.epsilons)]


SWEEP_COLUMNS = (
    "point", "repetition", "seed", "theta", "c_max", "warmup", "epsilon", "status",
    "compute_ratio_vision", "compute_ratio_trajectory", "speedup_vision", "speedup_trajectory",
    "speedup_diffusion", "speedup_total", "max_l2_vision", "max_l2_trajectory", "error",
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _sweep_job(args):
    point, rep, cfg, scenario, K, cost = args
    seed = scenario.rng_seed + rep
    row = {"point": point, "repetition": rep, "seed": seed, "theta": cfg.theta,
           "c_max": cfg.c_max, "warmup": cfg.warmup, "epsilon": cfg.epsilon}
    try:
        result = run_rollout(scenario.with_seed(seed), cfg, make_uniform_grid(K))
        rc = rollout_cost(result, cost)
        row.update(
            status="ok",
            compute_ratio_vision=result.compute_ratio[V],
            compute_ratio_trajectory=result.compute_ratio[T],
            speedup_vision=rc.speedup_vision, speedup_trajectory=rc.speedup_trajectory,
            speedup_diffusion=rc.speedup_diffusion, speedup_total=rc.speedup_total,
            max_l2_vision=max(result.errors_vs_baseline[V]),
            max_l2_trajectory=max(result.errors_vs_baseline[T]),
        )
    except Exception as exc:  # a failed point is reported, the sweep continues
        log.warning("sweep point %d failed: %s", point, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def run_sweep(sweep: SweepSpec, scenario: ScenarioSpec, grid: DiffusionGrid,
              cost: CostModel = CostModel(), workers: int = 1) -> list[dict]:
    """One rollout per (grid point, repetition); rows come back in grid order.

    Repetition r uses scenario seed ``rng_seed + r`` for every grid point, so
    points are paired on identical noise and the worker count never changes results.
    """
    jobs = [(i, rep, cfg, scenario, grid.K, cost)
            for i, cfg in enumerate(sweep.points()) for rep in range(sweep.repetitions)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(job) for job in jobs]
    return rows


def sweep_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in SWEEP_COLUMNS])
    return buf.getvalue()


SUMMARY_COLUMNS = (
    "s", "segment", "branch", "computes", "skips", "compute_ratio", "safety_fraction", "beta",
    "seeded_warmup", "seeded_theta", "latency_ms", "l2_vs_baseline", "l2_vs_truth",
)


def summary_rows(result: RolloutResult, cost: CostModel = CostModel()) -> list[dict]:
    rows = []
    for s, (r, ctx) in enumerate(zip(result.steps, result.contexts)):
        for b in BRANCHES:
            summ = r.summary(b)
            base = result.errors_vs_baseline[b]
            rows.append({
                "s": s, "segment": ctx.segment, "branch": b.value, "computes": summ.computes,
                "skips": summ.skips, "compute_ratio": summ.compute_ratio,
                "safety_fraction": summ.safety_fraction, "beta": r.seed_out.beta,
                "seeded_warmup": r.seed_out.seeded_warmup,
                "seeded_theta": r.seed_out.seeded_theta,
                "latency_ms": simulated_latency(summ, cost),
                "l2_vs_baseline": base[s] if base else None,
                "l2_vs_truth": result.errors_vs_truth[b][s],
            })
    return rows


def rows_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in columns])
    return buf.getvalue()


# --------------------------------------------------------------------------- trace files


def trace_lines(trace: DecisionTrace) -> Iterable[str]:
    header = {"record": "header", "schema": TRACE_SCHEMA, "K": trace.K,
              "config": trace.config.to_dict() if trace.config else None}
    yield json.dumps(header, sort_keys=True)
    for entry in trace:
        yield json.dumps({"record": "step", **entry.to_record()}, sort_keys=True)


def emit_trace(result, path) -> Path:
    """Write a trace as newline-delimited JSON: one header line, then one line per (s, k, branch)."""
    trace = result.trace if isinstance(result, RolloutResult) else result
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for line in trace_lines(trace):
                fh.write(line + "\n")
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc
    return path


def parse_trace_lines(lines: Iterable[str]) -> DecisionTrace:
    trace = DecisionTrace()
    seen_header = False
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
        kind = rec.pop("record", None)
        if kind == "header":
            if rec.get("schema") != TRACE_SCHEMA:
                raise ConfigError(f"unsupported trace schema {rec.get('schema')!r}")
            trace.K = rec["K"]
            trace.config = ControllerConfig.from_mapping(rec["config"]) if rec["config"] else None
            seen_header = True
        elif kind == "step":
            trace.append(TraceEntry.from_record(rec))
        else:
            raise ConfigError(f"line {lineno}: unknown record kind {kind!r}")
    if not seen_header:
        raise ConfigError("trace has no header record")
    return trace


def load_trace(path) -> DecisionTrace:
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            return parse_trace_lines(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc}") from exc


# --------------------------------------------------------------------------- audits


def audit_trace(trace: DecisionTrace) -> list[str]:
    """Check controller and gate invariants over a trace; returns violation messages."""
    problems = []
    K = trace.K
    c_max = trace.config.c_max if trace.config else None
    by_step = {}
    for e in trace:
        by_step.setdefault(e.s, {}).setdefault(e.branch, []).append(e)
        if e.gate_forced and e.branch is not V:
            problems.append(f"s={e.s} k={e.k}: gate_forced on {e.branch.value}")
        if e.decision is Decision.SKIP and (e.sigma or e.gate_forced):
            problems.append(f"s={e.s} k={e.k} {e.branch.value}: skip despite active guard")
        if e.k > K - e.warmup_eff and e.decision is not Decision.COMPUTE:
            problems.append(f"s={e.s} k={e.k} {e.branch.value}: skip inside warm-up")
        if c_max is not None and e.consecutive_skips > c_max:
            problems.append(f"s={e.s} k={e.k} {e.branch.value}: skip counter above c_max")

    for s, branches in sorted(by_step.items()):
        for b in BRANCHES:
            entries = sorted(branches.get(b, []), key=lambda e: -e.k)
            if [e.k for e in entries] != list(range(K, 0, -1)):
                problems.append(f"s={s} {b.value}: entries do not cover k={K}..1 exactly once")
                continue
            run = 0
            for e in entries:
                run = run + 1 if e.decision is Decision.SKIP else 0
                if c_max is not None and run > c_max:
                    problems.append(f"s={s} k={e.k} {b.value}: {run} consecutive skips > {c_max}")
                    break
        vision = {e.k: e for e in branches.get(V, [])}
        for e in branches.get(T, []):
            if e.sigma and e.k in vision and vision[e.k].decision is not Decision.COMPUTE:
                problems.append(f"s={s} k={e.k}: trajectory guard active but vision skipped")
    return problems


def audit_summaries(trace: DecisionTrace, rows: Iterable[dict]) -> list[str]:
    """Compare emitted per-step summaries against a replay of the trace."""
    problems = []
    replay = {}
    for s in trace.steps():
        sv, st, _ = summarize(trace.select(s=s), trace.K, trace.config)
        replay[(s, V.value)], replay[(s, T.value)] = sv, st
    for row in rows:
        key = (int(row["s"]), row["branch"])
        want = replay.get(key)
        if want is None:
            problems.append(f"summary row {key} not in trace")
            continue
        if (int(row["computes"]) != want.computes or int(row["skips"]) != want.skips
                or float(row["safety_fraction"]) != want.safety_fraction):
            problems.append(f"summary row {key} disagrees with trace replay")
    return problems
