"""One rollout step of dual-branch adaptive sampling.

Per diffusion step k (K down to 1): local guards for both branches, then the
trajectory-to-vision gate, then one sampler update per branch, then the
controllers observe the new diffs and set the next decisions.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Collection, Mapping, Optional, Sequence

import numpy as np

from . import controller as ctl
from .sampler import BranchModel, VelocityCache, step
from .types import (
    BRANCHES,
    BranchKind,
    ConfigError,
    ContextRecord,
    ControllerConfig,
    CrossModalSeed,
    Decision,
    DiffusionGrid,
    Latent,
    StepSummary,
    TraceEntry,
    validate_config,
)

V, T = BranchKind.VISION, BranchKind.TRAJECTORY


@dataclass(frozen=True)
class DualStepResult:
    x0_vision: Latent
    x0_trajectory: Latent
    summary_v: StepSummary
    summary_t: StepSummary
    seed_out: CrossModalSeed
    trace_slice: tuple
    x_start: Mapping[BranchKind, np.ndarray]
    noise_keys: Mapping[BranchKind, tuple]

    def x0(self, branch: BranchKind) -> Latent:
        return self.x0_vision if branch is V else self.x0_trajectory

    def summary(self, branch: BranchKind) -> StepSummary:
        return self.summary_v if branch is V else self.summary_t


def apply_gate(sigma_t: bool, m_v: Decision) -> tuple[Decision, bool]:
    """Force a vision compute whenever any trajectory guard is active."""
    if sigma_t:
        return Decision.COMPUTE, m_v is Decision.SKIP
    return m_v, False


def seed_next(beta: float, cfg: ControllerConfig, K: int) -> CrossModalSeed:
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    # The 1e-9 keeps products such as 0.1 * 0.3 * 100 from flooring one short.
    expanded = math.floor(cfg.gamma * beta * K + 1e-9)
    return CrossModalSeed(
        beta=beta,
        seeded_warmup=max(cfg.warmup, expanded),
        seeded_theta=cfg.theta * (1.0 + cfg.lam * beta),
    )


def summarize(trace_slice: Sequence[TraceEntry], K: int,
              cfg: Optional[ControllerConfig] = None) -> tuple[StepSummary, StepSummary, CrossModalSeed]:
    """Per-branch counts, ratios and safety fractions, plus the seed for the next step.

    Safety fractions count local guard firings only; gate-forced computes are excluded.
    When ``cfg`` is omitted the seed uses default hyperparameters.
    """
    summaries = {}
    for branch in BRANCHES:
        entries = [e for e in trace_slice if e.branch is branch]
        ks = sorted(e.k for e in entries)
        if ks != list(range(1, K + 1)):
            raise ConfigError(f"trace for {branch.value} does not cover k=1..{K} exactly once")
        computes = sum(1 for e in entries if e.decision is Decision.COMPUTE)
        triggers = sum(1 for e in entries if e.sigma)
        summaries[branch] = StepSummary(branch, computes, K - computes, computes / K, triggers / K)
    beta = max(summaries[V].safety_fraction, summaries[T].safety_fraction)
    seed = seed_next(beta, cfg or ControllerConfig(), K)
    return summaries[V], summaries[T], seed


def noise_key(rng_seed: int, s: int, branch: BranchKind) -> tuple:
    return (int(rng_seed), int(s), BRANCHES.index(branch))


def draw_start(rng_seed: int, s: int, branch: BranchKind, dim: int) -> np.ndarray:
    """Standard-normal x_K for one (rollout step, branch); independent of draw order."""
    return np.random.default_rng(noise_key(rng_seed, s, branch)).standard_normal(dim)


def run_dual_step(ctx: ContextRecord, models: Sequence[BranchModel], grid: DiffusionGrid,
                  cfg: ControllerConfig, seed_in: Optional[CrossModalSeed] = None,
                  rng_seed: int = 0, force_compute: Collection[BranchKind] = ()) -> DualStepResult:
    """Run both branches over the grid for rollout step ``ctx.step_index``.

    Args:
        ctx: conditioning record; its ``start`` is replaced by fresh noise.
        models: ``(vision, trajectory)`` branch models.
        seed_in: seed emitted by the previous rollout step, if any.
        force_compute: branches whose every decision is forced to compute
            (both branches gives the full-compute baseline).
    """
    K = grid.K
    validate_config(cfg, K)
    model = dict(zip(BRANCHES, models))
    if len(model) != 2 or model[V].branch is not V or model[T].branch is not T:
        raise ConfigError("models must be (vision, trajectory)")
    force = frozenset(force_compute)
    s = ctx.step_index

    starts = {b: draw_start(rng_seed, s, b, model[b].dim) for b in BRANCHES}
    ctx = dataclasses.replace(ctx, start=starts)
    x = {b: Latent(starts[b], b, K) for b in BRANCHES}
    state = {b: ctl.ControllerState(b, cfg) for b in BRANCHES}
    cache = {b: VelocityCache() for b in BRANCHES}
    for b in BRANCHES:
        ctl.reset(state[b], seed_in)
        cache[b].invalidate()

    trace = []
    for k in range(K, 0, -1):
        sigma, flags, proposed, m = {}, {}, {}, {}
        for b in BRANCHES:
            sigma[b], flags[b] = ctl.safety_signal(state[b], k, K, cfg)
            proposed[b] = state[b].next_decision
            m[b] = Decision.COMPUTE if (sigma[b] or b in force) else proposed[b]
        m[V], gate_forced = apply_gate(sigma[T], m[V])

        for b in BRANCHES:
            skips_before = state[b].consecutive_skips
            x_next, _ = step(x[b], k, m[b], model[b], cache[b], grid, ctx)
            forced = gate_forced and b is V
            ctl.register_decision_outcome(state[b], m[b], gate_forced=forced, guard_fired=sigma[b])
            d = ctl.diff(x[b], x_next)
            ctl.observe_and_decide(state[b], d, cfg)
            f = flags[b]
            trace.append(TraceEntry(
                s=s, k=k, branch=b, decision=m[b], proposed=proposed[b],
                warmup_active=f.warmup_active, cap_hit=f.cap_hit, stall_hit=f.stall_hit,
                gate_forced=forced, diff=d, residual=ctl.last_residual(state[b]),
                consecutive_skips=skips_before, warmup_eff=state[b].effective_warmup,
                theta_eff=state[b].effective_theta,
            ))
            x[b] = x_next

    summary_v, summary_t, seed_out = summarize(trace, K, cfg)
    for b, summ in ((V, summary_v), (T, summary_t)):
        # Controller tallies and trace replay are two independent routes to rho.
        if state[b].local_safety_triggers != round(summ.safety_fraction * K):
            raise RuntimeError(f"{b.value} safety tally disagrees with trace")
    return DualStepResult(
        x0_vision=x[V], x0_trajectory=x[T], summary_v=summary_v, summary_t=summary_t,
        seed_out=seed_out, trace_slice=tuple(trace), x_start=starts,
        noise_keys={b: noise_key(rng_seed, s, b) for b in BRANCHES},
    )
