"""Per-branch skip controller: difficulty proxy, second-order residual and safety guards.

The controller runs in reverse diffusion time. After step k has produced
x_{k-1}, the diff d_k is pushed into a three-slot FIFO holding
``[d_{k+2}, d_{k+1}, d_k]``, and the residual on that window decides the
*next* step's decision m_{k-1}.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .types import (
    BranchKind,
    ConfigError,
    ControllerConfig,
    CrossModalSeed,
    Decision,
    GuardFlags,
    Latent,
)

WINDOW = 3


class NotReady(Exception):
    """The diff buffer does not yet hold three entries."""


@dataclass
class ControllerState:
    branch: BranchKind
    config: ControllerConfig
    diff_buffer: deque = field(default_factory=lambda: deque(maxlen=WINDOW))
    consecutive_skips: int = 0
    next_decision: Decision = Decision.COMPUTE
    local_safety_triggers: int = 0
    effective_theta: float = 0.0
    effective_warmup: int = 0

    def __post_init__(self):
        self.effective_theta = self.config.theta
        self.effective_warmup = self.config.warmup

    @property
    def ready(self) -> bool:
        return len(self.diff_buffer) == WINDOW


def diff(x_prev: Latent, x_next: Latent) -> float:
    """Mean absolute change between the latents before and after one diffusion step."""
    a = x_prev.values if isinstance(x_prev, Latent) else np.asarray(x_prev, dtype=np.float64)
    b = x_next.values if isinstance(x_next, Latent) else np.asarray(x_next, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if isinstance(x_prev, Latent) and isinstance(x_next, Latent) and x_prev.branch is not x_next.branch:
        raise ConfigError("diff across branches")
    return float(np.mean(np.abs(a - b)))


def residual(buffer: Sequence[float]) -> float:
    """``|(d_k + d_{k+2})/2 - d_{k+1}|`` for a window ``[d_{k+2}, d_{k+1}, d_k]``."""
    if len(buffer) != WINDOW:
        raise NotReady(f"need {WINDOW} diffs, have {len(buffer)}")
    d_old, d_mid, d_new = buffer
    return abs(0.5 * (d_new + d_old) - d_mid)


def smoothness_skip_test(delta: float, d_recent: float, theta_eff: float) -> Decision:
    return Decision.SKIP if delta <= theta_eff * d_recent else Decision.COMPUTE


def safety_signal(state: ControllerState, k: int, K: int,
                  cfg: Optional[ControllerConfig] = None) -> tuple[bool, GuardFlags]:
    """Local guards for diffusion step k: warm-up, consecutive-skip cap, stall.

    The warm-up uses the state's effective (possibly seeded) warm-up length. The
    stall term is omitted while the buffer is empty.
    """
    cfg = cfg or state.config
    flags = GuardFlags(
        warmup_active=k > K - state.effective_warmup,
        cap_hit=state.consecutive_skips == cfg.c_max,
        stall_hit=bool(state.diff_buffer) and state.diff_buffer[-1] <= cfg.epsilon,
    )
    return flags.any, flags


def observe_and_decide(state: ControllerState, new_diff: float,
                       cfg: Optional[ControllerConfig] = None) -> Decision:
    """Push the just-computed diff and set the pending decision for the next step."""
    cfg = cfg or state.config
    state.diff_buffer.append(float(new_diff))
    decision = Decision.COMPUTE
    if state.ready and state.consecutive_skips < cfg.c_max:
        decision = smoothness_skip_test(residual(state.diff_buffer), state.diff_buffer[1],
                                        state.effective_theta)
    state.next_decision = decision
    return decision


def last_residual(state: ControllerState) -> Optional[float]:
    return residual(state.diff_buffer) if state.ready else None


def register_decision_outcome(state: ControllerState, executed: Decision, gate_forced: bool = False,
                              guard_fired: bool = False):
    """Update counters after a step has run.

    ``guard_fired`` says whether a local guard fired for this step; gate-forced
    computes alone never count as local triggers.
    """
    if executed is Decision.SKIP:
        if guard_fired or gate_forced:
            raise RuntimeError("skip executed despite an active guard or gate")
        state.consecutive_skips += 1
        if state.consecutive_skips > state.config.c_max:
            raise RuntimeError("consecutive-skip cap exceeded")
    else:
        state.consecutive_skips = 0
    if guard_fired:
        state.local_safety_triggers += 1


def reset(state: ControllerState, seed: Optional[CrossModalSeed] = None):
    state.diff_buffer.clear()
    state.consecutive_skips = 0
    state.next_decision = Decision.COMPUTE
    state.local_safety_triggers = 0
    if seed is None:
        state.effective_theta = state.config.theta
        state.effective_warmup = state.config.warmup
    else:
        state.effective_theta = seed.seeded_theta
        state.effective_warmup = seed.seeded_warmup
