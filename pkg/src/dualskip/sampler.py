"""Euler sampler update, velocity caching and analytic branch models.

Models return dx/dtau, so one update from tau_k to tau_{k-1} is
``x + (tau_{k-1} - tau_k) * v``. The toy fields follow straight rectified-flow
paths from the step's noise ``x_K`` (at tau=1) to a target (at tau=0).
"""

from __future__ import annotations

import abc
import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .types import BranchKind, ConfigError, ContextRecord, Decision, DiffusionGrid, Latent


@dataclass
class VelocityCache:
    cached: Optional[np.ndarray] = None
    valid: bool = False

    def store(self, velocity: np.ndarray):
        self.cached = velocity
        self.valid = True

    def invalidate(self):
        self.cached = None
        self.valid = False


class BranchModel(abc.ABC):
    """Velocity field for one branch. ``eval_count`` tallies ``evaluate`` calls."""

    def __init__(self, branch: BranchKind, dim: int):
        self.branch = BranchKind(branch)
        self.dim = int(dim)
        self.eval_count = 0

    def evaluate(self, x: Latent, tau: float, ctx: ContextRecord) -> np.ndarray:
        self.eval_count += 1
        return self._velocity(x, tau, ctx)

    @abc.abstractmethod
    def _velocity(self, x: Latent, tau: float, ctx: ContextRecord) -> np.ndarray:
        ...

    def ground_truth(self, ctx: ContextRecord) -> Optional[np.ndarray]:
        return None


class CurvedFlowModel(BranchModel):
    """Straight path to a target plus a sinusoidal bend that vanishes at both ends.

    The exact path is ``x(tau) = target + tau * (x_K - target) + a * sin(pi f tau) * bump``
    with velocity ``(x_K - target) + a * pi * f * cos(pi f tau) * bump``. For an
    integer frequency f the bend is zero at tau=0 and tau=1, so the exact endpoint
    is still ``target``.

    Args:
        branch: branch this model serves.
        target: fixed target vector, or an ``(S, dim)`` table indexed by rollout step.
        amplitude: bend amplitude ``a`` (scalar or per rollout step).
        frequency: integer number of half periods over [0, 1].
        bump: bend direction (defaults to all ones).
        coupling: weight of the previous step's output in the target,
            ``target = coupling * previous + (1 - coupling) * anchor``.
    """

    def __init__(self, branch, target, amplitude=0.0, frequency: int = 1, bump=None,
                 coupling: float = 0.0):
        anchors = np.asarray(target, dtype=np.float64)
        if anchors.ndim not in (1, 2):
            raise ConfigError("target must be a vector or a per-step table")
        super().__init__(branch, anchors.shape[-1])
        self.anchors = anchors
        self.amplitude = np.asarray(amplitude, dtype=np.float64)
        if np.any(self.amplitude < 0):
            raise ConfigError("amplitude must be nonnegative")
        if int(frequency) != frequency or frequency < 1:
            raise ConfigError("frequency must be a positive integer")
        self.frequency = int(frequency)
        self.bump = (np.ones(self.dim) if bump is None
                     else np.asarray(bump, dtype=np.float64))
        if self.bump.shape != (self.dim,):
            raise ConfigError("bump must match the target dimension")
        if not 0.0 <= coupling < 1.0:
            raise ConfigError("coupling must lie in [0, 1)")
        self.coupling = float(coupling)

    def _amplitude(self, s: int) -> float:
        return float(self.amplitude if self.amplitude.ndim == 0 else self.amplitude[s])

    def target(self, ctx: ContextRecord) -> np.ndarray:
        anchor = self.anchors if self.anchors.ndim == 1 else self.anchors[ctx.step_index]
        if self.coupling == 0.0:
            return anchor
        return self.coupling * ctx.previous[self.branch] + (1.0 - self.coupling) * anchor

    def _velocity(self, x, tau, ctx):
        try:
            start = ctx.start[self.branch]
        except KeyError:
            raise ConfigError(f"context carries no start latent for {self.branch.value}") from None
        v = start - self.target(ctx)
        a = self._amplitude(ctx.step_index)
        if a != 0.0:
            w = np.pi * self.frequency
            v = v + (a * w * np.cos(w * tau)) * self.bump
        return v

    def ground_truth(self, ctx):
        return self.target(ctx)


class AffineFlowModel(CurvedFlowModel):
    """Constant velocity ``x_K - target``; Euler reaches the target exactly on any grid."""

    def __init__(self, branch, target, coupling: float = 0.0):
        super().__init__(branch, target, amplitude=0.0, coupling=coupling)


def psi_update(x: Latent, tau_k: float, tau_prev: float, velocity: np.ndarray) -> Latent:
    """One forward-Euler step from tau_k down to tau_prev."""
    if not tau_prev < tau_k:
        raise ConfigError(f"expected descending step, got {tau_k} -> {tau_prev}")
    velocity = np.asarray(velocity, dtype=np.float64)
    if velocity.shape != x.values.shape:
        raise ConfigError(f"velocity shape {velocity.shape} does not match latent {x.values.shape}")
    return Latent(x.values + (tau_prev - tau_k) * velocity, x.branch, x.k - 1)


def step(x: Latent, k: int, decision: Decision, model: BranchModel, cache: VelocityCache,
         grid: DiffusionGrid, ctx: ContextRecord) -> tuple[Latent, np.ndarray]:
    tau_k, tau_prev = grid.taus[k], grid.taus[k - 1]
    if decision is Decision.COMPUTE:
        velocity = model.evaluate(x, tau_k, ctx)
        cache.store(velocity)
    else:
        if not cache.valid:
            raise RuntimeError(f"skip at k={k} on {x.branch.value} with an empty velocity cache")
        velocity = cache.cached
    return psi_update(x, tau_k, tau_prev, velocity), velocity


def sample_branch_full(model: BranchModel, grid: DiffusionGrid, x_K: Latent,
                       ctx: ContextRecord) -> Latent:
    """Full-compute baseline: K model evaluations from x_K to x_0."""
    if model.branch not in ctx.start:
        ctx = dataclasses.replace(ctx, start={**ctx.start, model.branch: x_K.values})
    cache = VelocityCache()
    x = x_K
    for k in range(grid.K, 0, -1):
        x, _ = step(x, k, Decision.COMPUTE, model, cache, grid, ctx)
    return x
