"""Autoregressive rollout over scripted scenarios, paired with a full-compute baseline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .orchestrator import run_dual_step
from .sampler import AffineFlowModel, BranchModel, CurvedFlowModel
from .types import (
    BRANCHES,
    BranchKind,
    ConfigError,
    ContextRecord,
    ControllerConfig,
    CrossModalSeed,
    DecisionTrace,
    DiffusionGrid,
    _read_toml,
)

CRUISE, MANEUVER = "cruise", "maneuver"
LABELS = (CRUISE, MANEUVER)
MODEL_KINDS = ("affine", "curved")


@dataclass(frozen=True)
class Segment:
    label: str
    steps: int
    amplitude: Optional[float] = None


@dataclass(frozen=True)
class ScenarioSpec:
    """A scripted rollout.

    ``anchors[b]`` is an ``(S, dim)`` table of per-step anchor targets and
    ``amplitudes[b]`` the per-step bend amplitude. Each step's target blends the
    anchor with the previous step's output by ``coupling``.
    """

    labels: tuple
    anchors: Mapping[BranchKind, np.ndarray]
    amplitudes: Mapping[BranchKind, np.ndarray]
    initial: Mapping[BranchKind, np.ndarray]
    rng_seed: int = 0
    model: str = "curved"
    coupling: float = 0.5
    frequency: int = 1
    bumps: Optional[Mapping[BranchKind, np.ndarray]] = None

    def __post_init__(self):
        S = len(self.labels)
        if S < 1:
            raise ConfigError("a scenario needs at least one rollout step")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        for label in self.labels:
            if label not in LABELS:
                raise ConfigError(f"unknown segment label {label!r}")
        for b in BRANCHES:
            if self.anchors[b].ndim != 2 or self.anchors[b].shape[0] != S:
                raise ConfigError(f"{b.value} anchors must have shape (S, dim)")
            if self.amplitudes[b].shape != (S,):
                raise ConfigError(f"{b.value} amplitudes must have length S")
            if self.initial[b].shape != (self.anchors[b].shape[1],):
                raise ConfigError(f"{b.value} initial condition has the wrong dimension")
            amp = self.amplitudes[b]
            labels = np.array(self.labels)
            if self.model == "curved" and CRUISE in self.labels and MANEUVER in self.labels:
                if amp[labels == MANEUVER].min() <= amp[labels == CRUISE].max():
                    raise ConfigError("maneuver amplitudes must exceed cruise amplitudes")

    @property
    def steps(self) -> int:
        return len(self.labels)

    def dim(self, branch: BranchKind) -> int:
        return self.anchors[branch].shape[1]

    def build_models(self) -> tuple[BranchModel, BranchModel]:
        models = []
        for b in BRANCHES:
            if self.model == "affine":
                models.append(AffineFlowModel(b, self.anchors[b], coupling=self.coupling))
            else:
                bump = None if self.bumps is None else self.bumps[b]
                models.append(CurvedFlowModel(b, self.anchors[b], amplitude=self.amplitudes[b],
                                              frequency=self.frequency, bump=bump,
                                              coupling=self.coupling))
        return models[0], models[1]

    def with_seed(self, rng_seed: int) -> "ScenarioSpec":
        return dataclasses.replace(self, rng_seed=int(rng_seed))


def make_scenario(segments: Sequence, model: str = "curved", dim_vision: int = 16,
                  dim_trajectory: int = 4, seed: int = 0, target_scale: float = 10.0,
                  coupling: float = 0.5, frequency: int = 1, cruise_amplitude: float = 0.01,
                  maneuver_amplitude: float = 0.5) -> ScenarioSpec:
    """Build a scenario from ``(label, steps[, amplitude])`` segments.

    Anchors and bend directions are drawn from a seeded normal with standard
    deviation ``target_scale``, so per-step diffs stay far above the stall
    threshold while maneuver bends still reverse individual velocity components.
    """
    segs = [s if isinstance(s, Segment) else Segment(*s) for s in segments]
    labels, amps = [], []
    default_amp = {CRUISE: cruise_amplitude, MANEUVER: maneuver_amplitude}
    for seg in segs:
        if seg.label not in LABELS:
            raise ConfigError(f"unknown segment label {seg.label!r}")
        if int(seg.steps) != seg.steps or seg.steps < 1:
            raise ConfigError("segment steps must be a positive integer")
        amp = default_amp[seg.label] if seg.amplitude is None else float(seg.amplitude)
        labels += [seg.label] * int(seg.steps)
        amps += [amp] * int(seg.steps)
    if model == "affine":
        amps = [0.0] * len(amps)
    amps = np.array(amps, dtype=np.float64)
    dims = {BranchKind.VISION: int(dim_vision), BranchKind.TRAJECTORY: int(dim_trajectory)}
    anchors, initial, bumps = {}, {}, {}
    for i, b in enumerate(BRANCHES):
        rng = np.random.default_rng([int(seed), 7919, i])
        anchors[b] = target_scale * rng.standard_normal((len(labels), dims[b]))
        initial[b] = target_scale * rng.standard_normal(dims[b])
        bumps[b] = target_scale * rng.standard_normal(dims[b])
    return ScenarioSpec(
        labels=tuple(labels), anchors=anchors, amplitudes={b: amps.copy() for b in BRANCHES},
        initial=initial, rng_seed=int(seed), model=model, coupling=coupling,
        frequency=frequency, bumps=bumps,
    )


def affine_scenario(steps: int = 10, seed: int = 0, **kw) -> ScenarioSpec:
    return make_scenario([(CRUISE, steps)], model="affine", seed=seed, **kw)


def curved_scenario(steps: int = 10, seed: int = 0, **kw) -> ScenarioSpec:
    """Default curved scenario: every rollout step is a maneuver-strength bend."""
    return make_scenario([(MANEUVER, steps)], model="curved", seed=seed, **kw)


def mixed_scenario(seed: int = 0, **kw) -> ScenarioSpec:
    """Cruise / maneuver / cruise pattern, four steps with the maneuver at s=2."""
    return make_scenario([(CRUISE, 2), (MANEUVER, 1), (CRUISE, 1)], model="curved",
                         seed=seed, **kw)


PRESETS = {"affine": affine_scenario, "curved": curved_scenario, "mixed": mixed_scenario}

_SCENARIO_KEYS = {"model", "seed", "dim_vision", "dim_trajectory", "target_scale", "coupling",
                  "frequency", "cruise_amplitude", "maneuver_amplitude", "segment"}
_SEGMENT_KEYS = {"label", "steps", "amplitude"}


def scenario_from_mapping(data: Mapping) -> ScenarioSpec:
    unknown = sorted(set(data) - _SCENARIO_KEYS)
    if unknown:
        raise ConfigError(f"unknown scenario keys: {', '.join(unknown)}")
    blocks = data.get("segment")
    if not blocks:
        raise ConfigError("scenario needs at least one [[segment]] block")
    segments = []
    for block in blocks:
        bad = sorted(set(block) - _SEGMENT_KEYS)
        if bad:
            raise ConfigError(f"unknown segment keys: {', '.join(bad)}")
        if "label" not in block or "steps" not in block:
            raise ConfigError("each segment needs label and steps")
        segments.append(Segment(block["label"], block["steps"], block.get("amplitude")))
    kwargs = {k: v for k, v in data.items() if k != "segment"}
    return make_scenario(segments, **kwargs)


def load_scenario(path) -> ScenarioSpec:
    """Load a scenario file: flat keys plus one ``[[segment]]`` block per segment."""
    return scenario_from_mapping(_read_toml(path))


@dataclass
class RolloutResult:
    steps: list
    contexts: list
    baseline_steps: Optional[list]
    baseline_contexts: Optional[list]
    errors_vs_baseline: dict
    errors_vs_truth: dict
    compute_ratio: dict
    eval_counts: dict
    baseline_eval_counts: Optional[dict]
    trace: DecisionTrace

    @property
    def seeds(self) -> list:
        return [r.seed_out for r in self.steps]


def compare_to_baseline(adaptive: Sequence, baseline: Sequence) -> list:
    """Euclidean distance per entry between two equally shaped latent sequences."""
    if len(adaptive) != len(baseline):
        raise ConfigError(f"length mismatch: {len(adaptive)} vs {len(baseline)}")
    out = []
    for a, b in zip(adaptive, baseline):
        a = getattr(a, "values", a)
        b = getattr(b, "values", b)
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
        out.append(float(np.linalg.norm(a - b)))
    return out


def _chain(spec: ScenarioSpec, cfg: ControllerConfig, grid: DiffusionGrid, models, force):
    results, contexts = [], []
    previous = dict(spec.initial)
    seed: Optional[CrossModalSeed] = None
    for s in range(spec.steps):
        ctx = ContextRecord(step_index=s, previous=previous, segment=spec.labels[s])
        res = run_dual_step(ctx, models, grid, cfg, seed_in=seed, rng_seed=spec.rng_seed,
                            force_compute=force)
        contexts.append(dataclasses.replace(ctx, start=res.x_start))
        results.append(res)
        previous = {b: res.x0(b).values for b in BRANCHES}
        seed = res.seed_out
    return results, contexts


def run_rollout(spec: ScenarioSpec, cfg: ControllerConfig, grid: DiffusionGrid,
                baseline: bool = True, force_compute=()) -> RolloutResult:
    """Adaptive rollout with self-conditioning; optionally the paired baseline rollout.

    The baseline runs the same scenario and noise stream with every decision
    forced to compute, conditioned on its own outputs. ``force_compute`` forces
    the named branches to compute in the primary rollout as well.
    """
    models = spec.build_models()
    steps, contexts = _chain(spec, cfg, grid, models, force=tuple(force_compute))
    trace = DecisionTrace(K=grid.K, config=cfg)
    for r in steps:
        trace.extend(r.trace_slice)

    errors_truth = {b: [] for b in BRANCHES}
    for r, ctx in zip(steps, contexts):
        for b, m in zip(BRANCHES, models):
            truth = m.ground_truth(ctx)
            errors_truth[b].append(None if truth is None
                                   else compare_to_baseline([r.x0(b)], [truth])[0])

    base_steps = base_contexts = base_counts = None
    errors_base = {b: [] for b in BRANCHES}
    if baseline:
        base_models = spec.build_models()
        base_steps, base_contexts = _chain(spec, cfg, grid, base_models, force=BRANCHES)
        base_counts = {b: m.eval_count for b, m in zip(BRANCHES, base_models)}
        for b in BRANCHES:
            errors_base[b] = compare_to_baseline([r.x0(b) for r in steps],
                                                 [r.x0(b) for r in base_steps])

    K = grid.K
    ratio = {b: sum(r.summary(b).computes for r in steps) / (K * spec.steps) for b in BRANCHES}
    return RolloutResult(
        steps=steps, contexts=contexts, baseline_steps=base_steps,
        baseline_contexts=base_contexts, errors_vs_baseline=errors_base,
        errors_vs_truth=errors_truth, compute_ratio=ratio,
        eval_counts={b: m.eval_count for b, m in zip(BRANCHES, models)},
        baseline_eval_counts=base_counts, trace=trace,
    )
