"""Training-free dual-branch skip control for coupled diffusion samplers."""

from .bench import CostModel, SweepSpec, emit_trace, load_trace, run_sweep, simulated_latency
from .orchestrator import DualStepResult, apply_gate, run_dual_step, seed_next, summarize
from .rollout import ScenarioSpec, compare_to_baseline, load_scenario, make_scenario, run_rollout
from .sampler import AffineFlowModel, BranchModel, CurvedFlowModel, sample_branch_full
from .types import (
    BranchKind,
    ConfigError,
    ContextRecord,
    ControllerConfig,
    CrossModalSeed,
    Decision,
    DecisionTrace,
    DiffusionGrid,
    Latent,
    StepSummary,
    load_config,
    make_uniform_grid,
    validate_config,
)

__version__ = "0.1.0"

__all__ = [
    "AffineFlowModel", "BranchKind", "BranchModel", "ConfigError", "ContextRecord",
    "ControllerConfig", "CostModel", "CrossModalSeed", "CurvedFlowModel", "Decision",
    "DecisionTrace", "DiffusionGrid", "DualStepResult", "Latent", "ScenarioSpec", "StepSummary",
    "SweepSpec", "apply_gate", "compare_to_baseline", "emit_trace", "load_config", "load_scenario",
    "load_trace", "make_scenario", "make_uniform_grid", "run_dual_step", "run_rollout",
    "run_sweep", "sample_branch_full", "seed_next", "simulated_latency", "summarize",
    "validate_config",
]
