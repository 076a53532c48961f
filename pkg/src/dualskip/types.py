"""Shared domain types: time grid, controller configuration, decisions and traces."""

from __future__ import annotations

import dataclasses
import enum
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for invalid configuration, scenario or grid arguments."""


class BranchKind(str, enum.Enum):
    VISION = "vision"
    TRAJECTORY = "trajectory"


# Fixed branch order: vision first, used for trace ordering and noise keys.
BRANCHES = (BranchKind.VISION, BranchKind.TRAJECTORY)


class Decision(str, enum.Enum):
    COMPUTE = "compute"
    SKIP = "skip"


@dataclass(frozen=True)
class DiffusionGrid:
    """Diffusion times ``taus[0] < ... < taus[K]``; sampling walks from index K down to 0."""

    taus: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=np.float64)
        if taus.ndim != 1 or taus.size < 2:
            raise ConfigError("grid needs at least two time points")
        if not np.all(np.diff(taus) > 0):
            raise ConfigError("grid times must be strictly increasing")
        taus.setflags(write=False)
        object.__setattr__(self, "taus", taus)

    @property
    def K(self) -> int:
        return self.taus.size - 1

    def __len__(self):
        return self.taus.size


def make_uniform_grid(K: int) -> DiffusionGrid:
    if int(K) != K or K < 1:
        raise ConfigError(f"K must be a positive integer, got {K!r}")
    K = int(K)
    return DiffusionGrid(np.arange(K + 1, dtype=np.float64) / K)


@dataclass(frozen=True)
class ControllerConfig:
    """Skip-controller hyperparameters.

    Attributes:
        theta: relative tolerance of the smoothness test.
        warmup: number of initial diffusion steps that always compute.
        c_max: maximum number of consecutive skips.
        epsilon: stall threshold on the most recent diff.
        gamma: gain of the warm-up expansion seeded from the previous rollout step.
        lam: gain of the threshold relaxation seeded from the previous rollout step
            (``lambda`` in config files).
    """

    theta: float = 0.01
    warmup: int = 3
    c_max: int = 4
    epsilon: float = 1e-6
    gamma: float = 0.1
    lam: float = 0.5

    # file key -> field name
    FILE_KEYS = {
        "theta": "theta",
        "warmup": "warmup",
        "c_max": "c_max",
        "epsilon": "epsilon",
        "gamma": "gamma",
        "lambda": "lam",
    }

    def replace(self, **changes) -> "ControllerConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {key: getattr(self, name) for key, name in self.FILE_KEYS.items()}

    @classmethod
    def from_mapping(cls, data: Mapping) -> "ControllerConfig":
        unknown = sorted(set(data) - set(cls.FILE_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            name = cls.FILE_KEYS[key]
            if name in ("warmup", "c_max"):
                if isinstance(value, bool) or int(value) != value:
                    raise ConfigError(f"{key} must be an integer, got {value!r}")
                value = int(value)
            else:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} must be a number, got {value!r}")
                value = float(value)
            kwargs[name] = value
        return cls(**kwargs)


def validate_config(cfg: ControllerConfig, K: int) -> ControllerConfig:
    """Return ``cfg`` unchanged if it is usable on a K-step grid, else raise ConfigError."""
    problems = []
    for name in ("theta", "epsilon", "gamma", "lam"):
        value = getattr(cfg, name)
        if not math.isfinite(value) or value < 0:
            problems.append(f"{name} must be finite and nonnegative (got {value!r})")
    if cfg.warmup < 0:
        problems.append(f"warmup must be nonnegative (got {cfg.warmup})")
    elif cfg.warmup > K:
        problems.append(f"warmup {cfg.warmup} exceeds grid size K={K}")
    if cfg.c_max < 0:
        problems.append(f"c_max must be nonnegative (got {cfg.c_max})")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def _read_toml(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path) -> ControllerConfig:
    """Load a flat ``key = value`` config file. Unknown keys are rejected."""
    return ControllerConfig.from_mapping(_read_toml(path))


@dataclass(frozen=True)
class Latent:
    values: np.ndarray
    branch: BranchKind
    k: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigError("latent values must be a 1-d vector")
        if not np.isfinite(values).all():
            raise FloatingPointError(f"non-finite {self.branch.value} latent at k={self.k}")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class StepSummary:
    branch: BranchKind
    computes: int
    skips: int
    compute_ratio: float
    safety_fraction: float

    @property
    def K(self) -> int:
        return self.computes + self.skips


@dataclass(frozen=True)
class CrossModalSeed:
    beta: float
    seeded_warmup: int
    seeded_theta: float


@dataclass(frozen=True)
class ContextRecord:
    """Conditioning for one rollout step.

    ``previous`` holds each branch's x_0 from step ``step_index - 1`` (initial
    conditions at step 0). ``start`` holds the x_K noise drawn for this step; it
    is filled in by the orchestrator before any model evaluation.
    """

    step_index: int
    previous: Mapping[BranchKind, np.ndarray]
    segment: str = "cruise"
    start: Mapping[BranchKind, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class GuardFlags:
    warmup_active: bool = False
    cap_hit: bool = False
    stall_hit: bool = False

    @property
    def any(self) -> bool:
        return self.warmup_active or self.cap_hit or self.stall_hit


@dataclass(frozen=True)
class TraceEntry:
    """Audit record for one (rollout step, diffusion step, branch).

    ``decision`` is what was executed; ``proposed`` is the controller's pending
    decision before guards and gate. ``residual`` is None while the diff buffer
    is underfull.
    """

    s: int
    k: int
    branch: BranchKind
    decision: Decision
    proposed: Decision
    warmup_active: bool
    cap_hit: bool
    stall_hit: bool
    gate_forced: bool
    diff: float
    residual: Optional[float]
    consecutive_skips: int
    warmup_eff: int
    theta_eff: float

    @property
    def sigma(self) -> bool:
        return self.warmup_active or self.cap_hit or self.stall_hit

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["branch"] = self.branch.value
        rec["decision"] = self.decision.value
        rec["proposed"] = self.proposed.value
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "TraceEntry":
        names = [f.name for f in dataclasses.fields(cls)]
        missing = [n for n in names if n not in rec]
        if missing:
            raise ConfigError(f"trace record missing fields: {', '.join(missing)}")
        kwargs = {n: rec[n] for n in names}
        kwargs["branch"] = BranchKind(kwargs["branch"])
        kwargs["decision"] = Decision(kwargs["decision"])
        kwargs["proposed"] = Decision(kwargs["proposed"])
        return cls(**kwargs)


class DecisionTrace:
    """Ordered list of TraceEntry records plus the run metadata needed to audit them."""

    def __init__(self, entries: Sequence[TraceEntry] = (), K: Optional[int] = None,
                 config: Optional[ControllerConfig] = None):
        self.entries = list(entries)
        self.K = K
        self.config = config

    def append(self, entry: TraceEntry):
        self.entries.append(entry)

    def extend(self, entries):
        self.entries.extend(entries)

    def __iter__(self) -> Iterator[TraceEntry]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, DecisionTrace):
            return NotImplemented
        return (self.entries == other.entries and self.K == other.K
                and self.config == other.config)

    def steps(self) -> list[int]:
        return sorted({e.s for e in self.entries})

    def select(self, s: Optional[int] = None, branch: Optional[BranchKind] = None) -> list[TraceEntry]:
        return [e for e in self.entries
                if (s is None or e.s == s) and (branch is None or e.branch is branch)]

    def decisions(self, s: int, branch: BranchKind) -> list[Decision]:
        """Executed decisions for one rollout step, ordered k = K .. 1."""
        return [e.decision for e in sorted(self.select(s, branch), key=lambda e: -e.k)]

    def compute_count(self, branch: Optional[BranchKind] = None) -> int:
        return sum(1 for e in self.entries
                   if e.decision is Decision.COMPUTE and (branch is None or e.branch is branch))
