# src/config.py
"""
Configuration records for experiments, training and the deterministic
solvers. Every record round-trips through a plain dict so that it can be
stored in the run manifest and in the ledger.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union

from errors import RejectedInputError, SchemaError

PARADIGMS = ("baty", "sampling", "anticipative_dagger", "voting_dagger")
POLICIES = ("mean", "saa1", "saa3", "mlco", "anticipative")
DEFAULT_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)

_C = TypeVar("_C")


def _from_mapping(cls: Type[_C], data: Any, path: str) -> _C:
    if not isinstance(data, dict):
        raise SchemaError("expected a JSON object", path or "<root>")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        prefix = f"{path}." if path else ""
        raise SchemaError("unknown configuration key", prefix + unknown[0])
    values = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        values[key] = value
    return cls(**values)


@dataclass(frozen=True)
class SolverConfig:
    """Budgets and guards of the deterministic IRP solvers"""
    exhaustive_max_n: int = 6
    exhaustive_max_h: int = 4
    ls_budget: int = 50_000
    ls_restarts: int = 5
    anticipative_restarts: int = 10
    saa3_enumeration_max_n: int = 10
    saa3_continuation_budget: int = 5_000
    seed: int = 0

    def __post_init__(self):
        if self.exhaustive_max_n < 1 or self.exhaustive_max_h < 1:
            raise RejectedInputError("exhaustive guards must be positive")
        if self.ls_budget < 0 or self.ls_restarts < 1 or self.anticipative_restarts < 1:
            raise RejectedInputError("local search needs budget >= 0 and at least one restart")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Any, path: str = "solver") -> "SolverConfig":
        return _from_mapping(cls, data, path)


@dataclass(frozen=True)
class TrainConfig:
    paradigm: str = "voting_dagger"
    epochs: int = 20
    alpha_schedule: Optional[Tuple[float, ...]] = None
    voting: int = 5
    n_pert: int = 20
    pert_scale: float = 1.0
    step_size: float = 1e-2
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    fit_steps: int = 100
    eval_interval: int = 10
    patience: int = 3
    lookahead: int = 6
    quantiles: Tuple[float, ...] = DEFAULT_QUANTILES
    episode_length: int = 10
    samples_per_epoch: int = 60
    dataset_size: int = 600
    max_age: int = 10
    retain_prob: float = 0.5
    validation_episodes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise RejectedInputError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        if self.epochs < 1:
            raise RejectedInputError("epochs must be >= 1")
        if self.voting < 1 or self.n_pert < 1:
            raise RejectedInputError("voting and n_pert must be >= 1")
        if self.pert_scale < 0:
            raise RejectedInputError("pert_scale must be >= 0")
        if self.lookahead < 1 or self.batch_size < 1 or self.patience < 1:
            raise RejectedInputError("lookahead, batch_size and patience must be >= 1")
        if self.validation_episodes != 5:
            raise RejectedInputError("early stopping is defined over exactly 5 validation episodes")
        if self.alpha_schedule is not None:
            alphas = tuple(float(a) for a in self.alpha_schedule)
            if any(not 0.0 <= a <= 1.0 for a in alphas):
                raise RejectedInputError("alpha_schedule entries must lie in [0, 1]")
            if any(b > a for a, b in zip(alphas, alphas[1:])):
                raise RejectedInputError("alpha_schedule must be non-increasing")
            object.__setattr__(self, "alpha_schedule", alphas)
        object.__setattr__(self, "quantiles", tuple(float(p) for p in self.quantiles))

    def alpha(self, epoch: int) -> float:
        """Mixture weight of the expert at `epoch` (0-based)"""
        if self.alpha_schedule is not None:
            if epoch < len(self.alpha_schedule):
                return self.alpha_schedule[epoch]
            return self.alpha_schedule[-1] if self.alpha_schedule else 0.0
        return max(0.0, 1.0 - epoch / (self.epochs / 2.0))

    @property
    def is_dagger(self) -> bool:
        return self.paradigm in ("anticipative_dagger", "voting_dagger")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["quantiles"] = list(self.quantiles)
        if self.alpha_schedule is not None:
            data["alpha_schedule"] = list(self.alpha_schedule)
        return data

    @classmethod
    def from_dict(cls, data: Any, path: str = "train") -> "TrainConfig":
        return _from_mapping(cls, data, path)


@dataclass(frozen=True)
class ExperimentConfig:
    patterns: Tuple[str, ...] = ("normal", "uniform", "bimodal", "contextual")
    instances_per_pattern: int = 10
    n: int = 10
    T_eval: int = 10
    eval_episodes: int = 10
    history_length: int = 50
    penalties: Tuple[str, ...] = ("low", "high")
    policies: Tuple[str, ...] = ("mean", "saa1", "saa3", "mlco")
    saa1_repeat: bool = False
    eoh_source: str = "dataset"
    seed: int = 0
    out: str = "runs"
    force: bool = False
    jobs: int = 1
    # runtime knobs
    log_level: str = "INFO"
    progress: bool = True
    db_path: Optional[str] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        from instance_generator import PATTERNS, PENALTIES
        bad = [p for p in self.patterns if p not in PATTERNS]
        if bad:
            raise RejectedInputError(f"unknown pattern(s) {bad}; expected a subset of {PATTERNS}")
        bad = [p for p in self.penalties if p not in PENALTIES]
        if bad:
            raise RejectedInputError(f"unknown penalty level(s) {bad}")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise RejectedInputError(f"unknown policy tag(s) {bad}; expected a subset of {POLICIES}")
        if self.n < 2 or self.instances_per_pattern < 1 or self.T_eval < 1 or self.eval_episodes < 1:
            raise RejectedInputError("n >= 2, instances_per_pattern >= 1, T_eval >= 1, eval_episodes >= 1")
        if self.eoh_source not in ("dataset", "trajectories"):
            raise RejectedInputError("eoh source must be 'dataset' or 'trajectories'")
        if self.jobs < 1:
            raise RejectedInputError("jobs must be >= 1")
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig.from_dict(self.train))
        if isinstance(self.solver, dict):
            object.__setattr__(self, "solver", SolverConfig.from_dict(self.solver))

    @property
    def output_dir(self) -> Path:
        return Path(self.out)

    @property
    def ledger_path(self) -> Path:
        return Path(self.db_path) if self.db_path else self.output_dir / "logs" / "ledger.db"

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        data["train"] = self.train.to_dict()
        data["solver"] = self.solver.to_dict()
        return data

    def experiment_dict(self) -> Dict[str, Any]:
        """The part of the config that determines results (no runtime knobs)"""
        data = self.to_dict()
        for key in ("out", "force", "jobs", "log_level", "progress", "db_path"):
            data.pop(key)
        return data

    @classmethod
    def from_dict(cls, data: Any) -> "ExperimentConfig":
        return _from_mapping(cls, data, "")

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON ({e.msg})", str(path)) from e
        return cls.from_dict(data)

    def with_overrides(self, **flags: Any) -> "ExperimentConfig":
        """Apply non-None flags; train/solver fields are routed to the nested records"""
        top, train, solver = {}, {}, {}
        train_fields = {f.name for f in fields(TrainConfig)}
        solver_fields = {f.name for f in fields(SolverConfig)}
        own_fields = {f.name for f in fields(self)}
        for key, value in flags.items():
            if value is None:
                continue
            if isinstance(value, list):
                value = tuple(value)
            if key in own_fields and key not in ("train", "solver"):
                top[key] = value
            elif key in train_fields:
                train[key] = value
            elif key in solver_fields:
                solver[key] = value
            else:
                raise RejectedInputError(f"unknown configuration flag {key!r}")
        if train:
            top["train"] = replace(self.train, **train)
        if solver:
            top["solver"] = replace(self.solver, **solver)
        return replace(self, **top)
