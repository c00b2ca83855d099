"""Experiment configuration: nested dataclasses bound strictly from YAML.

Unknown keys are errors, not warnings — a config that silently ignores a
typo'd key produces an experiment nobody asked for.  Every run echoes
its effective config into the output directory, and that echo re-binds
to an identical object, which is what makes reruns reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

__all__ = [
    "ConfigError",
    "WorldConfig",
    "TrainConfig",
    "CurriculumConfig",
    "TemperatureConfig",
    "DistillConfig",
    "LogConfig",
    "ExperimentConfig",
    "bind_config",
    "load_config",
    "dump_config",
]

MODES = ("colocated_sync", "disaggregated_async")
WORLD_KINDS = ("tool", "search")
LENGTH_SCHEDULES = ("off", "ramp")


class ConfigError(ValueError):
    """Bad config shape, type, or an unknown key; carries the key path."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


@dataclass
class WorldConfig:
    kind: str = "tool"
    n_states: int = 4096
    history: int = 2
    moderate_tasks: int = 40
    extreme_tasks: int = 40
    holdout_tasks: int = 16
    val_tasks: int = 12
    task_seed: int = 1234
    moderate_lengths: tuple[int, ...] = (1, 2)  # tool world gold lengths
    depths: tuple[int, ...] = (1, 2, 3)  # search world tree depths
    corrupt_rate: float = 0.0


@dataclass
class TrainConfig:
    steps: int = 200
    k: int = 8
    groups_per_step: int = 8
    lr: float = 0.1
    loss_mode: str = "token_weighted"
    normalize_std: bool = False
    max_lag: int = 0
    max_turns: int = 0  # 0 = auto: each task's exact solving budget
    n_workers: int = 4
    quantized_rollout: bool = True
    block_size: int = 64
    buffer_capacity: int = 0  # 0 = auto: (max_lag + 1) * groups_per_step
    drop_zero_variance: bool = True
    length_schedule: str = "off"


@dataclass
class CurriculumConfig:
    enabled: bool = True
    classify: bool = True  # probe and stage the pool; False trains on it as given
    n_probe: int = 64
    ks: tuple[int, ...] = (8,)
    easy_threshold: float = 0.9
    min_samples: int = 8
    plateau_window: int = 5
    plateau_epsilon: float = 0.08
    plateau_every: int = 10


@dataclass
class TemperatureConfig:
    enabled: bool = False
    initial: float = 1.0
    candidates: tuple[float, ...] = (1.0,)
    every: int = 200
    n_per_task: int = 4


@dataclass
class DistillConfig:
    rounds: int = 0
    threshold: float = 1.0
    k_per_task: int = 8
    epochs: int = 30
    lr: float = 0.5


@dataclass
class LogConfig:
    metrics: bool = True
    trajectories: bool = False
    difficulty: bool = True
    # Adds a per-step SHA-1 of the trainer parameters to each metrics row,
    # letting two runs be compared as full parameter traces.
    param_hash: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "colocated_sync"
    out_dir: str = "runs/out"
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    temperature: TemperatureConfig = field(default_factory=TemperatureConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    log: LogConfig = field(default_factory=LogConfig)

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", "mode")
        if self.world.kind not in WORLD_KINDS:
            raise ConfigError(
                f"world.kind must be one of {WORLD_KINDS}, got {self.world.kind!r}",
                "world.kind",
            )
        if self.train.loss_mode not in ("token_weighted", "sequence_mean"):
            raise ConfigError(
                f"train.loss_mode must be token_weighted or sequence_mean, "
                f"got {self.train.loss_mode!r}",
                "train.loss_mode",
            )
        if self.train.length_schedule not in LENGTH_SCHEDULES:
            raise ConfigError(
                f"train.length_schedule must be one of {LENGTH_SCHEDULES}",
                "train.length_schedule",
            )
        if self.mode == "colocated_sync" and self.train.max_lag != 0:
            raise ConfigError("colocated_sync requires train.max_lag == 0", "train.max_lag")
        if self.train.max_lag < 0:
            raise ConfigError("train.max_lag must be >= 0", "train.max_lag")
        for name, v in (
            ("train.steps", self.train.steps),
            ("train.k", self.train.k),
            ("train.groups_per_step", self.train.groups_per_step),
            ("world.n_states", self.world.n_states),
            ("world.history", self.world.history),
        ):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1", name)
        if self.temperature.initial not in self.temperature.candidates:
            raise ConfigError(
                "temperature.initial must appear in temperature.candidates",
                "temperature.initial",
            )
        if not (0.0 <= self.world.corrupt_rate <= 1.0):
            raise ConfigError("world.corrupt_rate must be in [0, 1]", "world.corrupt_rate")
        if not self.world.moderate_lengths or any(n < 1 for n in self.world.moderate_lengths):
            raise ConfigError(
                "world.moderate_lengths must be a non-empty list of lengths >= 1",
                "world.moderate_lengths",
            )
        if not self.world.depths or any(d < 1 or d > 3 for d in self.world.depths):
            raise ConfigError(
                "world.depths entries must be within 1..3", "world.depths"
            )
        if self.curriculum.enabled and not self.curriculum.classify:
            raise ConfigError(
                "curriculum.enabled needs curriculum.classify: the switch "
                "has no stage-two pool without probing",
                "curriculum.classify",
            )
        return self


# ── strict recursive binding ─────────────────────────────────────────────


def bind_config(data: Mapping[str, Any] | None, cls=ExperimentConfig, path: str = ""):
    """Bind a mapping onto dataclass ``cls``, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"expected a mapping at {path or 'top level'}", path)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown config key: {where}", where)
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        where = f"{path}.{name}" if path else name
        kwargs[name] = _bind_value(data[name], f, where)
    return cls(**kwargs)


def _bind_value(value: Any, f: dataclasses.Field, where: str) -> Any:
    if dataclasses.is_dataclass(f.type) or dataclasses.is_dataclass(_resolve(f.type)):
        return bind_config(value, _resolve(f.type), where)
    want = _resolve(f.type)
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}", where)
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}", where)
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}", where)
        return float(value)
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}", where)
        return value
    if want in (tuple, list) or str(f.type).startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}", where)
        elem = _tuple_elem_type(f.type)
        out = []
        for i, v in enumerate(value):
            if elem is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{where}[{i}] must be an integer, got {v!r}", where)
            if elem is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"{where}[{i}] must be a number, got {v!r}", where)
            out.append(elem(v) if elem in (int, float) else v)
        return tuple(out)
    raise ConfigError(f"unsupported config field type for {where}: {f.type!r}", where)


_KNOWN_DATACLASSES: dict[str, type] = {}


def _resolve(tp):
    """Field types arrive as strings under `from __future__ import annotations`."""
    if isinstance(tp, type) or tp is None:
        return tp
    name = str(tp)
    if not _KNOWN_DATACLASSES:
        _KNOWN_DATACLASSES.update(
            {
                c.__name__: c
                for c in (
                    WorldConfig,
                    TrainConfig,
                    CurriculumConfig,
                    TemperatureConfig,
                    DistillConfig,
                    LogConfig,
                )
            }
        )
    if name in _KNOWN_DATACLASSES:
        return _KNOWN_DATACLASSES[name]
    base = {"int": int, "float": float, "str": str, "bool": bool}.get(name)
    if base is not None:
        return base
    if name.startswith(("tuple", "list")):
        return tuple
    return None


def _tuple_elem_type(tp) -> type:
    s = str(tp)
    if "float" in s:
        return float
    if "int" in s:
        return int
    return str


# ── file I/O ─────────────────────────────────────────────────────────────


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping at top level")
    return bind_config(data).validate()


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    data = dataclasses.asdict(cfg)
    data = _tuples_to_lists(data)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_tuples_to_lists(v) for v in obj]
    return obj
