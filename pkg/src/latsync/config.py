"""Experiment configuration: JSON documents, dotted overrides and named presets."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import LatencyModel
from .evaluation import EvalConfig
from .perception import ModelConfig
from .syncnet import CompensationConfig
from .training import CurriculumSchedule, LossWeights, TrainConfig
from .world import WorldConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ChannelConfig:
    mean_frames: float = 5.0
    mode: str = "exponential"
    per_link: bool = True
    time_unit: float = 1.0

    def validate(self):
        try:
            self.latency_model()
        except ValueError as exc:
            raise ConfigError(f"channel: {exc}") from None

    def latency_model(self) -> LatencyModel:
        return LatencyModel(self.mean_frames, self.mode, self.per_link, self.time_unit)


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    syncnet: CompensationConfig = field(default_factory=CompensationConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if dataclasses.is_dataclass(section) and hasattr(section, "validate"):
                try:
                    section.validate()
                except ConfigError:
                    raise
                except ValueError as exc:
                    msg = str(exc)
                    raise ConfigError(msg if msg.startswith(f.name) else f"{f.name}: {msg}") from None
        w, m = self.world, self.model
        if m.obs_grid != w.grid:
            raise ConfigError(f"model.obs_grid ({m.obs_grid}) must equal world.grid ({w.grid})")
        if (m.world_lo, m.world_hi) != (w.lo, w.hi):
            raise ConfigError("model.world_lo/world_hi must equal world.lo/world.hi")
        if self.eval.start_frame >= w.duration:
            raise ConfigError(f"eval.start_frame ({self.eval.start_frame}) must be < world.duration ({w.duration})")
        if self.syncnet.k > w.duration:
            raise ConfigError("syncnet.k must not exceed world.duration")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed: must be a nonnegative integer")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Stable hash of the full configuration, used to key cached runs."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- parsing --------------------------------------------------------------------------------
def _check_type(path: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "a number"
    elif isinstance(default, str):
        ok = isinstance(value, str)
        want = "a string"
    elif isinstance(default, list):
        ok = isinstance(value, list)
        want = "a list"
    else:
        ok, want = True, ""
    if not ok:
        raise ConfigError(f"{path}: expected {want}, got {value!r}")
    if isinstance(default, float):
        value = float(value)
        if not np.isfinite(value):
            raise ConfigError(f"{path}: must be finite")
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key{'s' if len(unknown) > 1 else ''}: "
                          + ", ".join(where + u for u in unknown))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        default = getattr(proto, f.name)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), data[f.name], sub)
        else:
            kwargs[f.name] = _check_type(sub, data[f.name], default)
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value`` with a JSON value; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"--set: malformed key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for text in overrides or []:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise ConfigError(f"--set: {'.'.join(keys)} descends into a non-object")
            node = child
        node[keys[-1]] = value
    return data


# -- presets -----------------------------------------------------------------------------------
def _tiny() -> dict:
    return {
        "world": {"n_objects": 4, "duration": 16},
        "model": {"feat_channels": 8, "enc_channels": 8, "dec_channels": 16, "attn_hidden": 8},
        "curriculum": {"frames_per_stage": 1, "max_fixed_latency": 4},
        "train": {"epochs": 2, "pretrain_epochs": 2, "batches_per_epoch": 2, "batch_size": 4,
                  "n_train_scenarios": 4},
        "eval": {"n_test_scenarios": 2, "start_frame": 8, "taus": [0, 1, 2]},
        "output": "runs/tiny",
    }


def _bench_small() -> dict:
    return {
        "model": {"feat_channels": 16},
        "curriculum": {"frames_per_stage": 4, "max_fixed_latency": 10},
        "train": {"epochs": 50, "pretrain_epochs": 100, "batches_per_epoch": 16, "batch_size": 8,
                  "n_train_scenarios": 40, "freeze_base": False},
        "eval": {"n_test_scenarios": 10, "start_frame": 12, "taus": list(range(11))},
        "output": "runs/bench-small",
    }


PRESETS = {"default": dict, "tiny": _tiny, "bench-small": _bench_small}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def load_config(source=None, overrides=None) -> ExperimentConfig:
    """From a JSON path, a preset name, a dict or None (defaults), then ``--set`` overrides."""
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = copy.deepcopy(source)
    elif str(source) in PRESETS:
        data = preset(str(source))
    else:
        path = Path(source)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(apply_overrides(data, overrides))


def scenario_seeds(seed: int, split: str, n: int) -> list[int]:
    """Independent scenario seeds per split, derived from the experiment seed."""
    split_id = {"train": 1, "test": 2, "simulate": 3}[split]
    return [int(np.random.SeedSequence([seed, split_id, i]).generate_state(1)[0]) for i in range(n)]
