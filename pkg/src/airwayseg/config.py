"""Run configuration: one nested tree of the module configs.

Files are YAML or JSON. Unknown keys are rejected, values are checked by
the module config constructors, and ``key.path=value`` overrides are
applied on top before validation. The resolved tree is written into every
run directory so the run can be repeated exactly.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import yaml

from .augment import AugmentationSpec
from .backbone import ModelConfig
from .errors import ConfigurationError
from .metrics import DETECTION_FRACTION
from .phantom import PhantomConfig
from .postproc import ReconnectConfig
from .semisup import TeacherStudentConfig
from .training import TrainConfig

RESOLVED_NAME = "config.resolved.yaml"


@dataclass
class DataConfig:
    root: str = "data/phantoms"
    n_cases: int = 25
    n_test: int = 5
    n_labeled: int = 20  # the rest of the non-test cases are unlabeled

    def __post_init__(self):
        if self.n_test < 0 or self.n_labeled < 1 or self.n_test + self.n_labeled > self.n_cases:
            raise ConfigurationError("need n_labeled >= 1 and n_labeled + n_test <= n_cases")


@dataclass
class InferConfig:
    stride: tuple | None = None  # None: half the patch
    fusion: str = "max"
    batch_size: int = 4

    def __post_init__(self):
        if self.fusion not in ("max", "mean"):
            raise ConfigurationError(f"fusion must be 'max' or 'mean', got {self.fusion!r}")
        if self.stride is not None:
            self.stride = tuple(int(s) for s in self.stride)


@dataclass
class MetricConfig:
    detection_fraction: float = DETECTION_FRACTION

    def __post_init__(self):
        if not 0 <= self.detection_fraction < 1:
            raise ConfigurationError("detection_fraction must lie in [0, 1)")


@dataclass
class AblateConfig:
    variants: tuple = ("proposed", "dice", "same_frequency", "coarse_then_fine", "fine_then_coarse")
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    out: str = "runs/default"
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(max_generation=3))
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(channels=(8, 16, 32), patch_shape=(32, 32, 32)))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=800))
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    semi: TeacherStudentConfig = field(default_factory=TeacherStudentConfig)
    postproc: ReconnectConfig = field(default_factory=ReconnectConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        return from_dict(apply_overrides(self.to_dict(), overrides))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _tuples(v):
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    return v


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigurationError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        if f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = f.default
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{sub}: expected a mapping")
            kwargs[name] = _build(type(default), {**_plain(asdict(default)), **value}, sub)
        else:
            kwargs[name] = _tuples(value)
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from exc
    except TypeError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars or lists."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigurationError(f"override {key!r}: unknown key")
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    cfg = from_dict(data)
    return cfg.with_overrides(overrides) if overrides else cfg


def save_config(cfg: RunConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_NAME
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
