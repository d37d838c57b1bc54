"""YAML experiment configuration with two built-in profiles.

``paper`` carries the full toy-experiment hyperparameters; ``ci`` shortens
training so the whole pipeline fits a test run.  A user file is merged on top
of the chosen profile, so it only needs the keys it changes.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .losses import LossWeights, NoiseSchedule, TrainConfig
from .samplers import GuidanceConfig, Method


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    samples_per_class: int = 1000
    noise_std: float = 0.05
    scale_factor: float = 20.0
    center: bool = True
    seed: int = 0
    heldout_seed: int = 1
    csv: str | None = None


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple[int, ...] = (128, 64, 32)


@dataclass(frozen=True)
class TrainSection:
    score: TrainConfig = TrainConfig(learning_rate=6.5e-4)
    classifier: TrainConfig = TrainConfig(learning_rate=2.0e-5)


@dataclass(frozen=True)
class SamplerSection:
    corrector_snr: float = 0.16
    corrector_steps: int = 1
    n_samples: int = 1000
    step_norm: str = "batch"


@dataclass(frozen=True)
class MetricsSection:
    bounds: tuple[tuple[float, float], ...] = ((-25.0, 25.0), (-40.0, 40.0))
    count: int = 1225
    grid_mode: str = "lattice"
    grid_seed: int = 0
    k: int = 3
    sigma_eval: float = 5.0
    real_per_class: int = 1000


@dataclass(frozen=True)
class AblationSection:
    eval_every: int = 1000
    eval_set_size: int = 2000
    eval_seed: int = 12345


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "paper"
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dataset: DatasetSection = DatasetSection()
    schedule: NoiseSchedule = NoiseSchedule()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    loss_weights: LossWeights = LossWeights()
    guidance: GuidanceConfig = GuidanceConfig()
    sampler: SamplerSection = SamplerSection()
    metrics: MetricsSection = MetricsSection()
    ablation: AblationSection = AblationSection()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self, *sections: str) -> str:
        """sha256 of the named sections (all when none given)."""
        doc = self.to_dict()
        if sections:
            doc = {k: doc[k] for k in sections}
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, seed=int(seed))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Method):
        return obj.value
    return obj


PROFILES: dict[str, dict] = {
    "paper": {},
    "ci": {
        "train": {
            "score": {"iterations": 10000, "batch_size": 256},
            "classifier": {"iterations": 10000, "batch_size": 256},
        },
        "ablation": {"eval_every": 500},
        "sampler": {"n_samples": 500},
        "metrics": {"real_per_class": 500},
    },
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _coerce(tp, value, where: str, base=None):
    """Convert a YAML value to the annotated field type."""
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where, base)
    origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if tp is int and float(value) != int(value):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return tp(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        item = typing.get_args(tp)[0]
        return tuple(_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value))
    return value


def _resolve(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init}


def _build(cls, data, where: str, base=None):
    """Instantiate ``cls`` from a mapping; nested sections start from ``base``."""
    base = cls() if base is None else base
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    types = _resolve(cls)
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, tp in types.items():
        if name not in data:
            continue
        val = data[name]
        sub = f"{where}.{name}" if where else name
        if type(None) in typing.get_args(tp):
            inner = [a for a in typing.get_args(tp) if a is not type(None)]
            kwargs[name] = None if val is None else _coerce(inner[0], val, sub)
        elif cls is GuidanceConfig and name == "method":
            try:
                kwargs[name] = Method(str(val).lower())
            except ValueError:
                choices = ", ".join(m.value for m in Method)
                raise ConfigError(f"{sub}: unknown method {val!r} (choose from {choices})") from None
        else:
            kwargs[name] = _coerce(tp, val, sub, getattr(base, name))
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(doc: dict, profile: str | None = None) -> ExperimentConfig:
    doc = dict(doc or {})
    name = profile or doc.get("profile") or "paper"
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r} (choose from {', '.join(PROFILES)})")
    merged = _merge(PROFILES[name], doc)
    merged["profile"] = name
    cfg = _build(ExperimentConfig, merged, "")
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    m = cfg.metrics
    if len(m.bounds) != 2 or any(len(b) != 2 or not b[0] < b[1] for b in m.bounds):
        raise ConfigError("metrics.bounds: need two [lo, hi] pairs with lo < hi")
    if m.grid_mode not in ("lattice", "random"):
        raise ConfigError("metrics.grid_mode: choose lattice or random")
    if m.k < 1:
        raise ConfigError("metrics.k must be >= 1")
    if not m.sigma_eval > 0:
        raise ConfigError("metrics.sigma_eval must be positive")
    if cfg.sampler.n_samples <= m.k or m.real_per_class <= m.k:
        raise ConfigError("sample counts must exceed metrics.k")
    if cfg.sampler.step_norm not in ("batch", "sample"):
        raise ConfigError("sampler.step_norm: choose batch or sample")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if cfg.ablation.eval_every < 1:
        raise ConfigError("ablation.eval_every must be >= 1")


def load_config(path=None, profile: str | None = None) -> ExperimentConfig:
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc, profile)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
