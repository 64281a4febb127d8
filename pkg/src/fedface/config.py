"""Experiment configuration: a YAML file with one section per component.

Unknown keys are rejected so that a typo in a hyperparameter name can never
silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DataError, PartitionPlan
from .fed_core import HyperParams
from .fv import FvParams
from .model import BackboneSpec, HeadSpec, ModelError

METHODS = ("centralized", "fedavg", "fedavg_fv", "pfm", "pfm_fv")
WEIGHTING_INITS = ("size", "uniform")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 1
    fv: int = 2
    batching: int = 3


@dataclass(frozen=True)
class HeadTemplate:
    """Head settings shared by all parties; class counts come from the data."""

    loss: str = "softmax_ce"
    scale_s: float = 64.0
    margin_m: float = 0.35

    def spec(self, feature_dim: int, num_classes: int) -> HeadSpec:
        return HeadSpec(feature_dim, num_classes, self.loss, self.scale_s, self.margin_m)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "pfm_fv"
    weighting_init: str = "size"
    threads: int = 1
    checkpoint_every: int = 0
    eval_every: int = 0
    output_dir: str = "runs"
    seeds: Seeds = field(default_factory=Seeds)
    hyper: HyperParams = field(default_factory=HyperParams)
    fv: FvParams = field(default_factory=FvParams)
    data: PartitionPlan = field(default_factory=PartitionPlan)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    head: HeadTemplate = field(default_factory=HeadTemplate)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method={self.method!r} is invalid; legal values: {METHODS}")
        if self.weighting_init not in WEIGHTING_INITS:
            raise ConfigError(f"weighting_init={self.weighting_init!r} is invalid; "
                              f"legal values: {WEIGHTING_INITS}")
        for name in ("threads",):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}={getattr(self, name)} is invalid; legal range: >= 1")
        for name in ("checkpoint_every", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}={getattr(self, name)} is invalid; legal range: >= 0")
        if self.backbone.input_dim != self.data.input_dim:
            raise ConfigError(f"backbone.input_dim={self.backbone.input_dim} must equal "
                              f"data.input_dim={self.data.input_dim}")
        if self.data.seed != self.seeds.data:
            object.__setattr__(self, "data", dataclasses.replace(self.data, seed=self.seeds.data))
        if self.fv.seed != self.seeds.fv:
            object.__setattr__(self, "fv", dataclasses.replace(self.fv, seed=self.seeds.fv))
        try:
            self.head.spec(self.backbone.feature_dim, 1)
        except ModelError as exc:
            raise ConfigError(f"head: {exc}") from exc

    @property
    def fv_enabled(self) -> bool:
        return self.method.endswith("_fv")

    @property
    def local_mode(self) -> str:
        return "pfm" if self.method.startswith("pfm") else "fedavg"

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level fields or ``section__field`` entries replaced."""
        top, nested = {}, {}
        for key, value in changes.items():
            if "__" in key:
                section, name = key.split("__", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, values in nested.items():
            top[section] = dataclasses.replace(top.get(section, getattr(self, section)), **values)
        if "seeds" in top:
            seeds = top["seeds"]
            top.setdefault("data", dataclasses.replace(top.get("data", self.data), seed=seeds.data))
            top.setdefault("fv", dataclasses.replace(top.get("fv", self.fv), seed=seeds.fv))
        return dataclasses.replace(self, **top)

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:12]


# fields owned by another section and therefore not written to their own
_HIDDEN = {"data": {"seed"}, "fv": {"seed"}}
_SECTIONS = {
    "seeds": Seeds, "hyper": HyperParams, "fv": FvParams, "data": PartitionPlan,
    "backbone": BackboneSpec, "head": HeadTemplate,
}
_TOP = [f.name for f in dataclasses.fields(ExperimentConfig) if f.name not in _SECTIONS]


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {name: getattr(cfg, name) for name in _TOP}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        out[section] = {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if f.name not in _HIDDEN.get(section, ())}
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def _coerce(section: str, name: str, value, default):
    where = f"{section}.{name}" if section else name
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _build(section: str, cls, raw, extra=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected a mapping")
    defaults = cls()
    allowed = {f.name for f in dataclasses.fields(cls)} - _HIDDEN.get(section, set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    kwargs = {k: _coerce(section, k, v, getattr(defaults, k)) for k, v in raw.items()}
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, DataError, ModelError) as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(f"{section}.") else f"{section}: {msg}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_TOP) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    defaults = ExperimentConfig.__dataclass_fields__
    kwargs = {}
    for name in _TOP:
        if name in raw:
            kwargs[name] = _coerce("", name, raw[name], defaults[name].default)
    seeds = _build("seeds", Seeds, raw.get("seeds"))
    kwargs["seeds"] = seeds
    kwargs["hyper"] = _build("hyper", HyperParams, raw.get("hyper"))
    kwargs["fv"] = _build("fv", FvParams, raw.get("fv"), {"seed": seeds.fv})
    kwargs["data"] = _build("data", PartitionPlan, raw.get("data"), {"seed": seeds.data})
    kwargs["backbone"] = _build("backbone", BackboneSpec, raw.get("backbone"))
    kwargs["head"] = _build("head", HeadTemplate, raw.get("head"))
    return ExperimentConfig(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    return config_from_dict(raw or {})


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def reference_config() -> str:
    """The default configuration with every field written out."""
    return dump_config(ExperimentConfig())
