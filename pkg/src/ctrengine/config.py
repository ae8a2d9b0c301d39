"""Strict JSON run configuration.

A config is one JSON object with the sections below; any section may be
omitted and takes its defaults. Unknown sections or keys are rejected.

``features``
    ``columns`` (list of ``{name, vocab, dim, kind}``, or ``null`` to derive
    columns from ``synthetic``), ``max_position`` (``null``: group size),
    ``embedding_dim`` (8) and ``ui_dim`` (4) for derived columns.
``synthetic``
    :class:`~ctrengine.features.SynthConfig` fields.
``sampling``
    :class:`~ctrengine.sampling.SamplingConfig` fields.
``model``
    :class:`~ctrengine.model.ModelConfig` fields.
``losses``
    :class:`~ctrengine.losses.LossConfig` fields; ramps are ``{start, end}``.
``bias_constraints``
    :class:`~ctrengine.losses.BiasConstraintConfig` fields; an empty
    ``slices`` list disables the term.
``optimizer``
    :class:`~ctrengine.optim.OptimizerConfig` fields.
``trainer``
    :class:`~ctrengine.trainer.TrainerConfig` fields.
``nas``
    :class:`~ctrengine.nas.NasConfig` fields.

Overrides address keys by dotted path (``optimizer.kind=shampoo``); the
value is parsed as JSON and falls back to a plain string.
"""

from __future__ import annotations

import copy
import dataclasses
import json

from .errors import ConfigurationError
from .features import Column, FeatureSpec, SynthConfig
from .losses import BiasConstraintConfig, LossConfig
from .model import ModelConfig
from .nas import NasConfig
from .optim import OptimizerConfig
from .sampling import SamplingConfig
from .trainer import TrainerConfig


def _jsonable(x):
    if isinstance(x, tuple):
        return [_jsonable(v) for v in x]
    if isinstance(x, list):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    return x


def _defaults_of(cls) -> dict:
    return _jsonable(dataclasses.asdict(cls()))


def default_config() -> dict:
    bias = BiasConstraintConfig().to_dict()
    return {
        "features": {"columns": None, "max_position": None, "embedding_dim": 8, "ui_dim": 4},
        "synthetic": _defaults_of(SynthConfig),
        "sampling": _defaults_of(SamplingConfig),
        "model": ModelConfig().to_dict(),
        "losses": _defaults_of(LossConfig),
        "bias_constraints": bias,
        "optimizer": _defaults_of(OptimizerConfig),
        "trainer": _defaults_of(TrainerConfig),
        "nas": _defaults_of(NasConfig),
    }


# keys whose values are free-form structures rather than further config keys
_OPAQUE = {"features.columns", "bias_constraints.slices", "nas.space", "synthetic.position_effect",
           "bias_constraints.bucket_edges"}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        here = f"{path}{k}"
        if k not in base:
            raise ConfigurationError(f"unknown config key '{here}'")
        if isinstance(base[k], dict) and here not in _OPAQUE:
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key '{here}' must be an object")
            out[k] = _merge(base[k], v, here + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigurationError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _set_path(d: dict, dotted: str, value) -> dict:
    parts = dotted.split(".")
    nested = value
    for p in reversed(parts):
        nested = {p: nested}
    return _merge(d, nested)


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"section '{section}': {exc}") from exc


class RunConfig:
    """A resolved configuration; every section is validated on construction."""

    def __init__(self, data: dict | None = None, overrides=()):
        resolved = _merge(default_config(), data or {})
        for item in overrides:
            key, value = item if isinstance(item, tuple) else parse_override(item)
            resolved = _set_path(resolved, key, value)
        self.data = resolved
        # build everything once so errors surface before any work starts
        self.synthetic()
        self.feature_spec()
        self.sampling()
        self.model()
        self.losses()
        self.bias_constraints()
        self.optimizer()
        self.trainer()
        self.nas()

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls(data, overrides)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def synthetic(self) -> SynthConfig:
        return _build(SynthConfig, "synthetic", self.data["synthetic"])

    def feature_spec(self) -> FeatureSpec:
        f = self.data["features"]
        if f["columns"] is None:
            spec = self.synthetic().feature_spec(f["embedding_dim"], f["ui_dim"])
        else:
            try:
                spec = FeatureSpec(tuple(Column(**c) for c in f["columns"]))
            except TypeError as exc:
                raise ConfigurationError(f"features.columns: {exc}") from exc
        if f["max_position"] is not None:
            spec = dataclasses.replace(spec, max_position=int(f["max_position"]))
        return spec

    def sampling(self) -> SamplingConfig:
        return _build(SamplingConfig, "sampling", self.data["sampling"])

    def model(self) -> ModelConfig:
        return _build(ModelConfig, "model", self.data["model"])

    def losses(self) -> LossConfig:
        return _build(LossConfig, "losses", self.data["losses"])

    def bias_constraints(self) -> BiasConstraintConfig | None:
        cfg = _build(BiasConstraintConfig, "bias_constraints", self.data["bias_constraints"])
        return cfg if cfg.slices else None

    def optimizer(self) -> OptimizerConfig:
        return _build(OptimizerConfig, "optimizer", self.data["optimizer"])

    def trainer(self) -> TrainerConfig:
        return _build(TrainerConfig, "trainer", self.data["trainer"])

    def nas(self) -> NasConfig:
        cfg = _build(NasConfig, "nas", self.data["nas"])
        try:
            cfg.search_space()
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"nas.space: malformed ({exc})") from exc
        return cfg

