"""YAML experiment configuration: parsing, schema validation, serialization.

Every section is optional; omitted fields take the dataclass defaults. See
``configs/annotated.yaml`` in the repository for a fully commented example.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema
import yaml

from .adapters import METHODS, AdapterConfig
from .gradients import LOSS_KINDS
from .training import OPTIMIZER_KINDS, TASK_KINDS, OptimizerConfig, TaskSpec


class ConfigError(ValueError):
    """The configuration file is unreadable or fails validation."""


class _Loader(yaml.SafeLoader):
    pass


# PyYAML follows YAML 1.1 and reads "1e-5" as a string; accept it as a float.
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+][0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}

ADAPTER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method", "d_in", "d_out", "chain_dims"],
    "properties": {
        "method": {"enum": list(METHODS)},
        "d_in": _POS_INT,
        "d_out": _POS_INT,
        "chain_dims": {"type": "array", "items": _POS_INT, "minItems": 1},
        "scaling": {"type": "number", "exclusiveMinimum": 0},
        "seed": _INT,
        "identity_chain": {"type": "boolean"},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"type": "string"},
        "adapter": ADAPTER_SCHEMA,
        "adapters": {"type": "array", "items": ADAPTER_SCHEMA, "minItems": 1},
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(TASK_KINDS)},
                "d_in": _POS_INT,
                "d_out": _POS_INT,
                "target_rank": _POS_INT,
                "train_size": _POS_INT,
                "eval_size": _POS_INT,
                "data_seed": _INT,
                "noise_std": {"type": "number", "minimum": 0},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(OPTIMIZER_KINDS)},
                "learning_rate": {"type": "number", "minimum": 0},
                "momentum": _NUM,
                "beta1": _NUM,
                "beta2": _NUM,
                "epsilon": _NUM,
                "epochs": _POS_INT,
                "batch_size": _POS_INT,
            },
        },
        "seeds": {"type": "array", "items": _INT, "minItems": 1},
        "output_dir": {"type": ["string", "null"]},
        "gradcheck": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _POS_INT,
                "losses": {"type": "array", "items": {"enum": list(LOSS_KINDS)}, "minItems": 1},
                "mutate_chain_gradient": {"type": "boolean"},
            },
        },
        "compare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold": {"type": ["number", "null"]},
                "workers": _POS_INT,
            },
        },
    },
}


@dataclass(frozen=True)
class GradcheckOptions:
    tolerance: float = 1e-5
    batch_size: int = 4
    losses: tuple[str, ...] = ("mse", "softmax-cross-entropy")
    # debug: use the transcribed (wrong for n >= 2) chain gradient
    mutate_chain_gradient: bool = False


@dataclass(frozen=True)
class CompareOptions:
    threshold: float | None = None
    workers: int = 1


def _default_adapters() -> tuple[AdapterConfig, ...]:
    return (AdapterConfig("linchain", 16, 16, (4, 4, 4, 4)),)


@dataclass(frozen=True)
class ExperimentConfig:
    adapters: tuple[AdapterConfig, ...] = field(default_factory=_default_adapters)
    task: TaskSpec = field(default_factory=TaskSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seeds: tuple[int, ...] = (0,)
    output_dir: str | None = None
    gradcheck: GradcheckOptions = field(default_factory=GradcheckOptions)
    compare: CompareOptions = field(default_factory=CompareOptions)
    command: str | None = None

    def to_dict(self) -> dict:
        out = {}
        if self.command is not None:
            out["command"] = self.command
        out["adapters"] = [_adapter_dict(a) for a in self.adapters]
        out["task"] = asdict(self.task)
        out["optimizer"] = asdict(self.optimizer)
        out["seeds"] = list(self.seeds)
        out["output_dir"] = self.output_dir
        out["gradcheck"] = {**asdict(self.gradcheck), "losses": list(self.gradcheck.losses)}
        out["compare"] = asdict(self.compare)
        return out

    def digest(self, command: str = "") -> str:
        canonical = json.dumps({"command": command, **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _adapter_dict(a: AdapterConfig) -> dict:
    return {**asdict(a), "chain_dims": list(a.chain_dims)}


def _build(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping")
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    if "adapter" in data and "adapters" in data:
        raise ConfigError("give either 'adapter' or 'adapters', not both")
    try:
        kwargs = {}
        raw_adapters = [data["adapter"]] if "adapter" in data else data.get("adapters")
        if raw_adapters is not None:
            kwargs["adapters"] = tuple(_build(AdapterConfig, a) for a in raw_adapters)
        if "task" in data:
            kwargs["task"] = _build(TaskSpec, data["task"])
        if "optimizer" in data:
            kwargs["optimizer"] = _build(OptimizerConfig, data["optimizer"])
        if "seeds" in data:
            kwargs["seeds"] = tuple(data["seeds"])
        if "output_dir" in data:
            kwargs["output_dir"] = data["output_dir"]
        if "gradcheck" in data:
            gc = dict(data["gradcheck"])
            if "losses" in gc:
                gc["losses"] = tuple(gc["losses"])
            kwargs["gradcheck"] = _build(GradcheckOptions, gc)
        if "compare" in data:
            kwargs["compare"] = _build(CompareOptions, data["compare"])
        if "command" in data:
            kwargs["command"] = data["command"]
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return config_from_dict(data)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text)


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def with_overrides(cfg: ExperimentConfig, *, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    if seed is not None:
        cfg = replace(cfg, seeds=(seed,))
    if output_dir is not None:
        cfg = replace(cfg, output_dir=output_dir)
    return cfg
