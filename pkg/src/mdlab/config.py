"""Experiment configuration: one JSON document per method run.

A config names the data (a synthetic spec or a dataset CSV), the
architecture, the method, the per-phase training settings and the seeds.
Unknown keys are rejected at every level.  When the synthetic spec omits
``seed``, every run seed generates its own dataset from that seed.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .data import DomainDataset, SyntheticSpec, generate, model_view, read_dataset
from .dtrain import BASELINES, PLUGIN_KINDS, VARIANTS, PhaseConfig
from .errors import ConfigError
from .models import KINDS, ArchSpec
from .optim import KINDS as OPTIMIZER_KINDS
from .optim import OptimizerConfig

_WIDTHS = {"type": "array", "items": {"type": "integer", "minimum": 1}}

_OPTIMIZER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(OPTIMIZER_KINDS)},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "decay": {"type": "number", "minimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
    },
}

_PHASE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["epochs"],
    "properties": {
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {
            "oneOf": [{"type": "integer", "minimum": 1}, {"type": "array", "items": {"type": "integer", "minimum": 1}}]
        },
        "eval_every": {"type": "integer", "minimum": 1},
        "steps_per_epoch": {"type": ["integer", "null"], "minimum": 1},
        "eval_train": {"type": "boolean"},
        "optimizer": _OPTIMIZER,
    },
}

_DATA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "counts"],
    "properties": {
        "kind": {"enum": ["two_moons", "gaussian_domains", "ctr"]},
        "counts": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "seed": {"type": "integer", "minimum": 0},
        "noise": {"type": "number", "minimum": 0},
        "test_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "names": {"type": "array", "items": {"type": "string"}},
        "rotations": {"type": "array", "items": {"type": "number"}},
        "scales": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "translations": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "num_classes": {"type": "integer", "minimum": 2},
        "dim": {"type": "integer", "minimum": 1},
        "class_means": {"type": "array"},
        "class_separation": {"type": "number"},
        "domain_shift": {"type": "number"},
        "n_users": {"type": "integer", "minimum": 1},
        "n_items": {"type": "integer", "minimum": 1},
        "latent_dim": {"type": "integer", "minimum": 1},
        "ranks": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "interaction_scale": {"type": "number"},
        "domain_similarity": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

_ARCH = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "backbone_layers"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "input_dim": {"type": "integer", "minimum": 1},
        "backbone_layers": {**_WIDTHS, "minItems": 1},
        "head_layers": _WIDTHS,
        "num_classes": {"type": "integer", "minimum": 1},
        "num_domains": {"type": "integer", "minimum": 1},
        "expert_count": {"type": "integer", "minimum": 1},
        "shared_experts": {"type": "integer", "minimum": 1},
        "specific_experts": {
            "oneOf": [{"type": "integer", "minimum": 1}, {"type": "array", "items": {"type": "integer", "minimum": 1}}]
        },
        "discriminator_layers": _WIDTHS,
        "lam": {"type": "number", "minimum": 0},
    },
}

METHOD_PATTERN = (
    "^(" + "|".join(BASELINES) + "|dtrain|dtrain_ablation:(" + "|".join(VARIANTS) + ")|plugin:(" + "|".join(PLUGIN_KINDS) + "))$"
)

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mdlab experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["arch", "method", "phases", "seeds"],
    "oneOf": [{"required": ["data"]}, {"required": ["data_path"]}],
    "properties": {
        "name": {"type": "string"},
        "data": _DATA,
        "data_path": {"type": "string"},
        "arch": _ARCH,
        "method": {"type": "string", "pattern": METHOD_PATTERN},
        "phases": {
            "type": "object",
            "additionalProperties": False,
            "properties": {p: _PHASE for p in ("pretrain", "posttrain", "finetune", "plugin", "train")},
        },
        "seeds": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"type": "integer", "minimum": 0}},
        "output": {"type": "string"},
    },
}


def required_phases(method: str) -> tuple[str, ...]:
    if method == "dtrain":
        return ("pretrain", "posttrain", "finetune")
    if method.startswith("dtrain_ablation:"):
        variant = method.split(":", 1)[1]
        return {
            "full": ("pretrain", "posttrain", "finetune"),
            "no_pretrain": ("posttrain", "finetune"),
            "no_posttrain": ("pretrain", "finetune"),
            "no_finetune": ("pretrain", "posttrain"),
        }[variant]
    if method.startswith("plugin:"):
        return ("train", "plugin")
    return ("train",)


def required_kind(method: str) -> str:
    if method == "dtrain" or method.startswith("dtrain_ablation:"):
        return "shared_bottom"
    if method.startswith("plugin:"):
        return method.split(":", 1)[1]
    return method


def method_slug(method: str) -> str:
    """Filesystem-safe directory name for a method."""
    return method.replace(":", "-")


@dataclass
class ExperimentConfig:
    arch: dict
    method: str
    phases: dict[str, dict]
    seeds: list[int]
    data: dict | None = None
    data_path: str | None = None
    name: str = ""
    output: str | None = None
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | Path = ".") -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        raw = copy.deepcopy(dict(raw))
        cfg = cls(
            arch=raw["arch"],
            method=raw["method"],
            phases=raw["phases"],
            seeds=list(raw["seeds"]),
            data=raw.get("data"),
            data_path=raw.get("data_path"),
            name=raw.get("name", ""),
            output=raw.get("output"),
            base_dir=Path(base_dir),
        )
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.name:
            out["name"] = self.name
        if self.data is not None:
            out["data"] = self.data
        if self.data_path is not None:
            out["data_path"] = self.data_path
        out.update(arch=self.arch, method=self.method, phases=self.phases, seeds=self.seeds)
        if self.output is not None:
            out["output"] = self.output
        return out

    def check(self) -> None:
        want = required_kind(self.method)
        if self.arch["kind"] != want:
            raise ConfigError(f"method {self.method!r} needs arch kind {want!r}, got {self.arch['kind']!r}")
        missing = [p for p in required_phases(self.method) if p not in self.phases]
        if missing:
            raise ConfigError(f"method {self.method!r} needs phase settings for {missing}")
        if self.data is not None:
            SyntheticSpec.from_dict({**self.data, "seed": self.data.get("seed", 0)})
        for name in required_phases(self.method):
            self.phase_config(name)

    # -- builders ----------------------------------------------------------
    def data_seed(self, run_seed: int) -> int:
        if self.data is None:
            raise ConfigError("config reads its data from a file")
        return int(self.data.get("seed", run_seed))

    def synthetic_spec(self, run_seed: int) -> SyntheticSpec:
        return SyntheticSpec.from_dict({**self.data, "seed": self.data_seed(run_seed)})

    def dataset_path(self) -> Path:
        p = Path(self.data_path)
        return p if p.is_absolute() else self.base_dir / p

    def raw_dataset(self, run_seed: int) -> DomainDataset:
        if self.data is not None:
            return generate(self.synthetic_spec(run_seed))
        return read_dataset(self.dataset_path())

    def dataset(self, run_seed: int) -> DomainDataset:
        """The dataset in the form the model consumes."""
        return model_view(self.raw_dataset(run_seed))

    def arch_spec(self, data: DomainDataset) -> ArchSpec:
        d = dict(self.arch)
        d.setdefault("input_dim", data.dim)
        d.setdefault("num_domains", data.num_domains)
        spec = ArchSpec.from_dict(d)
        if spec.input_dim != data.dim or spec.num_domains != data.num_domains:
            raise ConfigError(
                f"arch expects {spec.num_domains} domains of width {spec.input_dim}, "
                f"data has {data.num_domains} of width {data.dim}"
            )
        return spec

    def phase_config(self, name: str) -> PhaseConfig:
        raw = dict(self.phases[name])
        opt = OptimizerConfig(**raw.pop("optimizer", {}))
        return PhaseConfig(name, optimizer=opt, **raw)

    def phase_configs(self) -> dict[str, PhaseConfig]:
        return {name: self.phase_config(name) for name in self.phases}


def schema_json() -> str:
    return json.dumps(CONFIG_SCHEMA, indent=2, sort_keys=True) + "\n"
