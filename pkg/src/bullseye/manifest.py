"""Experiment manifests: YAML files validated against a versioned schema."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from bullseye.attacks import AttackKind, LayerMode
from bullseye.errors import ManifestError
from bullseye.victim import FineTuneMode
from bullseye.zoo import ARCHITECTURES

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MultiViewSpec(_Strict):
    views: int = Field(4, ge=1, description="N_im training views per target object")
    held_out_views: int = Field(4, ge=1)


class DatasetSpec(_Strict):
    image_size: int = Field(16, ge=8)
    pretrain_classes: int = Field(8, ge=2, le=8)
    pretrain_per_class: int = Field(800, ge=1)
    task_classes: int = Field(3, ge=2, le=8)
    fine_tune_per_class: int = Field(50, ge=1)
    test_per_class: int = Field(100, ge=1)
    target_class: int = Field(0, ge=0)
    poison_class: int = Field(1, ge=0)
    n_targets: int = Field(20, ge=1)
    seed: int = 1
    multiview: Optional[MultiViewSpec] = None

    @model_validator(mode="after")
    def _classes(self):
        if self.task_classes > self.pretrain_classes:
            raise ValueError("task_classes cannot exceed pretrain_classes")
        for name in ("target_class", "poison_class"):
            if getattr(self, name) >= self.task_classes:
                raise ValueError(f"{name} must be < task_classes")
        if self.target_class == self.poison_class:
            raise ValueError("target_class and poison_class must differ")
        return self


class NetworkSpec(_Strict):
    arch: Literal[tuple(ARCHITECTURES)]
    seed: int = 0
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    feature_dim: int = Field(256, ge=8)

    @property
    def key(self):
        return f"{self.arch}-s{self.seed}-d{self.dropout:g}-f{self.feature_dim}"


class PretrainSpec(_Strict):
    epochs: int = Field(20, ge=1)
    learning_rate: float = Field(2e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)


class AttackSpec(_Strict):
    kinds: list[AttackKind] = Field(default_factory=lambda: [AttackKind.BP])
    epsilon: float = Field(0.1, gt=0)
    k: int = Field(5, ge=1)
    iterations: int = Field(1000, ge=0)
    multidraw_R: int = Field(1, ge=1)
    stochastic: bool = True
    layer_mode: LayerMode = LayerMode.SINGLE
    step_size: float = Field(0.01, gt=0)
    optimizer: Literal["gd", "adam"] = "adam"
    step_decay: float = Field(0.5, gt=0, le=1)
    step_decay_every: int = Field(1000, ge=1)
    fixed_coefficients: Optional[list[float]] = None

    @model_validator(mode="after")
    def _fixed(self):
        if AttackKind.BP_FIXED in self.kinds:
            if self.fixed_coefficients is None or len(self.fixed_coefficients) != self.k:
                raise ValueError("BP_FIXED needs fixed_coefficients of length k")
        return self


class FineTuneConfig(_Strict):
    mode: FineTuneMode = FineTuneMode.LINEAR
    epochs: int = Field(60, ge=0)
    learning_rate: Optional[float] = Field(None, gt=0)
    batch_size: int = Field(32, ge=1)


class DefenseSweep(_Strict):
    k_nn: list[int] = Field(default_factory=list)
    mu: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _ranges(self):
        if any(k < 1 for k in self.k_nn):
            raise ValueError("k_nn values must be >= 1")
        if any(not 0.0 <= m <= 1.0 for m in self.mu):
            raise ValueError("mu values must lie in [0, 1]")
        return self


class Seeds(_Strict):
    crafting: int = 0
    fine_tune: int = 0


class Manifest(_Strict):
    schema_version: Literal[1]
    experiment_id: str
    scenario: Literal["white-box", "gray-box", "black-box"] = "gray-box"
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    substitutes: list[NetworkSpec]
    victims: list[NetworkSpec]
    pretrain: PretrainSpec = Field(default_factory=PretrainSpec)
    attack: AttackSpec = Field(default_factory=AttackSpec)
    fine_tune: FineTuneConfig = Field(default_factory=FineTuneConfig)
    defense: DefenseSweep = Field(default_factory=DefenseSweep)
    seeds: Seeds = Field(default_factory=Seeds)
    output_dir: str = "runs/experiment"
    workers: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _scenario(self):
        if not self.substitutes:
            raise ValueError("substitutes must not be empty")
        if not self.victims:
            raise ValueError("victims must not be empty")
        sub_keys = {s.key for s in self.substitutes}
        sub_archs = {s.arch for s in self.substitutes}
        for v in self.victims:
            if self.scenario == "black-box" and v.arch in sub_archs:
                raise ValueError(f"black-box scenario: victim architecture {v.arch} is also a substitute")
            if self.scenario == "gray-box" and v.key in sub_keys:
                raise ValueError(f"gray-box scenario: victim {v.key} is one of the substitutes")
        return self

    def victim_scenario(self, victim: NetworkSpec) -> str:
        if victim.key in {s.key for s in self.substitutes}:
            return "white-box"
        if victim.arch in {s.arch for s in self.substitutes}:
            return "gray-box"
        return "black-box"

    def hash(self) -> str:
        """Digest of every field that can change a numeric result."""
        payload = self.model_dump(mode="json", exclude={"output_dir", "workers"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def parse_manifest(data: dict) -> Manifest:
    if not isinstance(data, dict):
        raise ManifestError(["<root>: manifest must be a mapping"])
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError([f"schema_version: unsupported value {version!r} (this tool reads {SCHEMA_VERSION})"])
    try:
        return Manifest.model_validate(data)
    except ValidationError as exc:
        raise ManifestError(_format_errors(exc)) from None


def load_manifest(path, overrides: dict | None = None) -> Manifest:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if overrides:
        data = apply_overrides(data, overrides)
    return parse_manifest(data)


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Set dotted keys, e.g. ``{"attack.iterations": 0}``."""
    data = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return data


def dump_manifest(manifest: Manifest, path):
    Path(path).write_text(yaml.safe_dump(manifest.model_dump(mode="json"), sort_keys=False))
