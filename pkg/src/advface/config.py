"""Experiment configuration: one YAML file per experiment, CLI overrides on top.

Victims are grouped into named model sets (``RN-SF-2`` etc.); attacks and
evaluations refer to members as ``SET`` (all members) or ``SET#k`` (member k).
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .atn import AtnArchConfig
from .attacks import AttackConfig, PgdConfig
from .facerec import EnsembleSpec, VictimModelSpec, VictimTrainConfig

METHODS = ("atn", "uap", "fgsm", "pgd")


class ConfigError(ValueError):
    pass


def _build(cls, data: dict | None, path: str, **fixed):
    """Instantiate dataclass ``cls`` from ``data`` with field-level error messages."""
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {', '.join(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            data[f.name] = tuple(data[f.name])
    try:
        return cls(**data, **fixed)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from err


@dataclass(frozen=True)
class DatasetSection:
    root: str = "data/corpus"
    image_size: tuple[int, int, int] = (64, 64, 3)
    eval_fraction: float = 0.5
    split_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if len(self.image_size) != 3:
            raise ValueError("image_size must be [height, width, channels]")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must be in (0, 1)")


@dataclass(frozen=True)
class ModelSetSection:
    family: str = "resnet_style"
    loss: str = "sphereface"
    depth_blocks: int = 4
    embed_dim: int = 128
    width: int = 16
    seeds: tuple[int, ...] = (0,)
    name: str = ""

    def ensemble(self, input_size) -> EnsembleSpec:
        spec = VictimModelSpec(self.family, self.depth_blocks, self.loss, self.embed_dim, 0,
                               tuple(input_size), self.width)
        return EnsembleSpec.seeds_of(spec, self.seeds, self.name)


@dataclass(frozen=True)
class PerceptualSection:
    lam: float = 0.25
    extractor_checkpoint: str | None = None  # None -> first victim of the first model set


@dataclass(frozen=True)
class AttackSection:
    method: str = "atn"
    train_on: tuple[str, ...] = ()  # member refs; empty -> first model set
    eps: float = 0.03
    lr: float = 3e-3
    batch_size: int = 32
    iterations: int = 900
    seed: int = 0
    arch: AtnArchConfig = field(default_factory=AtnArchConfig.desk)
    pgd: PgdConfig = field(default_factory=PgdConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass(frozen=True)
class EvalSection:
    max_pairs: int | None = 2000
    pair_seed: int = 0
    gallery_size: int = 10
    n_trials: int = 200
    trial_seed: int = 0
    targets: tuple[str, ...] = ()  # member refs; empty -> every model set
    providers: tuple[dict, ...] = ()
    batch_size: int = 128


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    victims: tuple[ModelSetSection, ...] = (ModelSetSection(),)
    victim_train: VictimTrainConfig = field(default_factory=lambda: VictimTrainConfig(steps=250))
    attack: AttackSection = field(default_factory=AttackSection)
    perceptual: PerceptualSection = field(default_factory=PerceptualSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.victims:
            raise ConfigError("victims: at least one model set is required")
        names = [s.name for s in self.model_sets()]
        if len(set(names)) != len(names):
            raise ConfigError(f"victims: duplicate model set names {names}")
        for ref in (*self.attack.train_on, *self.eval.targets):
            self.resolve(ref)

    # -- model sets -------------------------------------------------------

    def model_sets(self) -> list[EnsembleSpec]:
        return [s.ensemble(self.dataset.image_size) for s in self.victims]

    def model_set(self, name: str) -> EnsembleSpec:
        for ens in self.model_sets():
            if ens.name == name:
                return ens
        raise ConfigError(f"unknown model set {name!r}; known: {[e.name for e in self.model_sets()]}")

    def resolve(self, ref: str) -> list[tuple[str, int]]:
        """``"SET"`` -> every member, ``"SET#k"`` -> member k; returns (set name, index) pairs."""
        name, _, idx = ref.partition("#")
        ens = self.model_set(name)
        if not idx:
            return [(name, k) for k in range(len(ens.members))]
        try:
            k = int(idx)
        except ValueError:
            raise ConfigError(f"bad member reference {ref!r}") from None
        if not 0 <= k < len(ens.members):
            raise ConfigError(f"{ref!r}: {name} has {len(ens.members)} members")
        return [(name, k)]

    def attack_members(self) -> list[tuple[str, int]]:
        refs = self.attack.train_on or (self.model_sets()[0].name,)
        return [m for r in refs for m in self.resolve(r)]

    def target_sets(self) -> list[tuple[str, list[tuple[str, int]]]]:
        if not self.eval.targets:
            return [(e.name, self.resolve(e.name)) for e in self.model_sets()]
        return [(r, self.resolve(r)) for r in self.eval.targets]

    def attack_config(self) -> AttackConfig:
        a = self.attack
        try:
            return AttackConfig(a.eps, self.perceptual.lam, a.lr, a.batch_size, a.iterations, a.seed)
        except ValueError as err:
            raise ConfigError(f"attack: {err}") from err

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        data = _plain(asdict(self))
        data["perceptual"]["lambda"] = data["perceptual"].pop("lam")
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")
        kw: dict[str, Any] = {}
        if "dataset" in data:
            kw["dataset"] = _build(DatasetSection, data["dataset"], "dataset")
        if "victims" in data:
            if not isinstance(data["victims"], list):
                raise ConfigError("victims: expected a list of model sets")
            kw["victims"] = tuple(_build(ModelSetSection, v, f"victims[{i}]") for i, v in enumerate(data["victims"]))
        if "victim_train" in data:
            kw["victim_train"] = _build(VictimTrainConfig, data["victim_train"], "victim_train")
        if "attack" in data:
            a = dict(data["attack"] or {})
            if "arch" in a:
                a["arch"] = _build(AtnArchConfig, a["arch"], "attack.arch")
            if "pgd" in a:
                a["pgd"] = _build(PgdConfig, a["pgd"], "attack.pgd")
            kw["attack"] = _build(AttackSection, a, "attack")
        if "perceptual" in data:
            p = dict(data["perceptual"] or {})
            if "lambda" in p:  # the file key; ``lambda`` is reserved in Python
                if "lam" in p:
                    raise ConfigError("perceptual: give either lambda or lam, not both")
                p["lam"] = p.pop("lambda")
            kw["perceptual"] = _build(PerceptualSection, p, "perceptual")
        if "eval" in data:
            kw["eval"] = _build(EvalSection, data["eval"], "eval")
        if "output_dir" in data:
            kw["output_dir"] = str(data["output_dir"])
        cfg = cls(**kw)
        cfg.attack_config()  # validate the derived attack config eagerly
        return cfg

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides (values parsed as YAML) to a raw config dict."""
    data = copy.deepcopy(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p.isdigit() and isinstance(node, list):
                node = node[int(p)]
                continue
            node = node.setdefault(p, {})
            if not isinstance(node, (dict, list)):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        last = parts[-1]
        value = yaml.safe_load(raw)
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return data


def load_config(path: str | None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict = {}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(apply_overrides(data, overrides or []))
