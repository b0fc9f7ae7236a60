"""Run configuration: nested dataclasses loaded from YAML, with dotted-key
overrides. Unknown keys are rejected."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigError


@dataclass
class DatasetConfig:
    name: str = "synthetic_gaussian"
    root: str | None = None
    num_classes: int = 2
    input_dim: int = 16
    train_size: int = 2000
    val_size: int = 500
    separation: float = 3.0
    noise: float = 1.0
    # long-tailed synthetic sets: class sizes decay geometrically to this ratio
    imbalance_ratio: float = 1.0
    augment: str = "none"  # none | crop_flip
    image_size: int = 32
    subset_train: int | None = None
    subset_val: int | None = None
    seed: int = 1234


@dataclass
class TeacherConfig:
    arch: str = "linear"
    feature_dim: int = 256
    hidden_dim: int = 256
    checkpoint: str | None = None
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 128


@dataclass
class StudentConfig:
    arch: str = "linear"
    feature_dim: int = 8
    hidden_dim: int = 64


@dataclass
class OptimConfig:
    kind: str = "adamw"  # adamw | sgd
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    schedule: str = "cosine"  # cosine | step | constant
    epochs: int = 10
    warmup_epochs: float = 5.0
    milestones: list = field(default_factory=lambda: [150, 180, 210])
    milestone_unit: str = "epoch"  # epoch | fraction (of the total step budget)
    gamma: float = 0.1
    batch_size: int = 64
    max_steps: int | None = None
    grad_clip: float | None = None


@dataclass
class GenDDConfig:
    d_tok: int | None = 64  # None -> one token holding the whole feature
    lam: float = 0.9
    supervised: bool = True
    center_source: str = "classifier_weights"
    standardize: bool = True
    schedule: str = "cosine"
    M: int = 1000
    sampling_steps: int = 64
    guidance_scale: float = 2.0
    variance: str = "posterior"
    cfg_drop: float = 0.1
    head_width: int = 256
    head_depth: int = 3
    head_arch: str = "residual"
    mixup: bool = False
    mixup_alpha: float = 0.2


@dataclass
class KLConfig:
    T: float = 1.0
    w_kl: float = 0.5
    w_ce: float = 0.5
    supervised: bool = True


@dataclass
class EvalConfig:
    every_epochs: int = 0  # 0 -> evaluate once after training
    batch_size: int = 256
    max_samples: int | None = None


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    out_dir: str = "runs/run"
    deterministic: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    gendd: GenDDConfig = field(default_factory=GenDDConfig)
    kl: KLConfig = field(default_factory=KLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        g = self.gendd
        if not 0 <= g.lam <= 1:
            raise ConfigError(f"gendd.lam must be in [0, 1], got {g.lam}")
        if not g.supervised and g.lam != 1:
            raise ConfigError("unsupervised GenDD requires gendd.lam == 1")
        if g.d_tok is not None and g.d_tok < 1:
            raise ConfigError("gendd.d_tok must be positive")
        if self.optim.kind not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optim.kind!r}")
        if self.optim.schedule not in ("cosine", "step", "constant"):
            raise ConfigError(f"unknown lr schedule {self.optim.schedule!r}")
        if self.optim.milestone_unit not in ("epoch", "fraction"):
            raise ConfigError(f"unknown milestone unit {self.optim.milestone_unit!r}")
        if g.center_source not in ("classifier_weights", "empirical_means"):
            raise ConfigError(f"unknown center source {g.center_source!r}")
        return self


def _coerce(value, annotation: str, key: str):
    """Check a scalar against its field annotation; numeric strings such as
    ``1e-3`` (which YAML leaves as str) are converted."""
    kinds = {a.strip() for a in str(annotation).split("|")}
    if value is None:
        if "None" in kinds:
            return None
        raise ConfigError(f"config key {key!r} may not be null")
    if "bool" in kinds:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
    if "float" in kinds and not isinstance(value, bool):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}") from None
    if "int" in kinds:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
    if "str" in kinds and not isinstance(value, str):
        raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
    if "list" in kinds and not isinstance(value, list):
        raise ConfigError(f"config key {key!r} expects a list, got {value!r}")
    return value


def _from_dict(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        ftype = fields[key].default_factory if fields[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(ftype):
            kwargs[key] = _from_dict(ftype, value or {}, f"{path}{key}.")
        else:
            kwargs[key] = _coerce(value, fields[key].type, path + key)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data).validate()


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"malformed override key in {text!r}")
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value in {text!r}: {exc}") from exc
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for text in overrides or ():
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a scalar")
        node[keys[-1]] = value
    return data


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("gendd.presets").iterdir() if p.name.endswith(".yaml"))


def load_config_dict(source: str | Path | None) -> dict:
    """Read a YAML file, or a bundled preset by name (``smoke``, ``mismatch``...)."""
    if source is None:
        return {}
    path = Path(source)
    if path.exists():
        text = path.read_text()
    else:
        name = str(source)
        name = name[:-5] if name.endswith(".yaml") else name
        res = resources.files("gendd.presets") / f"{name}.yaml"
        if not res.is_file():
            raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(preset_names())})")
        text = res.read_text()
    return yaml.safe_load(text) or {}


def load_config(source=None, overrides=None) -> RunConfig:
    return config_from_dict(apply_overrides(load_config_dict(source), overrides))


def save_config(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
