"""Experiment configuration.

Config files are flat TOML documents with one dotted key per line::

    seed = 0
    model.arch = "mini5"
    defense.strategy = "calibrated_gaussian"
    defense.pa_target = 0.95

Every key is optional; unknown keys and wrongly typed values are errors.
See ``configs/default.toml`` for the full key list.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # "synthetic" or "idx"
    n: int = 5000
    user_classes: int = 10
    attribute: str = "stripe"
    decodability: float = 1.0
    overlap: bool = False
    val_fraction: float = 0.2
    user_images: str = ""
    user_labels: str = ""
    attacker_images: str = ""
    attacker_labels: str = ""


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 3e-5
    epsilon: float = 0.1
    epochs: int = 6
    batch_size: int = 64
    milestones: list = field(default_factory=lambda: [0.5, 0.75])
    lr_factor: float = 0.1


@dataclass(frozen=True)
class DefenseSection:
    strategy: str = "calibrated_gaussian"
    pa_target: float = 0.95
    bank_size: int = 8
    lam: float = 0.1
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 64
    init_scale: float = 0.1


@dataclass(frozen=True)
class MISection:
    estimator: str = "ksg"
    k: int = 5
    bins: int = 16
    dim: int = 8
    n_samples: int = 2000
    mode: str = "joint"


@dataclass(frozen=True)
class AttackSection:
    head: str = "cloud_clone"
    init: str = "fresh"
    random_mode: str = "uniform"


@dataclass(frozen=True)
class ModelSection:
    arch: str = "mini5"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    cuts: object = "all"  # "all" or a list of cut labels
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    user: TrainSection = field(default_factory=TrainSection)
    baseline: TrainSection = field(default_factory=TrainSection)
    attack_train: TrainSection = field(default_factory=TrainSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    mi: MISection = field(default_factory=MISection)
    attack: AttackSection = field(default_factory=AttackSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything except the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig) if f.name not in ("seed", "out", "cuts")}
_CHOICES = {
    "data.source": ("synthetic", "idx"),
    "data.attribute": ("stripe", "corner_glyph"),
    "defense.strategy": ("calibrated_gaussian", "learned_bank", "none"),
    "mi.estimator": ("ksg", "histogram"),
    "mi.mode": ("joint", "per_dim_sum"),
    "attack.head": ("cloud_clone", "mlp"),
    "attack.init": ("fresh", "cloud"),
    "attack.random_mode": ("uniform", "empirical"),
    "model.arch": ("mini5", "mini-res"),
}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = prefix + k
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply dotted-key overrides to ``base`` (defaults when omitted)."""
    cfg = base or ExperimentConfig()
    flat = _flatten(values)
    top = {}
    sections: dict[str, dict] = {}
    for key, value in flat.items():
        if key in ("seed", "out"):
            top[key] = _coerce(key, value, getattr(ExperimentConfig(), key))
        elif key == "cuts":
            if value != "all" and not (isinstance(value, list) and all(isinstance(c, str) for c in value)):
                raise ConfigError("cuts: expected \"all\" or a list of cut labels")
            top[key] = value
        else:
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(cfg, section)
            if name not in {f.name for f in fields(current)}:
                raise ConfigError(f"unknown config key {key!r}")
            sections.setdefault(section, {})[name] = _coerce(key, value, getattr(current, name))
        if key in _CHOICES and value not in _CHOICES[key]:
            raise ConfigError(f"{key}: {value!r} not in {_CHOICES[key]}")
    for section, changes in sections.items():
        top[section] = replace(getattr(cfg, section), **changes)
    return replace(cfg, **top)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return from_mapping(values)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render as a flat dotted-key document that :func:`load_config` reads back."""
    lines = []
    for key, value in _flatten(cfg.to_dict()).items():
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
