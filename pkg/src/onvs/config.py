"""Run configuration: defaults, YAML files, dotted overrides, hashing.

One document covers every stage. Precedence is override flags > config file
> defaults. Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DatasetSection:
    scene: str = "demo"
    layout: str = "dome"
    n_views: int = 40
    width: int = 128
    height: int = 128
    elevation: float = 35.0


@dataclass
class ModelSection:
    grid_h: int = 16
    grid_w: int = 16
    hidden_width: int = 128


@dataclass
class RenderSection:
    n_coarse: int = 64
    n_fine: int = 96


@dataclass
class TrainSection:
    pipeline: str = "one_stage_parallel"
    steps: int = 1500
    stage1_steps: int = 750
    lr: float = 1e-3
    lambda_gan: float = 1e-3
    lambda_per: float = 1e-2
    r1_gamma: float = 10.0
    rays_per_step: int = 256
    sampling: str = "pixelwise"
    patch: int = 16
    train_coarse: int = 32
    train_fine: int = 32
    log_every: int = 50
    divergence_limit: float = 1e3
    early_stop_psnr: float | None = None
    early_stop_every: int = 100
    holdout: str = ""  # comma-separated view indices excluded from training


@dataclass
class CorfSection:
    steps: int = 150
    lr: float = 1e-3
    views: int = 8
    cache_samples: int = 24


@dataclass
class EnhanceSection:
    backend: str = "toy"  # toy | identity
    n_keyframes: int = 40
    steps: int = 25
    final_alpha_bar: float = 1e-2
    refine_iters: int = 3
    guidance_scale: float = 7.5
    train_steps: int = 200  # toy backend pre-training on keyframe renders
    train_lr: float = 1e-3


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    render: RenderSection = field(default_factory=RenderSection)
    train: TrainSection = field(default_factory=TrainSection)
    corf: CorfSection = field(default_factory=CorfSection)
    enhance: EnhanceSection = field(default_factory=EnhanceSection)


def _field_types(obj) -> dict:
    return typing.get_type_hints(type(obj))


def _assign(obj, key: str, value, where: str) -> None:
    hints = _field_types(obj)
    if key not in hints or is_dataclass(getattr(obj, key, None)):
        raise ConfigError(f"unknown key {where}{key}")
    hint = hints[key]
    origin = typing.get_origin(hint)
    optional = origin in (typing.Union, types.UnionType) and type(None) in typing.get_args(hint)
    if optional:
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            setattr(obj, key, None)
            return
    try:
        if hint is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(value)
                value = value.lower() in ("true", "1")
            elif not isinstance(value, bool):
                raise ValueError(value)
        elif hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
                raise ValueError(value)
            value = int(value)
        elif hint is float:
            value = float(value)
        elif hint is str:
            value = str(value)
        else:
            raise ConfigError(f"unsupported field type for {where}{key}")
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {where}{key}: {value!r}")
    setattr(obj, key, value)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid yaml: {e}")
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
        _apply_doc(cfg, doc)
    for item in overrides or []:
        _apply_override(cfg, item)
    return cfg


def _apply_doc(cfg: RunConfig, doc: dict) -> None:
    for name, value in doc.items():
        attr = getattr(cfg, str(name), None)
        if is_dataclass(attr):
            if not isinstance(value, dict):
                raise ConfigError(f"section {name} must be a mapping")
            for k, v in value.items():
                _assign(attr, str(k), v, f"{name}.")
        elif str(name) in ("seed", "out_dir"):
            _assign(cfg, str(name), value, "")
        else:
            raise ConfigError(f"unknown section {name}")


def _apply_override(cfg: RunConfig, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    lhs, value = item.split("=", 1)
    if "." in lhs:
        section, key = lhs.split(".", 1)
        attr = getattr(cfg, section, None)
        if not is_dataclass(attr):
            raise ConfigError(f"unknown section {section}")
        _assign(attr, key, value, f"{section}.")
    else:
        _assign(cfg, lhs, value, "")


def to_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = to_dict(v) if is_dataclass(v) else v
    return out


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
