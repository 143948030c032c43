"""Experiment configuration: a TOML file of flat dotted keys plus overrides.

Recognized keys (all optional)::

    seed = 0                       # single seed (train, sample-tasks)
    seeds = [0, 1, 2, 3, 4]        # deploy / bench seeds
    out = "runs/demo"
    train.<field> = ...            # any TrainConfig field, e.g. train.objective = "I"
    deploy.T = 20                  # DeployConfig fields except mode and seed
    deploy.methods = ["gp_al", "random"]
    deploy.problems = ["sin"]
    deploy.checkpoint = "runs/demo/policy.npz"
    pool.dimension = 2             # CSV pool options
    pool.has_safety = true
    pool.n_test = 200
    pool.threshold = 0.0
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import DeployConfig
from .trainer import TrainConfig

TOP_LEVEL = {"seed", "seeds", "out"}
DEPLOY_EXTRA = {"methods", "problems", "checkpoint"}
POOL_KEYS = {"dimension", "has_safety", "n_test", "threshold", "name"}


class ConfigError(ValueError):
    pass


def _flatten(table: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _allowed_keys() -> set:
    train = {f"train.{f.name}" for f in dataclasses.fields(TrainConfig)}
    deploy = {f"deploy.{f.name}" for f in dataclasses.fields(DeployConfig)} - {"deploy.mode", "deploy.seed"}
    deploy |= {f"deploy.{k}" for k in DEPLOY_EXTRA}
    pool = {f"pool.{k}" for k in POOL_KEYS}
    return TOP_LEVEL | train | deploy | pool


def parse_value(text: str) -> Any:
    """A TOML literal (number, bool, array, quoted string) or a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Read ``path`` (if any), apply ``overrides`` and validate the key set."""
    flat: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                flat = _flatten(tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    flat.update(overrides or {})
    unknown = sorted(set(flat) - _allowed_keys())
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return flat


def section(flat: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def train_config(flat: dict, seed: Optional[int] = None) -> TrainConfig:
    values = section(flat, "train")
    if seed is not None:
        values["seed"] = seed
    elif "seed" in flat and "seed" not in values:
        values["seed"] = flat["seed"]
    try:
        return TrainConfig.from_dict(values).resolved()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from exc


def deploy_config(flat: dict, mode: str, seed: int) -> DeployConfig:
    values = {k: v for k, v in section(flat, "deploy").items() if k not in DEPLOY_EXTRA}
    try:
        return DeployConfig(mode=mode, seed=seed, **values).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid deployment configuration: {exc}") from exc


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def config_hash(payload: dict) -> str:
    """Stable short hash of a JSON-serializable resolved configuration."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def resolve_path(value) -> Optional[Path]:
    return None if value is None else Path(value)
