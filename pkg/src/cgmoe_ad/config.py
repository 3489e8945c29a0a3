"""Run configuration: defaults <- JSON file <- environment <- command-line overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict
from pathlib import Path

from .model import EncoderConfig, ModelConfig
from .scoring import ScoringConfig
from .training import TrainConfig

ENV_THREADS = "CGMOE_AD_THREADS"


class ConfigKeyError(KeyError):
    pass


def default_config() -> dict:
    model = ModelConfig().to_dict()
    return {
        "model": model,
        "train": {**asdict(TrainConfig()), "betas": [0.9, 0.999]},
        "scoring": asdict(ScoringConfig()),
        "pipeline": {"seed": 0, "train_cap": 500, "normal_test_cap": 100, "defect_cap": 100,
                     "resplit": False},
        "protocol": {"train_domains": None, "eval_domains": None, "shots": None},
        "runtime": {"threads": None, "deterministic": False},
        "data": None,
        "out": None,
    }


def _merge(base: dict, update: dict, path: str = ""):
    for key, val in update.items():
        here = f"{path}{key}"
        if key not in base:
            raise ConfigKeyError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigKeyError(f"config key {here} expects a mapping")
            _merge(base[key], val, here + ".")
        else:
            base[key] = val


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigKeyError(f"unknown config key: {dotted}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigKeyError(f"unknown config key: {dotted}")
    node[keys[-1]] = _coerce(value) if isinstance(value, str) else value


def resolve(config_file=None, overrides: list[tuple[str, str]] = (), env=None) -> dict:
    """Merge every layer; unknown keys anywhere raise ``ConfigKeyError``."""
    cfg = default_config()
    if config_file is not None:
        _merge(cfg, json.loads(Path(config_file).read_text()))
    env = os.environ if env is None else env
    if env.get(ENV_THREADS):
        cfg["runtime"]["threads"] = int(env[ENV_THREADS])
    for key, val in overrides:
        set_dotted(cfg, key, val)
    build_model_config(cfg)
    build_train_config(cfg)
    return cfg


def build_model_config(cfg: dict) -> ModelConfig:
    m = copy.deepcopy(cfg["model"])
    m["encoder"] = EncoderConfig(**m["encoder"])
    return ModelConfig(**m)


def build_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def build_scoring_config(cfg: dict) -> ScoringConfig:
    return ScoringConfig(**cfg["scoring"])


def save(cfg: dict, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
