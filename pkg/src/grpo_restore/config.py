"""Flat run configuration shared by every CLI command.

One JSON object holds the trainer, reward, judge and corpus settings;
input and output paths are command-line flags.  Unknown keys are
rejected so a typo cannot silently fall back to a default.  The
effective config is echoed next to every output.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Optional

from .data import DEFAULT_DEGRADE, DegradeParams
from .grpo import TrainConfig
from .judge import ENDPOINT_ENV
from .rewards import RewardWeights

CONFIG_NAME = "config.json"

_TRAIN_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))
_DEGRADE_FIELDS = tuple(f.name for f in dataclasses.fields(DegradeParams))
_GEN_KEYS = {f"w_{name}": name for name in RewardWeights().gen}


def _defaults() -> dict:
    d = TrainConfig().to_dict()
    w = RewardWeights()
    d.update(
        lambda_gen=w.lambda_gen,
        lambda_qwen=w.lambda_qwen,
        lambda_task=w.lambda_task,
        tau_min=w.tau_min,
        tau_max=w.tau_max,
    )
    d.update({key: w.gen[name] for key, name in _GEN_KEYS.items()})
    d.update(judge_endpoint=None, judge_timeout_ms=10000, judge_retries=2)
    d.update(per_kind=10, size=64, stratified=True)
    d.update({k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(DEFAULT_DEGRADE).items()})
    return d


DEFAULTS = _defaults()

# Desk-scale profile: 32x32 scenes, 8 per kind, 3 mined per kind, 300 steps.
# The learning rate is raised from the full-scale default so that 300 steps
# move the policy measurably.
SMOKE = {
    "size": 32,
    "per_kind": 8,
    "patch": 32,
    "epochs": 20,
    "max_steps": 300,
    "lr": 8e-4,
}

PRESETS = {"default": {}, "smoke": SMOKE}


class ConfigError(ValueError):
    pass


def validate(cfg: dict) -> dict:
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(DEFAULTS)
    out.update(cfg)
    # build every typed view once so bad values fail here, not mid-run
    try:
        train_config(out)
        reward_weights(out)
        degrade_params(out)
        if out["size"] < 32:
            raise ValueError(f"size must be >= 32, got {out['size']}")
        if out["per_kind"] < 1:
            raise ValueError("per_kind must be >= 1")
        if out["judge_timeout_ms"] <= 0 or out["judge_retries"] < 1:
            raise ValueError("judge_timeout_ms must be positive and judge_retries >= 1")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return out


def resolve(preset: str = "default", path=None, overrides: Optional[dict] = None) -> dict:
    """Preset, then config file, then explicit overrides (``None`` values skipped)."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = dict(PRESETS[preset])
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg.update(loaded)
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate(cfg)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in _TRAIN_FIELDS})


def reward_weights(cfg: dict) -> RewardWeights:
    return RewardWeights(
        lambda_gen=cfg["lambda_gen"],
        lambda_qwen=cfg["lambda_qwen"],
        lambda_task=cfg["lambda_task"],
        gen={name: cfg[key] for key, name in _GEN_KEYS.items()},
        tau_min=cfg["tau_min"],
        tau_max=cfg["tau_max"],
    )


def degrade_params(cfg: dict) -> DegradeParams:
    return DegradeParams.from_dict({k: cfg[k] for k in _DEGRADE_FIELDS})


def judge_endpoint(cfg: dict) -> Optional[str]:
    """Environment variable wins over the config key."""
    return os.environ.get(ENDPOINT_ENV) or cfg["judge_endpoint"]


def echo(cfg: dict, out_dir) -> Path:
    path = Path(out_dir) / CONFIG_NAME
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
