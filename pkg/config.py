# -*- coding: utf-8 -*-
"""
Expression spotting engine - run configuration and logging setup

Core Features:
1. RunConfig with every tunable of training, losses and spotting
2. Dataset presets for CAS(ME)^2, SAMM-LV and CAS(ME)^3 style corpora
3. Layered sources: environment (MCWES_*) > JSON file > preset > defaults
4. Logging setup shared by the command line and scripts
"""

import copy
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Union

import structlog
from pydantic import Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError
from losses import DurationMaskSpec, LossWeights, PoolingSpec
from pipeline import ModelSpec
from spotting import SpotConfig

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

PRESETS: Dict[str, Dict[str, Any]] = {
    "casme2": {
        "g": 8,
        "fps": 30.0,
        "t_train": 250,
        "learning_rate": 0.0005,
        "pooling": {"h": [7, 9, 5]},
        "duration_mask": {"omega_l": 1.2, "omega_u": 1.4},
        "loss_weights": {"lambda1": 0.5, "lambda2": 0.5, "lambda3": 0.8, "lambda4": 0.8},
        "spot": {"varsigma": 0.15, "psi": 0.25},
    },
    "samm_lv": {
        "g": 32,
        "fps": 200.0,
        "t_train": 380,
        "learning_rate": 0.0008,
        "pooling": {"h": [7, 9, 5]},
        "duration_mask": {"omega_l": 1.5, "omega_u": 1.8},
        "loss_weights": {"lambda1": 0.5, "lambda2": 0.5, "lambda3": 0.7, "lambda4": 0.7},
        "spot": {"varsigma": 0.5, "psi": 0.25},
    },
}
PRESETS["casme3"] = {**copy.deepcopy(PRESETS["casme2"]), "t_train": 300}


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="MCWES_",
        env_nested_delimiter="__",
        env_file=".env",
        # a shared .env may hold other tools' keys; file and keyword keys are checked in load_config
        extra="ignore",
    )

    seed: int = 0
    learning_rate: float = Field(default=0.0005, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    iterations: int = Field(default=1000, ge=0)
    batch_size: int = Field(default=10, ge=1)
    pair_count: int = Field(default=6, ge=0)
    t_train: int = Field(default=250, ge=1)
    g: int = Field(default=8, ge=1)
    fps: float = Field(default=30.0, gt=0)
    log_every: int = Field(default=50, ge=1)
    fold_workers: int = Field(default=1, ge=1)

    pooling: PoolingSpec = Field(default_factory=PoolingSpec)
    duration_mask: DurationMaskSpec = Field(default_factory=DurationMaskSpec)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    spot: SpotConfig = Field(default_factory=SpotConfig)
    model: ModelSpec = Field(default_factory=ModelSpec)

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings,
                                   file_secret_settings):
        # environment wins over file and preset values passed at construction
        return env_settings, dotenv_settings, init_settings, file_secret_settings

    @model_validator(mode="after")
    def _check_batch(self) -> "RunConfig":
        if self.batch_size < self.pair_count:
            raise ValueError(f"batch_size ({self.batch_size}) must be >= pair_count ({self.pair_count})")
        if self.t_train <= self.duration_mask.eta:
            raise ValueError(f"t_train ({self.t_train}) must exceed duration_mask.eta ({self.duration_mask.eta})")
        return self

    @property
    def pairs_per_batch(self) -> int:
        return self.pair_count // 2


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return raw


def load_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                **overrides) -> RunConfig:
    """Defaults, then preset, then file, then keyword overrides; MCWES_* variables still win"""
    values: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}', choose from {sorted(PRESETS)}")
        values = copy.deepcopy(PRESETS[preset])
    if path is not None:
        values = _deep_merge(values, read_config_file(path))
    values = _deep_merge(values, overrides)
    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def setup_logging(level: str = "INFO", log_file: Optional[Union[str, Path]] = None):
    numeric_level = logging.getLevelName(level.upper())
    if not isinstance(numeric_level, int):
        raise ConfigError(f"unknown log level '{level}'")

    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_path, encoding="utf-8"))

    logging.basicConfig(level=numeric_level, format=LOG_FORMAT, handlers=handlers, force=True)

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_log_level,
            structlog.processors.format_exc_info,
            structlog.processors.KeyValueRenderer(key_order=["event"], sort_keys=True),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )
