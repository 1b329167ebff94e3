"""Run configuration - voluptuous schemas, JSON file overlay, CLI overrides.

Precedence: command-line flags > --config file > defaults from const.py.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import voluptuous as vol

from .artifacts import read_json
from .const import (
    CHECKPOINT_EVERY,
    DEFAULT_ALPHA,
    DEFAULT_BATCH_SIZE,
    DEFAULT_D_MODEL,
    DEFAULT_DROPOUT,
    DEFAULT_EPISODE_LENGTH,
    DEFAULT_EPISODES_PER_TASK,
    DEFAULT_EPOCHS,
    DEFAULT_FLOW_STEPS,
    DEFAULT_GRAD_CLIP,
    DEFAULT_GRU_LAYERS,
    DEFAULT_HEADS,
    DEFAULT_HYSTERESIS,
    DEFAULT_JOINTS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MASK_SIZE,
    DEFAULT_MLP_HIDDEN,
    DEFAULT_NEXT_STAGE_EPOCH,
    DEFAULT_NUM_TASKS,
    DEFAULT_PERSIST_K,
    DEFAULT_POINTS,
    DEFAULT_RADIUS,
    DEFAULT_SAMPLER_BINS,
    DEFAULT_STRIDE,
    DEFAULT_VALIDATION_SPLIT,
    DEFAULT_WINDOW,
    LATENCY_BUDGET_MS,
)
from .exceptions import ConfigError
from .flow import FlowConfig
from .monitor import EscalationPolicy
from .trainer import TrainConfig

_LOGGER = logging.getLogger(__name__)

SECTIONS = ("paths", "dims", "model", "training", "monitor")

ABLATIONS = ("task_embedding", "robot_state", "shape_branch", "position_branch")

_positive_int = vol.All(vol.Coerce(int), vol.Range(min=1))
_non_negative_float = vol.All(vol.Coerce(float), vol.Range(min=0.0))
_optional_path = vol.Any(None, str)

PATHS_SCHEMA = vol.Schema({
    vol.Optional("data_dir", default=None): _optional_path,
    vol.Optional("codebook", default=None): _optional_path,
    vol.Optional("checkpoint", default=None): _optional_path,
    vol.Optional("profiles", default=None): _optional_path,
    vol.Optional("reports_dir", default=None): _optional_path,
})

DIMS_SCHEMA = vol.Schema({
    vol.Optional("T", default=DEFAULT_WINDOW): vol.All(vol.Coerce(int), vol.Range(min=2)),
    vol.Optional("N", default=DEFAULT_POINTS): _positive_int,
    vol.Optional("K", default=DEFAULT_FLOW_STEPS): _positive_int,
    vol.Optional("J", default=DEFAULT_JOINTS): _positive_int,
    vol.Optional("M", default=DEFAULT_NUM_TASKS): vol.All(vol.Coerce(int), vol.Range(min=2)),
    vol.Optional("R", default=DEFAULT_RADIUS): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
    vol.Optional("episode_length", default=DEFAULT_EPISODE_LENGTH): _positive_int,
    vol.Optional("episodes_per_task", default=DEFAULT_EPISODES_PER_TASK): _positive_int,
    vol.Optional("mask_size", default=DEFAULT_MASK_SIZE): _positive_int,
    vol.Optional("stride", default=DEFAULT_STRIDE): _positive_int,
})

MODEL_SCHEMA = vol.Schema({
    vol.Optional("d_model", default=DEFAULT_D_MODEL): _positive_int,
    vol.Optional("heads", default=DEFAULT_HEADS): _positive_int,
    vol.Optional("gru_layers", default=DEFAULT_GRU_LAYERS): _positive_int,
    vol.Optional("mlp_hidden", default=DEFAULT_MLP_HIDDEN): _positive_int,
    vol.Optional("dropout", default=DEFAULT_DROPOUT): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, max_included=False)),
    vol.Optional("ablate", default=[]): [vol.In(ABLATIONS)],
    vol.Optional("per_dim_score", default=False): bool,
})

TRAINING_SCHEMA = vol.Schema({
    vol.Optional("epochs", default=DEFAULT_EPOCHS): _positive_int,
    vol.Optional("next_stage_epoch", default=DEFAULT_NEXT_STAGE_EPOCH): _positive_int,
    vol.Optional("batch_size", default=DEFAULT_BATCH_SIZE): _positive_int,
    vol.Optional("learning_rate", default=DEFAULT_LEARNING_RATE): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
    vol.Optional("grad_clip", default=DEFAULT_GRAD_CLIP): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
    vol.Optional("bins", default=DEFAULT_SAMPLER_BINS): _positive_int,
    vol.Optional("validation_split", default=DEFAULT_VALIDATION_SPLIT): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, max_included=False)),
    vol.Optional("checkpoint_every", default=CHECKPOINT_EVERY): _positive_int,
    vol.Optional("weight_refresh_interval", default=None): vol.Any(None, _positive_int),
})

MONITOR_SCHEMA = vol.Schema({
    vol.Optional("alpha", default=DEFAULT_ALPHA): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False, max_included=False)),
    vol.Optional("persist_k", default=DEFAULT_PERSIST_K): vol.All(vol.Coerce(int), vol.Range(min=2)),
    vol.Optional("hysteresis", default=DEFAULT_HYSTERESIS): _non_negative_float,
    vol.Optional("latency_budget_ms", default=LATENCY_BUDGET_MS): _non_negative_float,
})

RUN_SCHEMA = vol.Schema({
    vol.Required("paths"): PATHS_SCHEMA,
    vol.Required("dims"): DIMS_SCHEMA,
    vol.Required("model"): MODEL_SCHEMA,
    vol.Required("training"): TRAINING_SCHEMA,
    vol.Required("monitor"): MONITOR_SCHEMA,
    vol.Optional("seed", default=0): vol.All(vol.Coerce(int), vol.Range(min=0)),
})


@dataclass(frozen=True)
class RunConfig:
    paths: dict
    dims: dict
    model: dict
    training: dict
    monitor: dict
    seed: int

    def to_dict(self) -> dict:
        return {
            "paths": dict(self.paths),
            "dims": dict(self.dims),
            "model": dict(self.model),
            "training": dict(self.training),
            "monitor": dict(self.monitor),
            "seed": self.seed,
        }

    def flow_config(self) -> FlowConfig:
        ablate = set(self.model["ablate"])
        return FlowConfig(
            T=self.dims["T"],
            N=self.dims["N"],
            K=self.dims["K"],
            joints=self.dims["J"],
            d_model=self.model["d_model"],
            heads=self.model["heads"],
            gru_layers=self.model["gru_layers"],
            mlp_hidden=self.model["mlp_hidden"],
            dropout=self.model["dropout"],
            use_task_embedding="task_embedding" not in ablate,
            use_robot_state="robot_state" not in ablate,
            use_shape_branch="shape_branch" not in ablate,
            use_position_branch="position_branch" not in ablate,
            per_dim_score=self.model["per_dim_score"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.training)

    def policy(self) -> EscalationPolicy:
        return EscalationPolicy(self.monitor["persist_k"], self.monitor["hysteresis"])


def _merge(base: dict, overlay: dict) -> dict:
    merged = {section: dict(base.get(section) or {}) for section in SECTIONS}
    for section in SECTIONS:
        for key, value in (overlay.get(section) or {}).items():
            if value is not None:
                merged[section][key] = value
    seed = overlay.get("seed")
    if seed is None:
        seed = base.get("seed")
    if seed is not None:
        merged["seed"] = seed
    unknown = set(base) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"Unknown config section(s): {sorted(unknown)}")
    return merged


def _check_consistency(config: RunConfig) -> None:
    dims, training = config.dims, config.training
    if dims["T"] % 2:
        raise ConfigError(
            f"dims.T must be even, got {dims['T']}: the flow couples the two halves of each "
            "window and the codebook dimension must match it"
        )
    if config.model["d_model"] % config.model["heads"]:
        raise ConfigError("model.d_model must be divisible by model.heads")
    if training["next_stage_epoch"] > training["epochs"]:
        raise ConfigError(
            f"training.next_stage_epoch={training['next_stage_epoch']} exceeds epochs={training['epochs']}"
        )
    if {"shape_branch", "position_branch"} <= set(config.model["ablate"]):
        raise ConfigError("cannot ablate both point branches")
    if dims["episode_length"] < 2 * dims["T"]:
        raise ConfigError(f"dims.episode_length must be >= 2·T = {2 * dims['T']}")


def resolve_config(file_data: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults ← config file ← flag overrides, validated as one document."""
    merged = _merge(file_data or {}, overrides or {})
    try:
        validated = RUN_SCHEMA(merged)
    except vol.Invalid as err:
        raise ConfigError(f"Invalid configuration: {err}") from err
    config = RunConfig(**validated)
    _check_consistency(config)
    return config


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = read_json(path)
    except (OSError, ValueError) as err:
        raise ConfigError(f"Cannot read config file {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    _LOGGER.debug("Loaded config file %s", path)
    return data
