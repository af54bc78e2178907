"""Experiment configuration: JSON schema, defaults and environment overrides.

A config file is one JSON object. Every key is optional; unknown keys are
rejected. Documented defaults::

    {
      "recipe": "shared-lowrank-regression",   # or "dense-multitask"
      "seed": 0,
      "lam": 1.0,                   # weight of the orthogonality regularizer
      "dropout": 0.1,               # adapter-input dropout
      "adapter": {"kind": "ta_lora", "p": 4, "q": 4, "v": 2, "r": 4,
                  "ortho_core": true},
      "tasks": null,                # null picks the recipe's default task list
      "encoder": {"layers": 2, "width": 32, "grid_h": 8, "grid_w": 8,
                  "heads": 4, "in_channels": 8, "mlp_ratio": 2,
                  "decoder_hidden": 16},
      "data": {"d": 32, "k": 32, "p": 4, "q": 4, "v": 2, "latent": 4,
               "noise": 0.01, "n_samples": 256},
      "optim": {"epochs": 1, "batch_size": 4, "lr": 0.001,
                "weight_decay": 1e-06, "warmup_ratio": 0.05,
                "beta1": 0.9, "beta2": 0.999, "eps": 1e-08}
    }

A task entry is ``{"loss": "cross_entropy" | "l1" | "cosine" | "mse",
"weight": 1.0, "channels": 1, "name": ""}``. The default task list is four
``mse`` tasks for the linear recipe, and ``cross_entropy`` (4 channels),
``l1`` (1) and ``cosine`` (3) for the dense recipe.

Environment overrides are applied after the file is parsed and the result is
validated again: ``TALORA_SEED``, ``TALORA_EPOCHS``, ``TALORA_LR``,
``TALORA_LAMBDA``, ``TALORA_BATCH_SIZE``, ``TALORA_DROPOUT``.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .adapter import AdapterSpec
from .msam import EncoderConfig
from .objective import TaskSpec
from .trainer import TrainConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "config_from_dict",
    "apply_env_overrides",
    "ENV_OVERRIDES",
]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, strict=False)


class AdapterSection(_Strict):
    kind: Literal["ta_lora", "lora_stl", "lora_hps"] = "ta_lora"
    p: int = Field(4, ge=1)
    q: int = Field(4, ge=1)
    v: int = Field(2, ge=1)
    r: int = Field(4, ge=1)
    ortho_core: bool = True


class TaskSection(_Strict):
    loss: Literal["cross_entropy", "l1", "cosine", "mse"]
    weight: float = Field(1.0, gt=0)
    channels: int = Field(1, ge=1)
    name: str = ""


class EncoderSection(_Strict):
    layers: int = Field(2, ge=1)
    width: int = Field(32, ge=1)
    grid_h: int = Field(8, ge=1)
    grid_w: int = Field(8, ge=1)
    heads: int = Field(4, ge=1)
    in_channels: int = Field(8, ge=1)
    mlp_ratio: int = Field(2, ge=1)
    decoder_hidden: int = Field(16, ge=1)


class DataSection(_Strict):
    d: int = Field(32, ge=1)
    k: int = Field(32, ge=1)
    p: int = Field(4, ge=1)
    q: int = Field(4, ge=1)
    v: int = Field(2, ge=1)
    latent: int = Field(4, ge=1)
    noise: float = Field(0.01, ge=0)
    n_samples: int = Field(256, ge=1)


class OptimSection(_Strict):
    epochs: int = Field(1, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-6, ge=0)
    warmup_ratio: float = Field(0.05, ge=0, le=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class ExperimentConfig(_Strict):
    recipe: Literal["shared-lowrank-regression", "dense-multitask"] = "shared-lowrank-regression"
    seed: int = Field(0, ge=0)
    lam: float = Field(1.0, ge=0)
    dropout: float = Field(0.1, ge=0, lt=1)
    adapter: AdapterSection = AdapterSection()
    tasks: Optional[list[TaskSection]] = None
    encoder: EncoderSection = EncoderSection()
    data: DataSection = DataSection()
    optim: OptimSection = OptimSection()

    def task_specs(self) -> list[TaskSpec]:
        tasks = self.tasks
        if tasks is None:
            if self.recipe == "shared-lowrank-regression":
                tasks = [TaskSection(loss="mse") for _ in range(4)]
            else:
                tasks = [TaskSection(loss="cross_entropy", channels=4),
                         TaskSection(loss="l1", channels=1),
                         TaskSection(loss="cosine", channels=3)]
        return [TaskSpec(i, t.loss, t.weight, t.channels, t.name) for i, t in enumerate(tasks)]

    def adapter_spec(self) -> AdapterSpec:
        a = self.adapter
        return AdapterSpec(a.kind, a.p, a.q, a.v, a.r, self.dropout, a.ortho_core)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(seed=self.seed, **self.encoder.model_dump())

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, lam=self.lam, **self.optim.model_dump())

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()


_TYPE_HINTS = {
    "int_type": "integer",
    "int_parsing": "integer",
    "int_from_float": "integer",
    "float_type": "number",
    "float_parsing": "number",
    "bool_type": "boolean",
    "bool_parsing": "boolean",
    "string_type": "string",
    "list_type": "list",
    "model_type": "object",
    "dict_type": "object",
    "literal_error": "one of the listed values",
}


def _describe(exc: ValidationError) -> str:
    err = exc.errors()[0]
    key = ".".join(str(p) for p in err["loc"]) or "<root>"
    kind = err["type"]
    if kind == "extra_forbidden":
        return f"{key}: unknown key"
    expected = _TYPE_HINTS.get(kind)
    msg = err["msg"]
    if expected:
        return f"{key}: expected {expected} ({msg}), got {err.get('input')!r}"
    return f"{key}: {msg}, got {err.get('input')!r}"


def config_from_dict(raw: Mapping) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"<root>: expected a JSON object, got {type(raw).__name__}")
    try:
        cfg = ExperimentConfig.model_validate(dict(raw), strict=True)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: ExperimentConfig) -> None:
    if cfg.encoder.width % cfg.encoder.heads:
        raise ConfigError(f"encoder.heads: width {cfg.encoder.width} is not divisible "
                          f"by {cfg.encoder.heads} heads")
    specs = cfg.task_specs()
    if cfg.recipe == "shared-lowrank-regression":
        for i, t in enumerate(specs):
            if t.loss_kind != "mse":
                raise ConfigError(f"tasks.{i}.loss: the linear recipe needs 'mse', got {t.loss_kind!r}")
        d, k = cfg.data.d, cfg.data.k
    else:
        d = k = cfg.encoder.width
    a = cfg.adapter
    if a.kind == "ta_lora" and max(a.p, a.q) > min(d, k):
        raise ConfigError(f"adapter.p: p={a.p}, q={a.q} must not exceed min(d, k)={min(d, k)}")
    if a.kind != "ta_lora" and a.r > min(d, k):
        raise ConfigError(f"adapter.r: r={a.r} must not exceed min(d, k)={min(d, k)}")
    if not specs:
        raise ConfigError("tasks: at least one task is required")


ENV_OVERRIDES = {
    "TALORA_SEED": ("seed",),
    "TALORA_EPOCHS": ("optim", "epochs"),
    "TALORA_LR": ("optim", "lr"),
    "TALORA_LAMBDA": ("lam",),
    "TALORA_BATCH_SIZE": ("optim", "batch_size"),
    "TALORA_DROPOUT": ("dropout",),
}


def apply_env_overrides(cfg: ExperimentConfig, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    env = os.environ if environ is None else environ
    raw = cfg.to_dict()
    touched = False
    for var, path in ENV_OVERRIDES.items():
        if var not in env:
            continue
        node = raw
        for key in path[:-1]:
            node = node[key]
        try:
            node[path[-1]] = json.loads(env[var])
        except json.JSONDecodeError:
            node[path[-1]] = env[var]
        touched = True
    if not touched:
        return cfg
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{exc} (from environment)") from None


def parse_config(path, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read, validate and apply environment overrides to a JSON config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    return apply_env_overrides(config_from_dict(raw), environ)
