"""Run configuration: a flat ``key: value`` file; unknown keys are errors."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

import yaml

from .diffusion import ModelConfig, NoiseSchedule, make_schedule
from .optim import ConfigError, TrainConfig
from .scenes import N_TOKENS, VOCAB


@dataclass(frozen=True)
class RunConfig:
    # geometry
    latent_size: int = 16
    channels: int = 3
    base_channels: int = 32
    d_model: int = 64
    n_heads: int = 2
    n_sites: int = 2
    n_tokens: int = N_TOKENS
    # noise schedule
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # optimisation; lr_peak drives the gate phase, backbone_lr_peak the backbone phase
    batch_size: int = 8
    backbone_steps: int = 2000
    gate_steps: int = 1000
    warmup_steps: int = 100
    lr_peak: float = 1e-4
    backbone_lr_peak: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    checkpoint_every: int = 500
    # masking
    lambda_train: float = 10.0
    lambda_infer: float = 1e9
    # data / sampling / io
    holdout_fraction: float = 0.1
    sampler: str = "ddim"
    sample_steps: int = 50
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
        positive = ["latent_size", "channels", "base_channels", "d_model", "n_heads", "n_sites",
                    "n_tokens", "t_steps", "batch_size", "checkpoint_every", "lr_peak",
                    "backbone_lr_peak", "clip_norm", "lambda_train", "lambda_infer", "sample_steps"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("backbone_steps", "gate_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.warmup_steps > min(self.backbone_steps, self.gate_steps):
            raise ConfigError("warmup_steps exceeds a phase's step count")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.sampler not in ("ddpm", "ddim"):
            raise ConfigError(f"sampler must be ddpm or ddim, got {self.sampler!r}")
        if self.sample_steps > self.t_steps:
            raise ConfigError("sample_steps exceeds t_steps")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start < beta_end < 1")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self, gated: bool = True) -> ModelConfig:
        return ModelConfig(latent_size=self.latent_size, channels=self.channels,
                           base_channels=self.base_channels, d_model=self.d_model,
                           n_heads=self.n_heads, n_sites=self.n_sites, n_tokens=self.n_tokens,
                           vocab_size=len(VOCAB), gated=gated)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.t_steps, self.beta_start, self.beta_end)

    def train_config(self, phase: str) -> TrainConfig:
        if phase not in ("backbone", "gates"):
            raise ConfigError(f"phase must be backbone or gates, got {phase!r}")
        backbone = phase == "backbone"
        return TrainConfig(
            batch_size=self.batch_size,
            steps=self.backbone_steps if backbone else self.gate_steps,
            warmup_steps=self.warmup_steps,
            lr_peak=self.backbone_lr_peak if backbone else self.lr_peak,
            weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, clip_norm=self.clip_norm, seed=self.seed,
            checkpoint_every=self.checkpoint_every)

    def output_dir(self) -> str:
        return os.environ.get("MASKATTN_OUT") or self.out_dir


def _coerce(name: str, typ, value):
    if typ in ("bool", bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name} must be true or false, got {value!r}")
    if typ in ("int", int):
        if isinstance(value, bool):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        if isinstance(value, float):
            if value.is_integer():
                return int(value)
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} must be an integer, got {value!r}") from None
    if typ in ("float", float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} must be a number, got {value!r}") from None
    return str(value)


def config_from_mapping(data: dict) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, known[k], v) for k, v in data.items()})


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration is not a flat key: value file ({exc})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ConfigError("configuration must be a flat mapping of key: value lines")
    return config_from_mapping(data)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from None


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}: {v!r}" if not isinstance(v, str) else f"{f.name}: {yaml.safe_dump(v).splitlines()[0]}")
    return "\n".join(lines) + "\n"


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
