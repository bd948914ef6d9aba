"""Run configuration: one flat key/value document (YAML) with CLI overrides."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .control import InjectionConfig
from .errors import ConfigError
from .model import ModelConfig

MODES = ("edit", "reconstruct", "baseline_generate", "baseline_sdedit")
OUTPUT_ROOT_ENV = "VIDEDIT_OUTPUT_ROOT"
CACHE_ENV = "VIDEDIT_CACHE"


@dataclass
class RunConfig:
    # paths
    weights: Optional[str] = None
    video: Optional[str] = None
    output_dir: str = "runs/default"
    # prompts; the source prompt defaults to the scene caption
    source_prompt: Optional[str] = None
    target_prompt: Optional[str] = None
    mode: str = "edit"
    seed: Optional[int] = None
    # procedural source clip, used when no video path is given
    scene_color: str = "red"
    scene_shape: str = "square"
    scene_direction: str = "right"
    scene_seed: int = 0
    num_frames: int = 8
    # noise schedule and sampler
    num_train_timesteps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    beta_schedule: str = "scaled_linear"
    sampler_steps: int = 50
    guidance_scale: float = 7.5
    inversion_fixed_point_iters: int = 3
    # pretraining of the image model
    pretrain_steps: int = 8000
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 32
    pretrain_dataset_size: int = 4096
    pretrain_seed: int = 0
    # one-shot tuning and null-text inversion
    finetune_steps: int = 300
    finetune_lr: float = 1e-3
    nti_inner_iters: int = 10
    nti_lr: float = 3000.0
    null_text: bool = True
    # attention injection and blending
    dur_cross: float = 0.2
    dur_st: float = 0.5
    dur_temporal: float = 0.8
    blend_threshold: float = 0.25
    blend_start: float = 0.0
    blending: bool = True
    tc_blending: bool = True
    # baselines
    sdedit_t0: int = 25
    # evaluation
    text_alignment_plugin: bool = True
    dump_attention: bool = False

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("seed is required")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("edit", "baseline_generate", "baseline_sdedit") and not self.target_prompt:
            raise ConfigError(f"mode {self.mode!r} needs target_prompt")
        if not 0 <= self.sdedit_t0 <= self.sampler_steps:
            raise ConfigError("sdedit_t0 must lie in [0, sampler_steps]")
        for name in ("finetune_steps", "nti_inner_iters", "pretrain_steps", "inversion_fixed_point_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        try:
            self.injection()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def injection(self) -> InjectionConfig:
        return InjectionConfig(self.dur_cross, self.dur_st, self.dur_temporal,
                               self.blend_threshold, self.blend_start)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return p if p.is_absolute() or not root else Path(root) / p

    def pretrain_key(self) -> str:
        keys = ("num_train_timesteps", "beta_start", "beta_end", "beta_schedule", "pretrain_steps",
                "pretrain_lr", "pretrain_batch", "pretrain_dataset_size", "pretrain_seed")
        values = {k: getattr(self, k) for k in keys}
        values["model"] = ModelConfig().hash()
        blob = json.dumps(values, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def weights_path(self) -> Path:
        if self.weights:
            return Path(self.weights)
        cache = Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "videdit"))
        return cache / f"pretrained_{self.pretrain_key()}.npz"

    def to_yaml(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=False)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    kind = FIELD_TYPES[name]
    if value is None:
        return None
    try:
        if "bool" in kind:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if "int" in kind:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if "float" in kind:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (later wins)."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} is not a key/value document")
        values.update(data)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    unknown = sorted(set(values) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
