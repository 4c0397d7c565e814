"""Declarative run configuration: one YAML file drives a whole run.

Unknown keys are rejected so typos fail loudly, and every effective default
is printable via ``zoomrefine config show``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .backend import BackendConfig
from .imaging import CropPolicy
from .pipeline import PipelineConfig
from .protocol import PromptTemplates, default_templates, load_templates

__all__ = ["RunConfig", "ConfigError", "load_run_config", "default_run_config"]


class ConfigError(Exception):
    """Config file is malformed or contains unknown keys."""


@dataclass
class RunConfig:
    mode: str = "zoom_refine"
    downsample_max_side: int = 1024
    crop_policy: CropPolicy = field(default_factory=CropPolicy)
    backend: BackendConfig = field(default_factory=BackendConfig)
    templates_path: str | None = None
    dataset_path: str | None = None
    image_root: str | None = None
    parallelism: int = 1
    cache_dir: str | None = None
    output_dir: str = "results"

    def resolve_templates(self) -> PromptTemplates:
        if self.templates_path:
            return load_templates(self.templates_path)
        return default_templates()

    def pipeline_config(self, mode: str | None = None) -> PipelineConfig:
        return PipelineConfig(
            downsample_max_side=self.downsample_max_side,
            crop_policy=self.crop_policy,
            templates=self.resolve_templates(),
            backend=self.backend,
            mode=mode or self.mode,
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "downsample_max_side": self.downsample_max_side,
            "crop_policy": {
                "expansion_factor": self.crop_policy.expansion_factor,
                "min_side_px": self.crop_policy.min_side_px,
                "max_side_px": self.crop_policy.max_side_px,
            },
            "backend": {
                "endpoint_url": self.backend.endpoint_url,
                "model_name": self.backend.model_name,
                "api_key_env_var": self.backend.api_key_env_var,
                "request_timeout": self.backend.request_timeout,
                "max_retries": self.backend.max_retries,
                "retry_backoff_base": self.backend.retry_backoff_base,
                "temperature": self.backend.temperature,
                "max_output_tokens": self.backend.max_output_tokens,
            },
            "templates_path": self.templates_path,
            "dataset_path": self.dataset_path,
            "image_root": self.image_root,
            "parallelism": self.parallelism,
            "cache_dir": self.cache_dir,
            "output_dir": self.output_dir,
        }


def _build(cls, data: dict, context: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{context}: {e}") from e


def load_run_config(path: str | Path | None) -> RunConfig:
    """Load YAML config; a missing path yields all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {sorted(unknown)}")
    kwargs = dict(data)
    if "crop_policy" in kwargs:
        kwargs["crop_policy"] = _build(CropPolicy, kwargs["crop_policy"], "crop_policy")
    if "backend" in kwargs:
        kwargs["backend"] = _build(BackendConfig, kwargs["backend"], "backend")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def default_run_config() -> RunConfig:
    return RunConfig()
