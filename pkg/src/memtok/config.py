"""Run configuration: one flat record shared by every CLI command.

Configs load from a JSON object whose keys mirror the field names below;
command-line flags override file values, and file values override the
defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .model import ModelConfig
from .tasks import TaskSpec

__all__ = ["RunConfig", "load_config", "merge_overrides"]

_PRECISIONS = ("f32", "f64")
_BRANCHES = ("mem", "txt", "full")
_LAYOUTS = ("interleaved", "blocked")
_STAGES = ("align", "instruct")
_TASK_NAMES = ("presence", "order", "gap")


@dataclass(frozen=True)
class RunConfig:
    # architecture
    clip_size: int = 8
    memory_size: int = 3
    num_queries: int = 8
    dim: int = 64
    dim_out: int | None = None
    num_blocks: int = 4
    num_heads: int = 1
    text_layers: int = 2
    vocab_size: int = 256
    max_text_tokens: int = 64
    fusion_proj: bool = False
    num_classes: int = 2
    cache_detached: bool = True
    # execution
    seed: int = 0
    precision: str = "f32"
    branch: str = "full"
    layout: str = "interleaved"
    stage: str = "instruct"
    # toy task and training budget
    task: str = "order"
    frames: int = 32
    gap: int = 8
    noise_scale: float = 0.1
    signals_per_event: int = 4
    steps: int = 500
    lr: float = 0.05
    batch_size: int = 8
    eval_size: int = 64

    def __post_init__(self):
        if self.precision not in _PRECISIONS:
            raise ConfigError(f"precision must be f32|f64, got {self.precision!r}")
        if self.branch not in _BRANCHES:
            raise ConfigError(f"branch must be mem|txt|full, got {self.branch!r}")
        if self.layout not in _LAYOUTS:
            raise ConfigError(
                f"layout must be interleaved|blocked, got {self.layout!r}"
            )
        if self.stage not in _STAGES:
            raise ConfigError(f"stage must be align|instruct, got {self.stage!r}")
        if self.task not in _TASK_NAMES:
            raise ConfigError(
                f"task must be presence|order|gap, got {self.task!r}"
            )
        for name in ("steps", "batch_size", "eval_size", "frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        # surface architecture errors at construction time
        self.model()

    def model(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            dim_out=self.dim_out,
            clip_size=self.clip_size,
            memory_size=self.memory_size,
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            cache_detached=self.cache_detached,
            num_queries=self.num_queries,
            text_layers=self.text_layers,
            vocab_size=self.vocab_size,
            max_text_tokens=self.max_text_tokens,
            fusion_proj=self.fusion_proj,
            num_classes=self.num_classes,
        )

    def task_spec(self) -> TaskSpec:
        return TaskSpec(
            name=self.task,
            frames=self.frames,
            n_patches=(2**self.num_blocks) ** 2,
            dim=self.dim,
            clip_size=self.clip_size,
            gap=self.gap,
            noise_scale=self.noise_scale,
            signals_per_event=self.signals_per_event,
        )


def load_config(path) -> RunConfig:
    """Read a RunConfig from a JSON object file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(blob, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(blob) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**blob)


def merge_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Apply non-None overrides (e.g. parsed CLI flags) onto a config."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **changes) if changes else config
