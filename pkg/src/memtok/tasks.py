"""Synthetic video classification tasks over the feature encoder.

Three binary tasks on seeded noise videos with unit signal spikes:

* ``presence``: did signal A appear at all?  Negatives paint an
  equal-energy distractor (signal B) so total energy carries no label
  information.
* ``order``: signal A and signal B both appear once; label 1 iff A came
  first.  Their separation is drawn from ``(clip_size, 3*clip_size]``
  frames, so the two events always land in different clips: a model can
  only recover their order by carrying information across clips.
* ``gap``: A then B; label 1 iff they are at most ``gap`` frames apart,
  with negatives drawn from ``(gap, 3*clip_size]``.

Signal A spikes feature coordinate 1, signal B coordinate 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import SyntheticVideoSpec, gen_synthetic_video
from .errors import ConfigError

__all__ = ["TaskSpec", "make_dataset", "sample_example", "task_prompt"]

_TASKS = ("presence", "order", "gap")
_SIGNAL_A = 1
_SIGNAL_B = 2

_PROMPTS = {
    "presence": "does the highlighted pattern appear anywhere in the video",
    "order": "does the first pattern appear before the second pattern",
    "gap": "do the two patterns appear close together in time",
}


@dataclass(frozen=True)
class TaskSpec:
    name: str = "order"
    frames: int = 32
    n_patches: int = 256
    dim: int = 64
    clip_size: int = 8
    gap: int = 8
    noise_scale: float = 0.1
    signals_per_event: int = 4

    def __post_init__(self):
        if self.name not in _TASKS:
            raise ConfigError(f"unknown task {self.name!r}, expected {'|'.join(_TASKS)}")
        for field_name in ("frames", "n_patches", "dim", "clip_size", "signals_per_event"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be positive")
        if self.signals_per_event > self.n_patches:
            raise ConfigError(
                f"signals_per_event {self.signals_per_event} exceeds "
                f"{self.n_patches} patches"
            )
        if self.name in ("order", "gap") and self.frames <= 3 * self.clip_size:
            raise ConfigError(
                f"{self.name} task needs frames > 3*clip_size "
                f"({3 * self.clip_size}), got {self.frames}"
            )
        if self.name == "gap" and not 0 < self.gap < 3 * self.clip_size:
            raise ConfigError(
                f"gap parameter must lie in (0, {3 * self.clip_size}), got {self.gap}"
            )


def task_prompt(spec: TaskSpec) -> str:
    return _PROMPTS[spec.name]


def _paint(events: list, rng: np.random.Generator, spec: TaskSpec, frame: int, signal: int):
    patches = rng.choice(spec.n_patches, size=spec.signals_per_event, replace=False)
    events.extend((frame, int(p), signal) for p in patches)


def _event_frames(spec: TaskSpec, rng: np.random.Generator, label: int) -> list:
    events: list = []
    t_c = spec.clip_size
    if spec.name == "presence":
        frame = int(rng.integers(spec.frames))
        _paint(events, rng, spec, frame, _SIGNAL_A if label else _SIGNAL_B)
        return events
    if spec.name == "order":
        sep = int(rng.integers(t_c + 1, 3 * t_c + 1))
    else:  # gap
        if label:
            sep = int(rng.integers(1, spec.gap + 1))
        else:
            sep = int(rng.integers(spec.gap + 1, 3 * t_c + 1))
    first = int(rng.integers(spec.frames - sep))
    second = first + sep
    if spec.name == "order" and not label:
        _paint(events, rng, spec, first, _SIGNAL_B)
        _paint(events, rng, spec, second, _SIGNAL_A)
    else:
        _paint(events, rng, spec, first, _SIGNAL_A)
        _paint(events, rng, spec, second, _SIGNAL_B)
    return events


def sample_example(
    spec: TaskSpec, rng: np.random.Generator, label: int | None = None
) -> tuple[np.ndarray, int]:
    """Draw one (features, label) pair; features are (frames, n_patches, dim) f32."""
    if label is None:
        label = int(rng.integers(2))
    video_spec = SyntheticVideoSpec(
        frames=spec.frames,
        n_patches=spec.n_patches,
        dim=spec.dim,
        events=_event_frames(spec, rng, label),
        noise_scale=spec.noise_scale,
        seed=int(rng.integers(2**31)),
    )
    return gen_synthetic_video(video_spec).data.data.astype(np.float32), label


def make_dataset(spec: TaskSpec, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Exactly balanced dataset: (count, frames, n_patches, dim) f32 + labels."""
    if count % 2 != 0:
        raise ConfigError(f"dataset size must be even for exact balance, got {count}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.array([0, 1], dtype=np.int64), count // 2))
    features = np.stack(
        [sample_example(spec, rng, label=int(lbl))[0] for lbl in labels]
    )
    return features, labels
