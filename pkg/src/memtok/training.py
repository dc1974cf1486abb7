"""Toy training harness: SGD with warmup + cosine decay over the pipeline.

The classifier is deliberately weak — mean-pool the token sequence, one
linear layer — so that any temporal reasoning has to happen inside the
compressors, not in the head.  Stages follow the two-phase schedule:
``align`` updates the clip compressor, fusion, and the two adapters;
``instruct`` additionally unfreezes the text compressor and the head.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, merge_overrides
from .errors import ConfigError, DivergenceError
from .model import ModelParams, init_model, set_trainable
from .pipeline import run_video_streaming
from .tasks import make_dataset, sample_example, task_prompt
from .tensor import Tape, Tensor, add, cross_entropy, gradients, matmul, mean_axis
from .textcomp import tokenize

__all__ = [
    "ABLATION_HEADER",
    "SWEEP_HEADER",
    "SWEEP_VALUES",
    "TRAIN_HEADER",
    "TrainResult",
    "TrainStepMetric",
    "evaluate",
    "lr_at",
    "run_ablation",
    "run_sweep",
    "task_logits",
    "train_toy",
]

ABLATION_HEADER = ["mode", "task", "accuracy", "tokens_per_frame", "wall_time_s"]
SWEEP_HEADER = ["axis", "value", "task", "accuracy", "throughput_fps", "tokens_per_frame"]
TRAIN_HEADER = ["step", "loss", "accuracy", "lr"]
SWEEP_VALUES = {"clip_size": (4, 8, 16), "memory_size": (3, 5, 7)}

_WARMUP_FRAC = 0.03
_DIVERGENCE_FACTOR = 10.0
_DIVERGENCE_PATIENCE = 50
_METRICS_EVERY = 10


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float = _WARMUP_FRAC) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainStepMetric:
    step: int
    loss: float
    accuracy: float  # on a fixed probe set, refreshed at each log step
    lr: float


@dataclass
class TrainResult:
    final_accuracy: float
    metrics: list[TrainStepMetric]
    steps_run: int
    wall_time_s: float
    tokens_per_frame: int
    initial_loss: float


def _prompt_ids(config: RunConfig):
    if config.branch == "mem":
        return None
    return tokenize(task_prompt(config.task_spec()), config.model().text())


def task_logits(
    features: Tensor, text_ids, params: ModelParams, config: RunConfig
) -> tuple[Tensor, int]:
    """Mean-pool the token sequence and apply the linear head."""
    result = run_video_streaming(
        features, text_ids, params, config.model(),
        branch=config.branch, layout=config.layout,
    )
    pooled = mean_axis(result.sequence.tokens, axis=-2)
    logits = add(matmul(pooled, params.head_w), params.head_b)
    return logits, result.sequence.tokens_per_frame


def evaluate(
    params: ModelParams,
    config: RunConfig,
    features: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 32,
) -> float:
    """Accuracy of argmax predictions over a labelled feature set."""
    text_ids = _prompt_ids(config)
    hits = 0
    for start in range(0, len(features), batch_size):
        batch = Tensor(features[start : start + batch_size])
        logits, _ = task_logits(batch, text_ids, params, config)
        hits += int((np.argmax(logits.data, axis=-1) == labels[start : start + batch_size]).sum())
    return hits / len(features)


def _balanced_batch(spec, rng: np.random.Generator, batch_size: int):
    labels = rng.permutation(np.repeat(np.array([0, 1], dtype=np.int64), batch_size // 2))
    features = np.stack([sample_example(spec, rng, label=int(l))[0] for l in labels])
    return features, labels


def train_toy(params: ModelParams, config: RunConfig) -> TrainResult:
    """Train the toy classifier in place and return the metrics log."""
    if config.batch_size % 2 != 0:
        raise ConfigError(
            f"batch_size must be even for balanced batches, got {config.batch_size}"
        )
    spec = config.task_spec()
    text_ids = _prompt_ids(config)
    trainable_set = set(set_trainable(params, config.stage))
    registry = params.tensors()
    trainable = [registry[name] for name in sorted(trainable_set)]
    frozen_before = {
        name: t.data.copy() for name, t in registry.items() if name not in trainable_set
    }

    rng = np.random.default_rng(config.seed)
    probe_size = min(16, config.eval_size)
    probe_features, probe_labels = make_dataset(spec, probe_size, seed=config.seed + 31337)
    start_time = time.perf_counter()
    metrics: list[TrainStepMetric] = []
    initial_loss = None
    divergence_streak = 0
    tokens_per_frame = 1

    for step in range(config.steps):
        features, labels = _balanced_batch(spec, rng, config.batch_size)
        with Tape() as tape:
            logits, tokens_per_frame = task_logits(
                Tensor(features), text_ids, params, config
            )
            loss = cross_entropy(logits, labels)
        grads = gradients(tape, loss, trainable)
        rate = lr_at(step, config.steps, config.lr)
        for tensor, grad in zip(trainable, grads):
            tensor.data -= (rate * grad.data).astype(tensor.data.dtype, copy=False)

        loss_value = float(loss.data)
        if initial_loss is None:
            initial_loss = loss_value
        diverged = not math.isfinite(loss_value) or (
            loss_value > _DIVERGENCE_FACTOR * initial_loss
        )
        divergence_streak = divergence_streak + 1 if diverged else 0
        if divergence_streak >= _DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"training diverged: loss {loss_value:.4g} stayed above "
                f"{_DIVERGENCE_FACTOR}x the initial loss {initial_loss:.4g} for "
                f"{_DIVERGENCE_PATIENCE} consecutive steps (aborted at step {step})"
            )
        if step % _METRICS_EVERY == 0 or step == config.steps - 1:
            probe_acc = evaluate(params, config, probe_features, probe_labels)
            metrics.append(TrainStepMetric(step, loss_value, probe_acc, rate))

    for name, before in frozen_before.items():
        after = registry[name].data
        assert after.shape == before.shape and (after == before).all(), (
            f"frozen tensor {name} changed during stage {config.stage!r}"
        )

    eval_features, eval_labels = make_dataset(spec, config.eval_size, seed=config.seed + 7919)
    accuracy = evaluate(params, config, eval_features, eval_labels)
    return TrainResult(
        final_accuracy=accuracy,
        metrics=metrics,
        steps_run=config.steps,
        wall_time_s=time.perf_counter() - start_time,
        tokens_per_frame=tokens_per_frame,
        initial_loss=initial_loss if initial_loss is not None else float("nan"),
    )


def run_ablation(config: RunConfig, modes=("mem", "txt", "full")) -> list[list]:
    """One training run per branch mode; rows follow ABLATION_HEADER."""
    rows = []
    for mode in modes:
        cfg = merge_overrides(config, branch=mode)
        params = init_model(np.random.default_rng(cfg.seed), cfg.model())
        started = time.perf_counter()
        result = train_toy(params, cfg)
        wall = time.perf_counter() - started
        rows.append(
            [mode, cfg.task, round(result.final_accuracy, 4), result.tokens_per_frame, round(wall, 3)]
        )
    return rows


def run_sweep(config: RunConfig, axis: str) -> list[list]:
    """Train once per axis value; rows follow SWEEP_HEADER."""
    if axis not in SWEEP_VALUES:
        raise ConfigError(
            f"unknown sweep axis {axis!r}, expected {'|'.join(SWEEP_VALUES)}"
        )
    rows = []
    for value in SWEEP_VALUES[axis]:
        overrides = {axis: value}
        if axis == "clip_size" and config.task in ("order", "gap"):
            # the cross-clip tasks need room for a 3-clip separation
            overrides["frames"] = max(config.frames, 4 * value)
        cfg = merge_overrides(config, **overrides)
        params = init_model(np.random.default_rng(cfg.seed), cfg.model())
        result = train_toy(params, cfg)
        eval_started = time.perf_counter()
        feats, labels = make_dataset(cfg.task_spec(), cfg.eval_size, seed=cfg.seed + 104729)
        accuracy = evaluate(params, cfg, feats, labels)
        eval_wall = time.perf_counter() - eval_started
        throughput = (len(feats) * cfg.frames) / max(eval_wall, 1e-9)
        rows.append(
            [axis, value, cfg.task, round(accuracy, 4), round(throughput, 1), result.tokens_per_frame]
        )
    return rows
