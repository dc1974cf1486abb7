"""Command-line front end.

Subcommands::

    compress   compress a feature file into a token sequence file
    gradcheck  finite-difference check of every parameter group
    train      toy-task training run, metrics as CSV
    ablate     one training run per branch mode (mem/txt/full), CSV table
    sweep      vary clip_size or memory_size, CSV table
    bench      streaming cost vs video length, CSV table

Exit codes: 0 success, 1 a check failed (gradient mismatch, divergence),
2 usage or I/O error.  Tables go to --out when given, stdout otherwise.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from .bench import BENCH_HEADER, bench_streaming
from .config import RunConfig, load_config, merge_overrides
from .encoder import VideoFeature, load_features, save_features
from .errors import (
    CacheError,
    ConfigError,
    DivergenceError,
    FormatError,
    OracleError,
    ShapeError,
)
from .gradcheck import finite_diff_check
from .model import init_model, save_checkpoint
from .pipeline import run_video_streaming
from .tasks import task_prompt
from .tensor import Tensor, cross_entropy, reshape, set_default_dtype
from .textcomp import tokenize
from .training import (
    ABLATION_HEADER,
    SWEEP_HEADER,
    TRAIN_HEADER,
    run_ablation,
    run_sweep,
    task_logits,
    train_toy,
)

__all__ = ["build_parser", "entrypoint", "main", "run_gradcheck"]

GRADCHECK_TOL = 1e-4

# Which parameter groups a branch actually exercises; the others would
# pass trivially with zero gradients on both sides.
_GRADCHECK_GROUPS = {
    "full": ("mem", "qformer", "adapter", "head", "fusion"),
    "mem": ("mem", "adapter", "head"),
    "txt": ("qformer", "adapter", "head"),
}

_USAGE_ERRORS = (ConfigError, FormatError, ShapeError, CacheError, OracleError, OSError)


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags below override its values")
    sub.add_argument("--seed", type=int, help="RNG seed for weights and data")
    sub.add_argument("--precision", choices=("f32", "f64"))
    sub.add_argument("--branch", choices=("mem", "txt", "full"))
    sub.add_argument("--clip-size", type=int, dest="clip_size")
    sub.add_argument("--memory-size", type=int, dest="memory_size")
    sub.add_argument("--layout", choices=("interleaved", "blocked"))
    sub.add_argument("--out", help="output file (tables default to stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memtok",
        description="dual-branch video token compression with FIFO clip memory",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("compress", help="compress a feature file into tokens")
    p.add_argument("input", help="feature file to read")
    p.add_argument("--prompt", help="text prompt (required unless --branch mem)")
    _add_common_flags(p)

    p = subs.add_parser("gradcheck", help="finite-difference check per parameter group")
    p.add_argument(
        "--max-coords", type=int, default=8, dest="max_coords",
        help="coordinates probed per tensor (seeded subset)",
    )
    _add_common_flags(p)

    p = subs.add_parser("train", help="train the toy classifier, metrics as CSV")
    p.add_argument("--checkpoint", help="write final weights to this file")
    _add_common_flags(p)

    p = subs.add_parser("ablate", help="accuracy/cost per branch mode, CSV")
    _add_common_flags(p)

    p = subs.add_parser("sweep", help="vary one architecture axis, CSV")
    p.add_argument("--axis", required=True, choices=("clip_size", "memory_size"))
    _add_common_flags(p)

    p = subs.add_parser("bench", help="streaming cost vs video length, CSV")
    p.add_argument(
        "--lengths", default="64,512",
        help="comma-separated frame counts to benchmark",
    )
    _add_common_flags(p)
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    return merge_overrides(
        config,
        seed=args.seed,
        precision=args.precision,
        branch=args.branch,
        clip_size=args.clip_size,
        memory_size=args.memory_size,
        layout=args.layout,
    )


def _write_table(header, rows, out_path) -> None:
    if out_path is None:
        _emit_csv(sys.stdout, header, rows)
    else:
        with open(out_path, "w", newline="") as fh:
            _emit_csv(fh, header, rows)


def _emit_csv(fh, header, rows) -> None:
    writer = csv.writer(fh)
    writer.writerow(header)
    writer.writerows(rows)


def cmd_compress(args: argparse.Namespace, config: RunConfig) -> int:
    feature = load_features(args.input)
    t, n, d = feature.data.shape
    side = 2**config.num_blocks
    if d != config.dim or n != side * side:
        raise ConfigError(
            f"feature file holds {n} patches of dim {d} per frame, but the "
            f"configured compressor expects {side * side} patches of dim {config.dim}"
        )
    text_ids = None
    if config.branch != "mem":
        if args.prompt is None:
            raise ConfigError("--prompt is required unless --branch mem")
        text_ids = tokenize(args.prompt, config.model().text())

    params = init_model(np.random.default_rng(config.seed), config.model())
    started = time.perf_counter()
    result = run_video_streaming(
        feature.data, text_ids, params, config.model(),
        branch=config.branch, layout=config.layout,
    )
    wall = time.perf_counter() - started
    tokens = result.sequence.tokens
    length = tokens.shape[-2]
    clips = -(-t // config.clip_size)
    if args.out is not None:
        stream = VideoFeature(reshape(tokens, (length, 1, tokens.shape[-1])))
        save_features(args.out, stream)
    print(
        f"{t} frames in, {clips} clips, {length} tokens out "
        f"({config.branch} branch, {config.layout} layout), {wall:.3f}s"
    )
    return 0


def run_gradcheck(config: RunConfig, max_coords: int = 8):
    """Finite-difference check over a small full-pipeline instance.

    Returns ``(group_rows, worst_name, worst_err)`` where ``group_rows``
    is a list of ``(group, max_rel_err, worst_tensor)`` sorted by group.
    Forces 64-bit precision; the instance is one 8-frame clip with dim 16
    and 4 query tokens so the whole model fits in the check budget.
    """
    set_default_dtype("f64")
    cfg = merge_overrides(
        config,
        precision="f64",
        dim=16,
        num_queries=4,
        frames=8,
        clip_size=8,
        fusion_proj=config.branch == "full",
        task="presence",
    )
    params = init_model(np.random.default_rng(cfg.seed), cfg.model())
    n = (2**cfg.num_blocks) ** 2
    rng = np.random.default_rng(cfg.seed + 1)
    features = Tensor(rng.standard_normal((1, cfg.frames, n, cfg.dim)))
    labels = np.array([1])
    text_ids = None
    if cfg.branch != "mem":
        text_ids = tokenize(task_prompt(cfg.task_spec()), cfg.model().text())

    def loss_fn(_param):
        logits, _ = task_logits(features, text_ids, params, cfg)
        return cross_entropy(logits, labels)

    wanted = _GRADCHECK_GROUPS[cfg.branch]
    worst_by_group: dict[str, tuple[float, str]] = {}
    for name, tensor in sorted(params.tensors().items()):
        group = name.split(".", 1)[0]
        if group not in wanted:
            continue
        report = finite_diff_check(loss_fn, tensor, max_coords=max_coords, seed=cfg.seed)
        err = report.max_rel_err
        if group not in worst_by_group or err > worst_by_group[group][0]:
            worst_by_group[group] = (err, name)

    rows = [(g, worst_by_group[g][0], worst_by_group[g][1]) for g in sorted(worst_by_group)]
    worst_err, worst_name = max(worst_by_group.values())
    return rows, worst_name, worst_err


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    rows, worst_name, worst_err = run_gradcheck(config, max_coords=args.max_coords)
    for group, err, name in rows:
        print(f"group {group}: max relerr {err:.3e} ({name})")
    if worst_err < GRADCHECK_TOL:
        print(f"gradcheck passed: all groups below {GRADCHECK_TOL:.0e}")
        return 0
    print(
        f"gradcheck FAILED: {worst_name} relerr {worst_err:.3e} "
        f"exceeds {GRADCHECK_TOL:.0e}",
        file=sys.stderr,
    )
    return 1


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    params = init_model(np.random.default_rng(config.seed), config.model())
    result = train_toy(params, config)
    rows = [[m.step, m.loss, m.accuracy, m.lr] for m in result.metrics]
    _write_table(TRAIN_HEADER, rows, args.out)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, params, config.model())
    print(
        f"final accuracy {result.final_accuracy:.4f} on task {config.task!r} "
        f"after {result.steps_run} steps ({result.wall_time_s:.1f}s)",
        file=sys.stderr,
    )
    return 0


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    _write_table(ABLATION_HEADER, run_ablation(config), args.out)
    return 0


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    _write_table(SWEEP_HEADER, run_sweep(config, args.axis), args.out)
    return 0


def _parse_lengths(text: str) -> tuple[int, ...]:
    try:
        lengths = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"--lengths must be comma-separated integers, got {text!r}")
    if not lengths:
        raise ConfigError(f"--lengths must name at least one video length, got {text!r}")
    return lengths


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    rows = [row.as_list() for row in bench_streaming(config, _parse_lengths(args.lengths))]
    _write_table(BENCH_HEADER, rows, args.out)
    return 0


_DISPATCH = {
    "compress": cmd_compress,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        set_default_dtype(config.precision)
        return _DISPATCH[args.command](args, config)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
