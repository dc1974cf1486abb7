"""Constant-memory streaming benchmark.

Measures the clip compressor the way it is meant to run: clips are
generated one at a time (the full video is never materialized), pushed
through the shared cache states, and their outputs discarded.  Reported
per-clip time is the steady-state mean — clips processed once the FIFO
is full — so the number reflects the warm cache every long stream runs
with.  Peak transient bytes come from tracemalloc around the loop; a
windowed design must show both figures flat in the video length.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from statistics import fmean

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .memory import compress_clip, init_compressor, new_cache_states
from .tensor import Tensor

__all__ = ["BENCH_HEADER", "BenchRow", "bench_streaming"]

BENCH_HEADER = ["T", "clips", "per_clip_time_s", "peak_bytes"]


@dataclass
class BenchRow:
    frames: int
    clips: int
    per_clip_time_s: float
    peak_bytes: int

    def as_list(self) -> list:
        return [self.frames, self.clips, self.per_clip_time_s, self.peak_bytes]


def _clip_features(config: RunConfig, clip_index: int) -> Tensor:
    """Synthesize one clip's features from a (seed, clip) stream."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, clip_index)))
    n = (2**config.num_blocks) ** 2
    return Tensor(rng.standard_normal((config.clip_size, n, config.dim)))


def bench_streaming(config: RunConfig, lengths: list[int]) -> list[BenchRow]:
    """One row per requested video length, in the given order."""
    if not lengths:
        raise ConfigError("bench needs at least one video length, got an empty list")
    for t in lengths:
        if t < 1:
            raise ConfigError(f"video length must be positive, got {t}")

    ccfg = config.model().compressor()
    blocks = init_compressor(np.random.default_rng(config.seed), ccfg)

    # warm caches/allocators once so the first measured run is not penalized
    warm_states = new_cache_states(ccfg)
    for c in range(2):
        compress_clip(_clip_features(config, c), warm_states, blocks, ccfg)

    rows = []
    for t in lengths:
        n_clips = -(-t // config.clip_size)
        states = new_cache_states(ccfg)
        times = []
        tracemalloc.start()
        try:
            for c in range(n_clips):
                clip = _clip_features(config, c)
                started = time.perf_counter()
                compress_clip(clip, states, blocks, ccfg)  # output discarded
                times.append(time.perf_counter() - started)
            peak = tracemalloc.get_traced_memory()[1]
        finally:
            tracemalloc.stop()
        steady_from = min(config.memory_size, n_clips - 1)
        rows.append(
            BenchRow(
                frames=t,
                clips=n_clips,
                per_clip_time_s=fmean(times[steady_from:]),
                peak_bytes=peak,
            )
        )
    return rows
