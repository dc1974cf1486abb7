"""Streaming benchmark harness tests.

Structural anchors: clip counts are ceil(T / clip_size); rows follow the
fixed header; clip features are generated per clip so the harness never
holds a whole long video at once.
"""

import numpy as np
import pytest

from memtok.bench import BENCH_HEADER, bench_streaming
from memtok.config import RunConfig
from memtok.errors import ConfigError


def bench_config(**kw):
    base = dict(dim=8, num_blocks=2, clip_size=4, memory_size=2, seed=0)
    base.update(kw)
    return RunConfig(**base)


class TestBenchRows:
    def test_header_is_fixed(self):
        assert BENCH_HEADER == ["T", "clips", "per_clip_time_s", "peak_bytes"]

    def test_clip_counts(self):
        rows = bench_streaming(bench_config(), [4, 6, 12])
        assert [r.frames for r in rows] == [4, 6, 12]
        assert [r.clips for r in rows] == [1, 2, 3]

    def test_measurements_are_positive(self):
        (row,) = bench_streaming(bench_config(), [8])
        assert row.per_clip_time_s > 0
        assert row.peak_bytes > 0

    def test_empty_lengths_rejected(self):
        with pytest.raises(ConfigError, match="length"):
            bench_streaming(bench_config(), [])

    def test_nonpositive_length_rejected(self):
        with pytest.raises(ConfigError, match="length"):
            bench_streaming(bench_config(), [8, 0])


class TestConstantMemory:
    def test_peak_bytes_flat_once_cache_is_saturated(self):
        # both lengths exceed (memory_size + 1) clips, so the attention
        # working set has reached its fixed point in each run; dims are
        # large enough that tensor buffers dominate interpreter noise
        rows = bench_streaming(
            bench_config(dim=32, num_blocks=3, clip_size=8), [32, 128]
        )
        short, long = rows
        assert long.peak_bytes <= short.peak_bytes * 1.2

    def test_larger_memory_window_costs_more_per_clip(self):
        # Full-width blocks so the attention share dominates: at dim 64 the
        # M=7 window costs ~1.4x the M=1 window per clip, far above
        # scheduler noise; best-of-2 shields the residual jitter.
        cfg = dict(dim=64, num_blocks=4, clip_size=8)
        lean = min(
            bench_streaming(bench_config(memory_size=1, **cfg), [96])[0].per_clip_time_s
            for _ in range(2)
        )
        heavy = min(
            bench_streaming(bench_config(memory_size=7, **cfg), [96])[0].per_clip_time_s
            for _ in range(2)
        )
        assert heavy > lean
