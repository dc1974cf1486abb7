"""Streaming orchestration tests.

Hand-derived anchors:

* sequence lengths: branch "full" emits 2 tokens per frame, "mem" and
  "txt" emit 1; a 12-frame video with 8-frame clips pads to 16 frames
  internally but still yields 12 frames of tokens (24 in "full")
* interleaved layout is [clip, perceiver, clip, perceiver, ...] per
  frame; blocked layout is all clip tokens then all perceiver tokens
* with a single query token the fusion step is an exact pass-through,
  so the perceiver stream equals the projected text-compressor tokens
* the from-scratch window recomputation must match the streaming run
  bit-for-bit on every clip
"""

import numpy as np
import numpy.testing as npt
import pytest

from memtok.errors import ConfigError, ShapeError
from memtok.gradcheck import finite_diff_check
from memtok.model import ModelConfig, init_model
from memtok.pipeline import (
    TokenSequence,
    assemble_sequence,
    project_tokens,
    run_video_streaming,
    windowed_oracle,
)
from memtok.tensor import Tensor, precision, sum_all
from memtok.textcomp import tokenize


def small_config(**kw):
    base = dict(
        dim=6, clip_size=2, memory_size=1, num_blocks=2,
        num_queries=2, text_layers=1,
    )
    base.update(kw)
    return ModelConfig(**base)


def make_video(cfg, frames, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    n = (2**cfg.num_blocks) ** 2
    return Tensor(rng.normal(size=(frames, n, cfg.dim)), dtype=dtype)


def setup(frames=4, seed=0, **kw):
    cfg = small_config(**kw)
    params = init_model(np.random.default_rng(1), cfg)
    video = make_video(cfg, frames, seed=seed)
    ids = tokenize("watch the red block", cfg.text())
    return cfg, params, video, ids


class TestProjectTokens:
    def test_matches_plain_matmul(self):
        rng = np.random.default_rng(0)
        tokens = Tensor(rng.normal(size=(3, 4)))
        proj = Tensor(rng.normal(size=(4, 4)))
        npt.assert_array_equal(project_tokens(tokens, proj).data, tokens.data @ proj.data)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            project_tokens(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 4))))


class TestAssembleSequence:
    def _streams(self):
        rng = np.random.default_rng(1)
        f_m = Tensor(rng.normal(size=(3, 1, 4)))
        f_p = Tensor(rng.normal(size=(3, 1, 4)))
        return f_m, f_p

    def test_interleaved_order_and_provenance(self):
        f_m, f_p = self._streams()
        seq = assemble_sequence(f_m, f_p, "interleaved")
        assert seq.tokens.shape == (6, 4)
        assert seq.provenance == ("mem", "perc") * 3
        npt.assert_array_equal(seq.tokens.data[0], f_m.data[0, 0])
        npt.assert_array_equal(seq.tokens.data[1], f_p.data[0, 0])
        npt.assert_array_equal(seq.tokens.data[4], f_m.data[2, 0])

    def test_blocked_order_and_provenance(self):
        f_m, f_p = self._streams()
        seq = assemble_sequence(f_m, f_p, "blocked")
        assert seq.provenance == ("mem",) * 3 + ("perc",) * 3
        npt.assert_array_equal(seq.tokens.data[:3], f_m.data[:, 0])
        npt.assert_array_equal(seq.tokens.data[3:], f_p.data[:, 0])

    def test_unknown_layout(self):
        f_m, f_p = self._streams()
        with pytest.raises(ConfigError, match="layout"):
            assemble_sequence(f_m, f_p, "shuffled")

    def test_frame_count_mismatch(self):
        f_m, _ = self._streams()
        with pytest.raises(ShapeError):
            assemble_sequence(f_m, Tensor(np.zeros((4, 1, 4))), "interleaved")


class TestBranches:
    def test_full_emits_two_tokens_per_frame(self):
        cfg, params, video, ids = setup(frames=4)
        res = run_video_streaming(video, ids, params, cfg, branch="full")
        assert res.sequence.tokens.shape == (8, 6)
        assert res.sequence.frames == 4
        assert res.sequence.tokens_per_frame == 2
        assert res.mem_tokens.shape == (4, 1, 6)
        assert res.text_tokens.shape == (4, 2, 6)
        assert res.fused.shape == (4, 1, 6)

    def test_mem_branch_skips_text_side(self):
        cfg, params, video, _ = setup(frames=4)
        res = run_video_streaming(video, None, params, cfg, branch="mem")
        assert res.sequence.tokens.shape == (4, 6)
        assert res.sequence.provenance == ("mem",) * 4
        assert res.text_tokens is None and res.fused is None
        expect = res.mem_tokens.data[:, 0] @ params.proj_mem.data
        npt.assert_allclose(res.sequence.tokens.data, expect, atol=1e-6)

    def test_txt_branch_pools_queries(self):
        cfg, params, video, ids = setup(frames=3)
        res = run_video_streaming(video, ids, params, cfg, branch="txt")
        assert res.sequence.tokens.shape == (3, 6)
        assert res.sequence.provenance == ("perc",) * 3
        assert res.mem_tokens is None and res.fused is None
        pooled = res.text_tokens.data.mean(axis=1)
        npt.assert_allclose(res.sequence.tokens.data, pooled @ params.proj_text.data, atol=1e-5)

    def test_single_query_fusion_is_passthrough(self):
        cfg, params, video, ids = setup(frames=4, num_queries=1)
        res = run_video_streaming(video, ids, params, cfg, branch="full")
        projected = res.text_tokens.data @ params.proj_text.data
        npt.assert_array_equal(res.fused.data, projected)

    def test_partial_clip_is_padded_then_trimmed(self):
        cfg, params, video, ids = setup(frames=3)  # clip_size=2 -> pads to 4
        res = run_video_streaming(video, ids, params, cfg, branch="full")
        assert res.sequence.tokens.shape == (6, 6)
        assert res.mem_tokens.shape == (3, 1, 6)

    def test_text_required_outside_mem_branch(self):
        cfg, params, video, _ = setup()
        with pytest.raises(ConfigError, match="text"):
            run_video_streaming(video, None, params, cfg, branch="txt")
        with pytest.raises(ConfigError, match="text"):
            run_video_streaming(video, None, params, cfg, branch="full")

    def test_unknown_branch(self):
        cfg, params, video, ids = setup()
        with pytest.raises(ConfigError, match="branch"):
            run_video_streaming(video, ids, params, cfg, branch="both")

    def test_wrong_patch_count(self):
        cfg, params, _, ids = setup()
        bad = Tensor(np.zeros((4, 9, 6)))
        with pytest.raises(ShapeError):
            run_video_streaming(bad, ids, params, cfg)

    def test_batched_matches_unbatched(self):
        cfg, params, _, ids = setup()
        videos = [make_video(cfg, 4, seed=s) for s in (3, 4)]
        stacked = Tensor(np.stack([v.data for v in videos]))
        batch = run_video_streaming(stacked, ids, params, cfg, branch="full")
        assert batch.sequence.tokens.shape == (2, 8, 6)
        for i, video in enumerate(videos):
            single = run_video_streaming(video, ids, params, cfg, branch="full")
            npt.assert_allclose(
                batch.sequence.tokens.data[i], single.sequence.tokens.data, atol=1e-5
            )

    def test_streaming_is_bit_repeatable(self):
        cfg, params, video, ids = setup(frames=6)
        a = run_video_streaming(video, ids, params, cfg, branch="full")
        b = run_video_streaming(video, ids, params, cfg, branch="full")
        npt.assert_array_equal(a.sequence.tokens.data, b.sequence.tokens.data)

    def test_adapters_map_into_output_dim(self):
        cfg, params, video, ids = setup(frames=4, dim_out=9)
        res = run_video_streaming(video, ids, params, cfg, branch="full")
        assert res.sequence.tokens.shape == (8, 9)
        assert res.fused.shape == (4, 1, 9)
        assert res.mem_tokens.shape == (4, 1, 6)  # raw stream stays in model dim


class TestWindowedOracle:
    def test_matches_streaming_on_every_clip(self):
        cfg, params, video, ids = setup(frames=10, seed=7, memory_size=2)
        res = run_video_streaming(video, ids, params, cfg, branch="mem")
        t_c = cfg.clip_size
        for clip_index in range(5):
            window_out = windowed_oracle(video, params, cfg, clip_index)
            streamed = res.mem_tokens.data[clip_index * t_c : (clip_index + 1) * t_c]
            npt.assert_array_equal(window_out.data, streamed)

    def test_first_clip_needs_no_history(self):
        cfg, params, video, ids = setup(frames=8, seed=8, memory_size=3)
        alone = windowed_oracle(
            Tensor(video.data[: cfg.clip_size].copy()), params, cfg, 0
        )
        full = windowed_oracle(video, params, cfg, 0)
        npt.assert_array_equal(alone.data, full.data)

    def test_edits_outside_window_are_invisible(self):
        cfg, params, video, _ = setup(frames=10, seed=9, memory_size=1)
        base = windowed_oracle(video, params, cfg, 4)
        edited = video.data.copy()
        edited[: 2 * cfg.clip_size] = 0.0  # clips 0-1; window of clip 4 is {3, 4}
        out = windowed_oracle(Tensor(edited), params, cfg, 4)
        npt.assert_array_equal(out.data, base.data)

    def test_clip_index_out_of_range(self):
        cfg, params, video, _ = setup(frames=4)
        with pytest.raises(ConfigError, match="clip"):
            windowed_oracle(video, params, cfg, 5)


class TestGradientFlow:
    def test_full_branch_gradients_match_finite_differences(self):
        with precision("f64"):
            cfg = small_config(cache_detached=False)
            params = init_model(np.random.default_rng(1), cfg)
            video = make_video(cfg, 4, seed=10, dtype=np.float64)
            ids = tokenize("hello", cfg.text())

            def loss(_p):
                res = run_video_streaming(video, ids, params, cfg, branch="full")
                return sum_all(res.sequence.tokens)

            for name in ("adapter.proj_mem", "mem.block0.w_k", "qformer.layer0.ca_k"):
                report = finite_diff_check(loss, params.tensors()[name], max_coords=8)
                assert report.max_rel_err < 1e-6, (name, report)
