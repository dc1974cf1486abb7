"""Training loop tests.

Frozen schedule anchors (steps=103, base lr=0.3, warmup fraction 0.03
-> 3 warmup steps):

* lr(0) = 0.1, lr(1) = 0.2, lr(2) = 0.3  (linear warmup)
* lr(3) = 0.3                            (cosine progress 0)
* lr(53) = 0.15                          (cosine progress 1/2)
"""

import numpy as np
import numpy.testing as npt
import pytest

from memtok.config import RunConfig
from memtok.errors import ConfigError, DivergenceError
from memtok.model import init_model
from memtok.training import (
    ABLATION_HEADER,
    SWEEP_HEADER,
    SWEEP_VALUES,
    evaluate,
    lr_at,
    run_ablation,
    run_sweep,
    train_toy,
)


def tiny_config(**kw):
    base = dict(
        dim=8, num_blocks=2, clip_size=4, memory_size=1, frames=16,
        num_queries=2, text_layers=1, steps=6, batch_size=4, eval_size=8,
        lr=0.05, task="presence", branch="mem", seed=0,
    )
    base.update(kw)
    return RunConfig(**base)


class TestSchedule:
    def test_warmup_anchors(self):
        assert lr_at(0, 103, 0.3) == pytest.approx(0.1)
        assert lr_at(1, 103, 0.3) == pytest.approx(0.2)
        assert lr_at(2, 103, 0.3) == pytest.approx(0.3)

    def test_cosine_anchors(self):
        assert lr_at(3, 103, 0.3) == pytest.approx(0.3)
        assert lr_at(53, 103, 0.3) == pytest.approx(0.15)

    def test_decays_to_small_tail(self):
        assert lr_at(102, 103, 0.3) < 0.01

    def test_monotone_after_warmup(self):
        values = [lr_at(s, 103, 0.3) for s in range(3, 103)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestTrainToy:
    def test_metrics_logged_every_ten_steps(self):
        cfg = tiny_config(steps=25)
        params = init_model(np.random.default_rng(0), cfg.model())
        result = train_toy(params, cfg)
        assert [m.step for m in result.metrics] == [0, 10, 20, 24]
        assert result.steps_run == 25
        assert result.tokens_per_frame == 1
        assert all(0.0 <= m.accuracy <= 1.0 for m in result.metrics)

    def test_same_seed_reproduces_metrics(self):
        cfg = tiny_config(steps=8)
        a = train_toy(init_model(np.random.default_rng(1), cfg.model()), cfg)
        b = train_toy(init_model(np.random.default_rng(1), cfg.model()), cfg)
        npt.assert_array_equal(
            [m.loss for m in a.metrics], [m.loss for m in b.metrics]
        )
        npt.assert_array_equal(
            [m.accuracy for m in a.metrics], [m.accuracy for m in b.metrics]
        )
        assert a.final_accuracy == b.final_accuracy

    def test_align_stage_freezes_text_side_and_head(self):
        cfg = tiny_config(stage="align", steps=4, branch="full", fusion_proj=True)
        params = init_model(np.random.default_rng(2), cfg.model())
        before = {n: t.data.copy() for n, t in params.tensors().items()}
        train_toy(params, cfg)
        reg = params.tensors()
        for name in before:
            if name.startswith(("qformer.", "head.")):
                npt.assert_array_equal(reg[name].data, before[name], err_msg=name)
        assert np.abs(reg["mem.block0.w_q"].data - before["mem.block0.w_q"]).max() > 0
        assert np.abs(reg["adapter.proj_mem"].data - before["adapter.proj_mem"]).max() > 0
        assert np.abs(reg["fusion.proj"].data - before["fusion.proj"]).max() > 0

    def test_instruct_stage_updates_text_side_and_head(self):
        cfg = tiny_config(stage="instruct", steps=4, branch="full")
        params = init_model(np.random.default_rng(3), cfg.model())
        before = {n: t.data.copy() for n, t in params.tensors().items()}
        train_toy(params, cfg)
        reg = params.tensors()
        assert np.abs(reg["head.weight"].data - before["head.weight"]).max() > 0
        assert np.abs(reg["qformer.queries"].data - before["qformer.queries"]).max() > 0

    def test_divergence_aborts_with_diagnostic(self):
        cfg = tiny_config(steps=80, lr=1e6)
        params = init_model(np.random.default_rng(4), cfg.model())
        with pytest.raises(DivergenceError, match="diverged"):
            train_toy(params, cfg)

    def test_odd_batch_size_rejected(self):
        cfg = tiny_config(batch_size=3)
        params = init_model(np.random.default_rng(5), cfg.model())
        with pytest.raises(ConfigError, match="even"):
            train_toy(params, cfg)

    def test_presence_task_is_learnable(self):
        # High-salience events (whole frame painted, low noise) keep plain
        # SGD in a workable loss-scale regime; lr 0.5+ diverges here.
        cfg = tiny_config(
            steps=200, batch_size=8, eval_size=32, lr=0.3,
            signals_per_event=16, noise_scale=0.05,
        )
        params = init_model(np.random.default_rng(6), cfg.model())
        result = train_toy(params, cfg)
        assert result.final_accuracy >= 0.9
        assert result.metrics[-1].accuracy >= 0.9


class TestEvaluate:
    def test_batch_size_does_not_change_accuracy(self):
        cfg = tiny_config()
        params = init_model(np.random.default_rng(7), cfg.model())
        from memtok.tasks import make_dataset

        feats, labels = make_dataset(cfg.task_spec(), 12, seed=11)
        a = evaluate(params, cfg, feats, labels, batch_size=3)
        b = evaluate(params, cfg, feats, labels, batch_size=12)
        assert a == b


class TestAblation:
    def test_three_rows_fixed_header(self):
        cfg = tiny_config(steps=2, eval_size=4, text_layers=1)
        rows = run_ablation(cfg)
        assert ABLATION_HEADER == ["mode", "task", "accuracy", "tokens_per_frame", "wall_time_s"]
        assert [r[0] for r in rows] == ["mem", "txt", "full"]
        assert [r[3] for r in rows] == [1, 1, 2]
        assert all(r[1] == "presence" for r in rows)


class TestSweep:
    def test_clip_size_axis(self):
        cfg = tiny_config(steps=2, eval_size=4)
        rows = run_sweep(cfg, "clip_size")
        assert SWEEP_HEADER == ["axis", "value", "task", "accuracy", "throughput_fps", "tokens_per_frame"]
        assert [r[1] for r in rows] == list(SWEEP_VALUES["clip_size"]) == [4, 8, 16]
        assert all(r[0] == "clip_size" for r in rows)

    def test_memory_size_axis_values(self):
        assert list(SWEEP_VALUES["memory_size"]) == [3, 5, 7]

    def test_unknown_axis(self):
        with pytest.raises(ConfigError, match="axis"):
            run_sweep(tiny_config(), "learning_rate")
