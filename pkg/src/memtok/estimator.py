"""Scikit-learn style facade over the whole pipeline.

``VideoTokenCompressor`` wires the clip compressor, the text-conditioned
compressor, fusion, and the linear probe head behind the familiar
``fit`` / ``transform`` / ``predict`` surface so the model can sit in a
sklearn workflow (``clone``, ``get_params``, grid search over the
constructor arguments).

The one departure from sklearn convention: ``X`` is a rank-4 array of
per-frame patch features ``(n_videos, frames, n_patches, dim)``, not a
2-D design matrix.  ``transform`` returns the token sequences
``(n_videos, seq_len, dim_out)``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .errors import ShapeError
from .model import init_model, set_trainable
from .pipeline import run_video_streaming
from .tensor import Tape, Tensor, cross_entropy, gradients
from .textcomp import tokenize
from .training import lr_at, task_logits

__all__ = ["VideoTokenCompressor"]

_PREDICT_BATCH = 32


class VideoTokenCompressor(BaseEstimator, TransformerMixin):
    """Dual-branch video token compressor with a linear probe head.

    Parameters mirror the run-config fields; all are stored verbatim so
    ``get_params``/``set_params``/``clone`` behave as sklearn expects.
    ``prompt`` overrides the task's built-in text prompt; the ``mem``
    branch ignores prompts entirely.
    """

    def __init__(
        self,
        task: str = "presence",
        prompt: str | None = None,
        branch: str = "full",
        layout: str = "interleaved",
        stage: str = "instruct",
        dim: int = 64,
        dim_out: int | None = None,
        num_blocks: int = 4,
        num_heads: int = 1,
        clip_size: int = 8,
        memory_size: int = 3,
        num_queries: int = 8,
        text_layers: int = 2,
        vocab_size: int = 256,
        max_text_tokens: int = 64,
        fusion_proj: bool = False,
        cache_detached: bool = True,
        steps: int = 200,
        lr: float = 0.1,
        batch_size: int = 8,
        seed: int = 0,
    ):
        self.task = task
        self.prompt = prompt
        self.branch = branch
        self.layout = layout
        self.stage = stage
        self.dim = dim
        self.dim_out = dim_out
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.clip_size = clip_size
        self.memory_size = memory_size
        self.num_queries = num_queries
        self.text_layers = text_layers
        self.vocab_size = vocab_size
        self.max_text_tokens = max_text_tokens
        self.fusion_proj = fusion_proj
        self.cache_detached = cache_detached
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    # -- configuration ------------------------------------------------

    def _make_config(self, frames: int, num_classes: int) -> RunConfig:
        return RunConfig(
            task=self.task,
            branch=self.branch,
            layout=self.layout,
            stage=self.stage,
            dim=self.dim,
            dim_out=self.dim_out,
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            clip_size=self.clip_size,
            memory_size=self.memory_size,
            num_queries=self.num_queries,
            text_layers=self.text_layers,
            vocab_size=self.vocab_size,
            max_text_tokens=self.max_text_tokens,
            fusion_proj=self.fusion_proj,
            cache_detached=self.cache_detached,
            steps=self.steps,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=self.seed,
            frames=frames,
            num_classes=num_classes,
        )

    def _text_ids(self, config: RunConfig):
        if self.branch == "mem":
            return None
        if self.prompt is not None:
            return tokenize(self.prompt, config.model().text())
        from .tasks import task_prompt

        return tokenize(task_prompt(config.task_spec()), config.model().text())

    def _check_features(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim != 4:
            raise ShapeError(
                f"X must be (n_videos, frames, n_patches, dim), got shape {X.shape}"
            )
        side = 2**self.num_blocks
        if X.shape[2] != side * side:
            raise ShapeError(
                f"X has {X.shape[2]} patches per frame, expected {side * side}"
            )
        if X.shape[3] != self.dim:
            raise ShapeError(f"X has feature dim {X.shape[3]}, expected {self.dim}")
        return X

    # -- sklearn surface ----------------------------------------------

    def fit(self, X, y):
        """SGD over minibatches of ``(X, y)`` with warmup + cosine decay."""
        X = self._check_features(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ShapeError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        if y.min() < 0:
            raise ShapeError("labels must be non-negative integers")
        n_classes = max(2, int(y.max()) + 1)

        config = self._make_config(frames=X.shape[1], num_classes=n_classes)
        rng = np.random.default_rng(self.seed)
        params = init_model(rng, config.model())
        trainable_names = set(set_trainable(params, self.stage))
        registry = params.tensors()
        trainable = [registry[name] for name in sorted(trainable_names)]
        text_ids = self._text_ids(config)

        batch = min(self.batch_size, len(X))
        losses = []
        step = 0
        while step < self.steps:
            perm = rng.permutation(len(X))
            for start in range(0, len(X) - batch + 1, batch):
                if step >= self.steps:
                    break
                idx = perm[start : start + batch]
                with Tape() as tape:
                    logits, _ = task_logits(Tensor(X[idx]), text_ids, params, config)
                    loss = cross_entropy(logits, y[idx])
                grads = gradients(tape, loss, trainable)
                rate = lr_at(step, self.steps, self.lr)
                for tensor, grad in zip(trainable, grads):
                    tensor.data -= (rate * grad.data).astype(tensor.data.dtype, copy=False)
                losses.append(float(loss.data))
                step += 1

        self.params_ = params
        self.config_ = config
        self.text_ids_ = text_ids
        self.classes_ = np.arange(n_classes)
        self.loss_curve_ = losses
        return self

    def transform(self, X) -> np.ndarray:
        """Token sequences for each video, ``(n_videos, seq_len, dim_out)``."""
        check_is_fitted(self, "params_")
        X = self._check_features(X)
        chunks = []
        for start in range(0, len(X), _PREDICT_BATCH):
            result = run_video_streaming(
                Tensor(X[start : start + _PREDICT_BATCH]),
                self.text_ids_,
                self.params_,
                self.config_.model(),
                branch=self.branch,
                layout=self.layout,
            )
            chunks.append(result.sequence.tokens.data)
        return np.concatenate(chunks, axis=0)

    def predict(self, X) -> np.ndarray:
        """Argmax class labels from the probe head."""
        check_is_fitted(self, "params_")
        X = self._check_features(X)
        preds = []
        for start in range(0, len(X), _PREDICT_BATCH):
            logits, _ = task_logits(
                Tensor(X[start : start + _PREDICT_BATCH]),
                self.text_ids_, self.params_, self.config_,
            )
            preds.append(np.argmax(logits.data, axis=-1))
        return np.concatenate(preds, axis=0)

    def score(self, X, y) -> float:
        """Mean accuracy of ``predict`` against ``y``."""
        y = np.asarray(y, dtype=np.int64)
        return float((self.predict(X) == y).mean())
