"""Text-conditioned frame compressor and parameter-free token fusion.

A small stack of query-transformer layers distills each frame's patch
tokens into a handful of query tokens, steered by a text prompt:

* the learnable queries and the embedded text form one joint sequence
  that mixes through bidirectional self-attention,
* only the query positions then cross-attend into the frame's patches
  (keys and values are bias-free linear maps of the raw patch features),
* an MLP refines every position, and after the last layer only the
  query positions are returned.

Frames never see each other: the same queries and text are broadcast
over the frame axis and all attention happens within a frame.

``cross_attn_fuse`` then reconciles each frame's candidate tokens with a
guidance token using nothing but dot products: the fused output is a
softmax-weighted average of the candidates, so it always stays in their
convex hull, and a single candidate passes through unchanged.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .memory import scaled_dot_attention
from .tensor import (
    Tensor,
    add,
    concat,
    embedding,
    expand0,
    gelu,
    layer_norm,
    matmul,
    mean_axis,
    narrow,
    reshape,
    scale,
    softmax_rows,
    transpose_last2,
    xavier_uniform,
)

__all__ = [
    "QFormerLayerParams",
    "QFormerLiteParams",
    "TextCompressorConfig",
    "compress_frames",
    "cross_attn_fuse",
    "init_qformer",
    "pool_queries",
    "tokenize",
]


@dataclass(frozen=True)
class TextCompressorConfig:
    dim: int = 64
    num_queries: int = 8
    num_layers: int = 2
    vocab_size: int = 256
    max_text_tokens: int = 64
    num_heads: int = 1

    def __post_init__(self):
        for name in (
            "dim",
            "num_queries",
            "num_layers",
            "vocab_size",
            "max_text_tokens",
            "num_heads",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.num_heads != 0:
            raise ConfigError(
                f"dim {self.dim} is not divisible by num_heads {self.num_heads}"
            )


@dataclass
class QFormerLayerParams:
    sa_q: Tensor
    sa_k: Tensor
    sa_v: Tensor
    sa_o: Tensor
    ca_q: Tensor
    ca_k: Tensor
    ca_v: Tensor
    ca_o: Tensor
    mlp_in: Tensor
    mlp_out: Tensor
    norm_sa_g: Tensor
    norm_sa_b: Tensor
    norm_ca_g: Tensor
    norm_ca_b: Tensor
    norm_mlp_g: Tensor
    norm_mlp_b: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {
            name: value
            for name, value in vars(self).items()
            if isinstance(value, Tensor)
        }


@dataclass
class QFormerLiteParams:
    queries: Tensor
    vocab: Tensor
    layers: list[QFormerLayerParams]

    def tensors(self) -> dict[str, Tensor]:
        out = {"queries": self.queries, "vocab": self.vocab}
        for i, layer in enumerate(self.layers):
            for name, value in layer.tensors().items():
                out[f"layer{i}.{name}"] = value
        return out


def init_qformer(
    rng: np.random.Generator, config: TextCompressorConfig
) -> QFormerLiteParams:
    d = config.dim

    def layer():
        def square():
            return xavier_uniform(rng, (d, d))

        return QFormerLayerParams(
            sa_q=square(),
            sa_k=square(),
            sa_v=square(),
            sa_o=square(),
            ca_q=square(),
            ca_k=square(),
            ca_v=square(),
            ca_o=square(),
            mlp_in=xavier_uniform(rng, (d, 4 * d)),
            mlp_out=xavier_uniform(rng, (4 * d, d)),
            norm_sa_g=Tensor(np.ones(d), requires_grad=True),
            norm_sa_b=Tensor(np.zeros(d), requires_grad=True),
            norm_ca_g=Tensor(np.ones(d), requires_grad=True),
            norm_ca_b=Tensor(np.zeros(d), requires_grad=True),
            norm_mlp_g=Tensor(np.ones(d), requires_grad=True),
            norm_mlp_b=Tensor(np.zeros(d), requires_grad=True),
        )

    return QFormerLiteParams(
        queries=xavier_uniform(rng, (config.num_queries, d)),
        vocab=xavier_uniform(rng, (config.vocab_size, d)),
        layers=[layer() for _ in range(config.num_layers)],
    )


def tokenize(text: str, config: TextCompressorConfig) -> np.ndarray:
    """Hash whitespace-separated words into vocabulary ids."""
    words = text.split()
    if not words:
        raise ConfigError("text prompt is empty")
    words = words[: config.max_text_tokens]
    ids = [zlib.crc32(w.encode("utf-8")) % config.vocab_size for w in words]
    return np.asarray(ids, dtype=np.int64)


def _qformer_layer(
    seq: Tensor,
    patches: Tensor,
    layer: QFormerLayerParams,
    config: TextCompressorConfig,
) -> Tensor:
    n_q = config.num_queries
    n_txt = seq.shape[-2] - n_q

    sn = layer_norm(seq, layer.norm_sa_g, layer.norm_sa_b)
    attn = scaled_dot_attention(
        matmul(sn, layer.sa_q),
        matmul(sn, layer.sa_k),
        matmul(sn, layer.sa_v),
        config.num_heads,
    )
    seq = add(seq, matmul(attn, layer.sa_o))

    q_rows = narrow(seq, -2, 0, n_q)
    qn = layer_norm(q_rows, layer.norm_ca_g, layer.norm_ca_b)
    cross = scaled_dot_attention(
        matmul(qn, layer.ca_q),
        matmul(patches, layer.ca_k),
        matmul(patches, layer.ca_v),
        config.num_heads,
    )
    q_rows = add(q_rows, matmul(cross, layer.ca_o))
    seq = concat([q_rows, narrow(seq, -2, n_q, n_txt)], axis=-2)

    mn = layer_norm(seq, layer.norm_mlp_g, layer.norm_mlp_b)
    return add(seq, matmul(gelu(matmul(mn, layer.mlp_in)), layer.mlp_out))


def compress_frames(
    frames: Tensor,
    text_ids: np.ndarray,
    params: QFormerLiteParams,
    config: TextCompressorConfig,
) -> Tensor:
    """Distill (T, n_patches, d) frames into (T, num_queries, d) tokens."""
    if frames.data.ndim != 3:
        raise ShapeError(f"frames must have rank 3, got shape {frames.shape}")
    n_frames, _, d = frames.shape
    if d != config.dim:
        raise ShapeError(f"frame features have dim {d}, config expects {config.dim}")
    ids = np.asarray(text_ids)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError(f"text ids must be a non-empty vector, got shape {ids.shape}")

    text_emb = embedding(params.vocab, ids)
    seq = expand0(concat([params.queries, text_emb], axis=0), n_frames)
    for layer in params.layers:
        seq = _qformer_layer(seq, frames, layer, config)
    return narrow(seq, -2, 0, config.num_queries)


def cross_attn_fuse(guide: Tensor, candidates: Tensor, proj: Tensor | None = None) -> Tensor:
    """Blend candidate tokens (..., n, d) under a guidance token (..., 1, d).

    The guidance token scores each candidate by scaled dot product and the
    output is the softmax-weighted average — a parameter-free convex
    combination of the candidates.  With ``proj`` given, the blend is
    passed through one extra linear map.
    """
    if guide.shape[-1] != candidates.shape[-1]:
        raise ShapeError(
            f"guidance dim {guide.shape[-1]} != candidate dim {candidates.shape[-1]}"
        )
    if guide.shape[-2] != 1:
        raise ShapeError(f"guide must carry one token, got shape {guide.shape}")
    d = guide.shape[-1]
    logits = scale(matmul(guide, transpose_last2(candidates)), 1.0 / math.sqrt(d))
    fused = matmul(softmax_rows(logits), candidates)
    if proj is not None:
        fused = matmul(fused, proj)
    return fused


def pool_queries(candidates: Tensor) -> Tensor:
    """Average (..., n, d) candidate tokens into a single (..., 1, d) token."""
    pooled = mean_axis(candidates, axis=-2)
    return reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1]))
