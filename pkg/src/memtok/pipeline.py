"""Streaming video-to-token orchestration.

A video arrives as per-frame patch features ``(..., T, n_patches, d)``.
The pipeline zero-pads the frame axis up to whole clips, streams the
clips through the clip compressor (one shared FIFO per block), runs the
text-conditioned compressor over individual frames, reconciles the two
streams with parameter-free fusion, and lays the per-frame tokens out
as a single sequence.

``windowed_oracle`` answers the same question a different way: it
recomputes one clip's tokens from scratch using nothing but the clips
inside that clip's attention window, with explicit lists instead of the
streaming cache.  The two must agree bit-for-bit; tests and the
acceptance suite hold them to that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .memory import (
    BlockParams,
    CompressorConfig,
    compress_clip,
    new_cache_states,
    scaled_dot_attention,
)
from .model import ModelConfig, ModelParams
from .tensor import (
    Tensor,
    add,
    concat,
    conv3d_pool,
    gelu,
    layer_norm,
    matmul,
    narrow,
    reshape,
)
from .textcomp import compress_frames, cross_attn_fuse, pool_queries

__all__ = [
    "PipelineResult",
    "TokenSequence",
    "assemble_sequence",
    "project_tokens",
    "run_video_streaming",
    "windowed_oracle",
]

_BRANCHES = ("mem", "txt", "full")
_LAYOUTS = ("interleaved", "blocked")


@dataclass
class TokenSequence:
    """Final token stream handed to a downstream consumer."""

    tokens: Tensor  # (..., length, d)
    provenance: tuple[str, ...]  # "mem" or "perc" per position
    layout: str
    frames: int

    @property
    def tokens_per_frame(self) -> int:
        return len(self.provenance) // self.frames


@dataclass
class PipelineResult:
    sequence: TokenSequence
    mem_tokens: Tensor | None  # raw clip-compressor output (..., T, 1, d)
    text_tokens: Tensor | None  # raw query tokens (..., T, num_queries, d)
    fused: Tensor | None  # perceiver stream after adapters and fusion


def project_tokens(tokens: Tensor, proj: Tensor) -> Tensor:
    """Apply a bias-free linear adapter to (..., n, d) tokens."""
    if tokens.shape[-1] != proj.shape[-2]:
        raise ShapeError(
            f"tokens have dim {tokens.shape[-1]}, projection expects {proj.shape[-2]}"
        )
    return matmul(tokens, proj)


def assemble_sequence(f_m: Tensor, f_p: Tensor, layout: str) -> TokenSequence:
    """Merge per-frame (..., T, 1, d) streams into one token sequence."""
    if layout not in _LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}, expected interleaved|blocked")
    if f_m.shape != f_p.shape:
        raise ShapeError(f"stream shapes differ: {f_m.shape} vs {f_p.shape}")
    t, _, d = f_m.shape[-3:]
    lead = f_m.shape[:-3]
    if layout == "interleaved":
        pairs = concat([f_m, f_p], axis=-2)  # (..., T, 2, d)
        tokens = reshape(pairs, lead + (2 * t, d))
        provenance = ("mem", "perc") * t
    else:
        tokens = concat([reshape(f_m, lead + (t, d)), reshape(f_p, lead + (t, d))], axis=-2)
        provenance = ("mem",) * t + ("perc",) * t
    return TokenSequence(tokens, provenance, layout, t)


def _single_stream(tokens: Tensor, kind: str, layout: str) -> TokenSequence:
    t, _, d = tokens.shape[-3:]
    flat = reshape(tokens, tokens.shape[:-3] + (t, d))
    return TokenSequence(flat, (kind,) * t, layout, t)


def _check_features(features: Tensor, config: ModelConfig) -> None:
    if features.data.ndim not in (3, 4):
        raise ShapeError(f"features must have rank 3 or 4, got shape {features.shape}")
    t, n, d = features.shape[-3:]
    side = 2**config.num_blocks
    if n != side * side:
        raise ShapeError(
            f"features have {n} patches per frame, expected {side * side} "
            f"(a {side}x{side} grid)"
        )
    if d != config.dim:
        raise ShapeError(f"features have dim {d}, config expects {config.dim}")
    if t < 1:
        raise ShapeError("video has no frames")


def _pad_to_clips(features: Tensor, clip_size: int) -> tuple[Tensor, int]:
    t = features.shape[-3]
    pad = (-t) % clip_size
    if pad:
        zeros = Tensor(
            np.zeros(
                features.shape[:-3] + (pad,) + features.shape[-2:],
                dtype=features.data.dtype,
            )
        )
        features = concat([features, zeros], axis=-3)
    return features, (t + pad) // clip_size


def _stream_clips(
    features: Tensor, blocks: list[BlockParams], ccfg: CompressorConfig
) -> Tensor:
    """Run the clip compressor over a whole video, trimming padded frames."""
    t = features.shape[-3]
    padded, n_clips = _pad_to_clips(features, ccfg.clip_size)
    states = new_cache_states(ccfg)
    outs = []
    for c in range(n_clips):
        clip = narrow(padded, -3, c * ccfg.clip_size, ccfg.clip_size)
        outs.append(compress_clip(clip, states, blocks, ccfg))
    tokens = outs[0] if n_clips == 1 else concat(outs, axis=-3)
    if tokens.shape[-3] != t:
        tokens = narrow(tokens, -3, 0, t)
    return tokens


def run_video_streaming(
    features: Tensor,
    text_ids: np.ndarray | None,
    params: ModelParams,
    config: ModelConfig,
    branch: str = "full",
    layout: str = "interleaved",
) -> PipelineResult:
    """Compress a video (optionally batched) into its token sequence."""
    if branch not in _BRANCHES:
        raise ConfigError(f"unknown branch {branch!r}, expected mem|txt|full")
    if layout not in _LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}, expected interleaved|blocked")
    _check_features(features, config)
    if branch != "mem" and text_ids is None:
        raise ConfigError(f"branch {branch!r} requires text ids")

    mem_tokens = text_tokens = fused = None
    if branch in ("mem", "full"):
        mem_tokens = _stream_clips(features, params.blocks, config.compressor())
    if branch in ("txt", "full"):
        if features.data.ndim == 3:
            text_tokens = compress_frames(features, text_ids, params.qformer, config.text())
        else:
            b, t, n, d = features.shape
            flat = reshape(features, (b * t, n, d))
            out = compress_frames(flat, text_ids, params.qformer, config.text())
            text_tokens = reshape(out, (b, t) + out.shape[-2:])

    if branch == "mem":
        stream = project_tokens(mem_tokens, params.proj_mem)
        sequence = _single_stream(stream, "mem", layout)
    elif branch == "txt":
        stream = project_tokens(pool_queries(text_tokens), params.proj_text)
        sequence = _single_stream(stream, "perc", layout)
    else:
        guide = project_tokens(mem_tokens, params.proj_mem)
        candidates = project_tokens(text_tokens, params.proj_text)
        fused = cross_attn_fuse(guide, candidates, proj=params.fusion)
        sequence = assemble_sequence(guide, fused, layout)
    return PipelineResult(sequence, mem_tokens, text_tokens, fused)


def _flatten_grid_tokens(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    t, h, w, d = x.shape[-4:]
    return reshape(x, x.shape[:-4] + (t * h * w, d)), (t, h, w)


def _oracle_refine(
    q: Tensor,
    kbar: Tensor,
    vbar: Tensor,
    p: BlockParams,
    num_heads: int,
    spatial: tuple[int, ...],
) -> Tensor:
    z = scaled_dot_attention(
        matmul(q, p.lin_q), matmul(kbar, p.lin_k), matmul(vbar, p.lin_v), num_heads
    )
    h = add(q, matmul(z, p.w_out))
    hn = layer_norm(h, p.norm2_g, p.norm2_b)
    h = add(h, matmul(gelu(matmul(hn, p.mlp_in)), p.mlp_out))
    return reshape(h, h.shape[:-2] + spatial + (h.shape[-1],))


def _oracle_self_summaries(
    x: Tensor, blocks: list[BlockParams], ccfg: CompressorConfig
) -> list[tuple[Tensor, Tensor]]:
    """Memory-free ladder over one clip, collecting each block's (k, v)."""
    summaries = []
    for p in blocks:
        hn = layer_norm(x, p.norm1_g, p.norm1_b)
        q = conv3d_pool(matmul(hn, p.w_q), p.kern_q, p.pool_q)
        k = conv3d_pool(matmul(hn, p.w_k), p.kern_k, p.pool_kv)
        v = conv3d_pool(matmul(hn, p.w_v), p.kern_v, p.pool_kv)
        q, spatial = _flatten_grid_tokens(q)
        k, _ = _flatten_grid_tokens(k)
        v, _ = _flatten_grid_tokens(v)
        summaries.append((k, v))
        x = _oracle_refine(q, k, v, p, ccfg.num_heads, spatial)
    return summaries


def windowed_oracle(
    features: Tensor, params: ModelParams, config: ModelConfig, clip_index: int
) -> Tensor:
    """Recompute one clip's tokens from only the clips in its window.

    Independent of the streaming cache: the window ``[clip_index - M,
    clip_index]`` is enumerated explicitly, each earlier clip's key/value
    summaries are rebuilt from that clip alone, and the target clip
    attends over plain concatenated lists.
    """
    _check_features(features, config)
    ccfg = config.compressor()
    t, _, d = features.shape[-3:]
    t_c = ccfg.clip_size
    n_clips = (t + t_c - 1) // t_c
    if not 0 <= clip_index < n_clips:
        raise ConfigError(
            f"clip index {clip_index} out of range, video has {n_clips} clips"
        )

    data = np.asarray(features.data)
    pad = (-t) % t_c
    if pad:
        zeros = np.zeros(data.shape[:-3] + (pad,) + data.shape[-2:], dtype=data.dtype)
        data = np.concatenate([data, zeros], axis=-3)
    side = ccfg.grid_side

    def clip_grid(c: int) -> Tensor:
        clip = data[..., c * t_c : (c + 1) * t_c, :, :]
        return Tensor(clip.reshape(clip.shape[:-2] + (side, side, d)).copy())

    start = max(0, clip_index - ccfg.memory_size)
    earlier = [
        _oracle_self_summaries(clip_grid(c), params.blocks, ccfg)
        for c in range(start, clip_index)
    ]
    own = _oracle_self_summaries(clip_grid(clip_index), params.blocks, ccfg)

    x = clip_grid(clip_index)
    for b, p in enumerate(params.blocks):
        hn = layer_norm(x, p.norm1_g, p.norm1_b)
        q = conv3d_pool(matmul(hn, p.w_q), p.kern_q, p.pool_q)
        q, spatial = _flatten_grid_tokens(q)
        ks = [s[b][0] for s in earlier] + [own[b][0]]
        vs = [s[b][1] for s in earlier] + [own[b][1]]
        kbar = ks[0] if len(ks) == 1 else concat(ks, axis=-2)
        vbar = vs[0] if len(vs) == 1 else concat(vs, axis=-2)
        x = _oracle_refine(q, kbar, vbar, p, ccfg.num_heads, spatial)
    return reshape(x, x.shape[:-3] + (1, d))
