"""Clip compressor with a sliding window of cached clip summaries.

Each transformer block shrinks the spatial grid by 2x per side through
strided pooling of its query/key/value projections, so ``num_blocks``
blocks take a ``2**num_blocks`` square grid per frame down to a single
token per frame.

Blocks keep a bounded FIFO of key/value summaries from the most recent
clips.  A cached entry is always computed from its own clip alone (the
"self" pass below), never from memory-augmented states; this keeps the
receptive field of clip ``t`` exactly ``[t - memory_size, t]`` and makes
the stream reproducible from any window of that length.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, ConfigError, ShapeError
from .tensor import (
    PoolConfig,
    Tensor,
    add,
    concat,
    conv3d_pool,
    gelu,
    layer_norm,
    matmul,
    narrow,
    reshape,
    scale,
    softmax_rows,
    transpose_last2,
    xavier_uniform,
)

__all__ = [
    "BlockParams",
    "CacheEntry",
    "CompressorConfig",
    "MemCacheState",
    "augment_with_cache",
    "block_forward",
    "compress_clip",
    "init_block_params",
    "init_compressor",
    "memory_attention",
    "new_cache_states",
    "pool_qkv",
    "reset_state",
    "scaled_dot_attention",
]


@dataclass(frozen=True)
class CompressorConfig:
    """Geometry and cache policy for the clip compressor."""

    clip_size: int = 8
    memory_size: int = 3
    num_blocks: int = 4
    dim: int = 64
    num_heads: int = 1
    cache_detached: bool = True

    def __post_init__(self):
        for name in ("clip_size", "num_blocks", "dim", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.memory_size < 0:
            raise ConfigError(f"memory_size must be >= 0, got {self.memory_size}")
        if self.dim % self.num_heads != 0:
            raise ConfigError(
                f"dim {self.dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid_side(self) -> int:
        """Frames must arrive as a square grid with this side length."""
        return 2**self.num_blocks


@dataclass
class BlockParams:
    """Weights for one compressor block (all linear maps are bias-free)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    kern_q: Tensor
    kern_k: Tensor
    kern_v: Tensor
    pool_q: PoolConfig
    pool_kv: PoolConfig
    lin_q: Tensor
    lin_k: Tensor
    lin_v: Tensor
    w_out: Tensor
    mlp_in: Tensor
    mlp_out: Tensor
    norm1_g: Tensor
    norm1_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {
            name: value
            for name, value in vars(self).items()
            if isinstance(value, Tensor)
        }


@dataclass
class CacheEntry:
    k: Tensor
    v: Tensor
    clip_index: int


@dataclass
class MemCacheState:
    """FIFO of per-clip key/value summaries for one block."""

    capacity: int
    entries: deque = field(init=False)
    clips_seen: int = field(default=0, init=False)

    def __post_init__(self):
        # maxlen=0 would still accept (and instantly drop) pushes; keep the
        # bookkeeping uniform and let the deque handle eviction.
        self.entries = deque(maxlen=self.capacity)

    def push(self, k: Tensor, v: Tensor) -> None:
        if self.capacity > 0:
            self.entries.append(CacheEntry(k, v, self.clips_seen))
        self.clips_seen += 1


def new_cache_states(config: CompressorConfig) -> list[MemCacheState]:
    return [MemCacheState(config.memory_size) for _ in range(config.num_blocks)]


def reset_state(states: list[MemCacheState]) -> None:
    for state in states:
        state.entries.clear()
        state.clips_seen = 0


_POOL_KERNEL = (3, 3, 3)
_POOL_PADDING = (1, 1, 1)
_SPATIAL_STRIDE = (1, 2, 2)


def init_block_params(rng: np.random.Generator, dim: int) -> BlockParams:
    def square():
        return xavier_uniform(rng, (dim, dim))

    def kernel():
        taps = math.prod(_POOL_KERNEL)
        return xavier_uniform(rng, (dim,) + _POOL_KERNEL, fan_in=taps, fan_out=taps)

    return BlockParams(
        w_q=square(),
        w_k=square(),
        w_v=square(),
        kern_q=kernel(),
        kern_k=kernel(),
        kern_v=kernel(),
        pool_q=PoolConfig(_SPATIAL_STRIDE, _POOL_KERNEL, _POOL_PADDING),
        pool_kv=PoolConfig(_SPATIAL_STRIDE, _POOL_KERNEL, _POOL_PADDING),
        lin_q=square(),
        lin_k=square(),
        lin_v=square(),
        w_out=square(),
        mlp_in=xavier_uniform(rng, (dim, 4 * dim)),
        mlp_out=xavier_uniform(rng, (4 * dim, dim)),
        norm1_g=Tensor(np.ones(dim), requires_grad=True),
        norm1_b=Tensor(np.zeros(dim), requires_grad=True),
        norm2_g=Tensor(np.ones(dim), requires_grad=True),
        norm2_b=Tensor(np.zeros(dim), requires_grad=True),
    )


def init_compressor(
    rng: np.random.Generator, config: CompressorConfig
) -> list[BlockParams]:
    return [init_block_params(rng, config.dim) for _ in range(config.num_blocks)]


def _project_pool(x: Tensor, weight: Tensor, kern: Tensor, pool: PoolConfig) -> Tensor:
    return conv3d_pool(matmul(x, weight), kern, pool)


def pool_qkv(x: Tensor, params: BlockParams) -> tuple[Tensor, Tensor, Tensor]:
    """Project then pool a normalized block input of shape (..., T, H, W, d)."""
    q = _project_pool(x, params.w_q, params.kern_q, params.pool_q)
    k = _project_pool(x, params.w_k, params.kern_k, params.pool_kv)
    v = _project_pool(x, params.w_v, params.kern_v, params.pool_kv)
    return q, k, v


def _flatten_tokens(x: Tensor) -> Tensor:
    """(..., T, H, W, d) -> (..., T*H*W, d), frame-major token order."""
    t, h, w, d = x.shape[-4:]
    return reshape(x, x.shape[:-4] + (t * h * w, d))


def augment_with_cache(
    k: Tensor, v: Tensor, state: MemCacheState
) -> tuple[Tensor, Tensor]:
    """Prepend cached clip summaries (oldest first) along the token axis."""
    if not state.entries:
        return k, v
    ks, vs = [], []
    for entry in state.entries:
        if entry.k.shape != k.shape or entry.v.shape != v.shape:
            raise CacheError(
                f"cached summary from clip {entry.clip_index} has shape "
                f"{entry.k.shape}, current clip produced {k.shape}"
            )
        ks.append(entry.k)
        vs.append(entry.v)
    ks.append(k)
    vs.append(v)
    return concat(ks, axis=-2), concat(vs, axis=-2)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int = 1) -> Tensor:
    """Softmax attention over the token axis, optionally split into heads."""
    dim = q.shape[-1]
    if dim % num_heads != 0:
        raise ConfigError(f"dim {dim} is not divisible by num_heads {num_heads}")
    head_dim = dim // num_heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    if num_heads == 1:
        logits = scale(matmul(q, transpose_last2(k)), inv_sqrt)
        return matmul(softmax_rows(logits), v)
    outs = []
    for h in range(num_heads):
        start = h * head_dim
        qh = narrow(q, -1, start, head_dim)
        kh = narrow(k, -1, start, head_dim)
        vh = narrow(v, -1, start, head_dim)
        logits = scale(matmul(qh, transpose_last2(kh)), inv_sqrt)
        outs.append(matmul(softmax_rows(logits), vh))
    return concat(outs, axis=-1)


def memory_attention(
    q: Tensor, kbar: Tensor, vbar: Tensor, params: BlockParams, config: CompressorConfig
) -> Tensor:
    """Scaled dot-product attention after the block's shared linear maps."""
    qp = matmul(q, params.lin_q)
    kp = matmul(kbar, params.lin_k)
    vp = matmul(vbar, params.lin_v)
    return scaled_dot_attention(qp, kp, vp, config.num_heads)


def _mix_and_refine(
    q_flat: Tensor,
    kbar: Tensor,
    vbar: Tensor,
    params: BlockParams,
    config: CompressorConfig,
    spatial: tuple[int, ...],
) -> Tensor:
    z = memory_attention(q_flat, kbar, vbar, params, config)
    h = add(q_flat, matmul(z, params.w_out))
    hn = layer_norm(h, params.norm2_g, params.norm2_b)
    h = add(h, matmul(gelu(matmul(hn, params.mlp_in)), params.mlp_out))
    return reshape(h, h.shape[:-2] + spatial + (h.shape[-1],))


def block_forward(
    x: Tensor,
    x_self: Tensor,
    state: MemCacheState,
    params: BlockParams,
    config: CompressorConfig,
) -> tuple[Tensor, Tensor]:
    """Run one block over both streams and push this clip's summary.

    ``x_self`` carries the memory-free stream whose pooled keys/values are
    the canonical clip summary: it feeds the FIFO and doubles as the
    current clip's keys/values for the memory-augmented stream ``x``.
    When the cache is empty and the streams coincide the two outputs are
    one and the same computation.
    """
    hn_self = layer_norm(x_self, params.norm1_g, params.norm1_b)
    q_self, k_self, v_self = pool_qkv(hn_self, params)
    spatial = q_self.shape[-4:-1]
    q_self = _flatten_tokens(q_self)
    k_self = _flatten_tokens(k_self)
    v_self = _flatten_tokens(v_self)
    y_self = _mix_and_refine(q_self, k_self, v_self, params, config, spatial)

    if x is x_self and not state.entries:
        y = y_self
    else:
        hn = hn_self if x is x_self else layer_norm(x, params.norm1_g, params.norm1_b)
        q = _flatten_tokens(_project_pool(hn, params.w_q, params.kern_q, params.pool_q))
        kbar, vbar = augment_with_cache(k_self, v_self, state)
        y = _mix_and_refine(q, kbar, vbar, params, config, spatial)

    if config.cache_detached:
        state.push(k_self.detach(), v_self.detach())
    else:
        state.push(k_self, v_self)
    return y, y_self


def compress_clip(
    clip: Tensor,
    states: list[MemCacheState],
    params: list[BlockParams],
    config: CompressorConfig,
) -> Tensor:
    """Compress (..., clip_size, n_patches, d) down to (..., clip_size, 1, d)."""
    if len(states) != config.num_blocks or len(params) != config.num_blocks:
        raise ConfigError(
            f"expected {config.num_blocks} cache states and parameter blocks, "
            f"got {len(states)} and {len(params)}"
        )
    if clip.data.ndim < 3:
        raise ShapeError(f"clip must have rank >= 3, got shape {clip.shape}")
    t_c, n, d = clip.shape[-3:]
    side = config.grid_side
    if t_c != config.clip_size:
        raise ShapeError(f"clip has {t_c} frames, config expects {config.clip_size}")
    if n != side * side:
        raise ShapeError(
            f"clip has {n} patches per frame, expected {side * side} "
            f"(a {side}x{side} grid)"
        )
    if d != config.dim:
        raise ShapeError(f"clip features have dim {d}, config expects {config.dim}")

    x = reshape(clip, clip.shape[:-2] + (side, side, d))
    x_out = x_self = x
    for block, state in zip(params, states):
        x_out, x_self = block_forward(x_out, x_self, state, block, config)
    return reshape(x_out, x_out.shape[:-3] + (1, d))
