"""Full model assembly: parameter registry, stage freezing, checkpoints.

Every learnable tensor lives under a dotted name:

* ``mem.block{i}.*``      clip compressor blocks
* ``qformer.*``           text-conditioned compressor (queries, vocab, layers)
* ``adapter.proj_mem``    linear adapter on clip-compressor tokens
* ``adapter.proj_text``   linear adapter on text-compressor tokens
* ``head.*``              toy classification head
* ``fusion.proj``         optional projection after token fusion

Checkpoints are a flat little-endian container: magic ``VCCK``, a format
version, the model config as JSON, then one length-prefixed record per
tensor (name, dtype code, rank, extents, raw row-major scalars), sorted
by name so identical models serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, FormatError
from .memory import BlockParams, CompressorConfig, init_block_params
from .tensor import Tensor, xavier_uniform
from .textcomp import QFormerLiteParams, TextCompressorConfig, init_qformer

__all__ = [
    "ModelConfig",
    "ModelParams",
    "apply_checkpoint",
    "init_model",
    "load_checkpoint",
    "load_model",
    "save_checkpoint",
    "set_trainable",
    "trainable_names",
]

_MAGIC = b"VCCK"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

_STAGES = {
    "align": ("mem.", "adapter.", "fusion."),
    "instruct": ("mem.", "adapter.", "fusion.", "qformer.", "head."),
}


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-parameters shared by both compressors and the adapters."""

    dim: int = 64
    dim_out: int | None = None  # adapter output dim; defaults to dim
    clip_size: int = 8
    memory_size: int = 3
    num_blocks: int = 4
    num_heads: int = 1
    cache_detached: bool = True
    num_queries: int = 8
    text_layers: int = 2
    vocab_size: int = 256
    max_text_tokens: int = 64
    fusion_proj: bool = False
    num_classes: int = 2

    def __post_init__(self):
        if self.dim_out is None:
            object.__setattr__(self, "dim_out", self.dim)
        if self.dim_out < 1:
            raise ConfigError(f"dim_out must be positive, got {self.dim_out}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        # delegate the remaining validation to the sub-configs
        self.compressor()
        self.text()

    def compressor(self) -> CompressorConfig:
        return CompressorConfig(
            clip_size=self.clip_size,
            memory_size=self.memory_size,
            num_blocks=self.num_blocks,
            dim=self.dim,
            num_heads=self.num_heads,
            cache_detached=self.cache_detached,
        )

    def text(self) -> TextCompressorConfig:
        return TextCompressorConfig(
            dim=self.dim,
            num_queries=self.num_queries,
            num_layers=self.text_layers,
            vocab_size=self.vocab_size,
            max_text_tokens=self.max_text_tokens,
            num_heads=self.num_heads,
        )


@dataclass
class ModelParams:
    blocks: list[BlockParams]
    qformer: QFormerLiteParams
    proj_mem: Tensor
    proj_text: Tensor
    head_w: Tensor
    head_b: Tensor
    fusion: Tensor | None = None

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            for name, t in block.tensors().items():
                out[f"mem.block{i}.{name}"] = t
        for name, t in self.qformer.tensors().items():
            out[f"qformer.{name}"] = t
        out["adapter.proj_mem"] = self.proj_mem
        out["adapter.proj_text"] = self.proj_text
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        if self.fusion is not None:
            out["fusion.proj"] = self.fusion
        return out


def init_model(rng: np.random.Generator, config: ModelConfig) -> ModelParams:
    d, d_out = config.dim, config.dim_out
    blocks = [init_block_params(rng, d) for _ in range(config.num_blocks)]
    qformer = init_qformer(rng, config.text())
    return ModelParams(
        blocks=blocks,
        qformer=qformer,
        proj_mem=xavier_uniform(rng, (d, d_out)),
        proj_text=xavier_uniform(rng, (d, d_out)),
        head_w=xavier_uniform(rng, (d_out, config.num_classes)),
        head_b=Tensor(np.zeros(config.num_classes), requires_grad=True),
        fusion=xavier_uniform(rng, (d_out, d_out)) if config.fusion_proj else None,
    )


def trainable_names(params: ModelParams, stage: str) -> list[str]:
    """Names updated during a training stage; everything else stays frozen."""
    if stage not in _STAGES:
        raise ConfigError(f"unknown training stage {stage!r}, expected align|instruct")
    prefixes = _STAGES[stage]
    return sorted(n for n in params.tensors() if n.startswith(prefixes))


def set_trainable(params: ModelParams, stage: str) -> list[str]:
    chosen = set(trainable_names(params, stage))
    for name, tensor in params.tensors().items():
        tensor.requires_grad = name in chosen
    return sorted(chosen)


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(blob)), blob]
    for name, tensor in sorted(params.tensors().items()):
        arr = np.ascontiguousarray(tensor.data)
        code = _CODES_BY_KIND.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise FormatError(f"tensor {name} has unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _need(raw: bytes, offset: int, count: int, what: str) -> None:
    if offset + count > len(raw):
        raise FormatError(f"file ends inside {what}", offset=len(raw))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    _need(raw, 0, 12, "header")
    if raw[0:4] != _MAGIC:
        raise FormatError(f"bad magic {raw[0:4]!r}, expected {_MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (cfg_len,) = struct.unpack_from("<I", raw, 8)
    _need(raw, 12, cfg_len, "config")
    blob = json.loads(raw[12 : 12 + cfg_len].decode("utf-8"))
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(blob) - known
    if unknown:
        raise FormatError(f"unknown config keys {sorted(unknown)}", offset=12)
    config = ModelConfig(**blob)

    arrays: dict[str, np.ndarray] = {}
    pos = 12 + cfg_len
    while pos < len(raw):
        _need(raw, pos, 2, "record name length")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        _need(raw, pos, name_len, "record name")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        _need(raw, pos, 2, "record dtype/rank")
        code, rank = struct.unpack_from("<BB", raw, pos)
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} in record {name!r}", offset=pos)
        pos += 2
        _need(raw, pos, 8 * rank, "record extents")
        shape = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        _need(raw, pos, count * dtype.itemsize, f"record payload for {name!r}")
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
        pos += count * dtype.itemsize
        arrays[name] = data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    return config, arrays


def apply_checkpoint(params: ModelParams, arrays: dict[str, np.ndarray]) -> None:
    registry = params.tensors()
    missing = sorted(set(registry) - set(arrays))
    if missing:
        raise FormatError(f"checkpoint is missing tensors {missing}")
    extra = sorted(set(arrays) - set(registry))
    if extra:
        raise FormatError(f"checkpoint has unknown tensors {extra}")
    for name, tensor in registry.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise FormatError(
                f"tensor {name} has shape {arr.shape}, model expects {tensor.data.shape}"
            )
    for name, tensor in registry.items():
        tensor.data = np.array(arrays[name], copy=True)


def load_model(path) -> tuple[ModelConfig, ModelParams]:
    config, arrays = load_checkpoint(path)
    params = init_model(np.random.default_rng(0), config)
    apply_checkpoint(params, arrays)
    return config, params
