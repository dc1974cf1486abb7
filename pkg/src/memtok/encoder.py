"""Frozen encoder stub: patch features, synthetic videos, and feature files.

The compressors operate on per-frame patch features of shape (T, N, d). This
module provides the three ways to obtain them: a fixed linear patchify
projection for raw pixels, a seeded synthetic generator used by the toy tasks
and benchmarks, and a little-endian binary file format for exchanging
features between processes. Nothing here is trainable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor, xavier_uniform

PATCH_SIDE = 16  # pixels per patch edge

_MAGIC = b"VCFT"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_HEADER = struct.Struct("<4sIB3xQQQ")  # magic, version, dtype code, reserved, T, N, d


def _is_power_of_four(n: int) -> bool:
    while n % 4 == 0 and n > 1:
        n //= 4
    return n == 1


@dataclass
class VideoFeature:
    """Per-frame patch features, shape (frames, patches, dim).

    The patch count must be a power of four so the square grid can be halved
    repeatedly down to a single position.
    """

    data: Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"video features must have rank 3 (T, N, d), got {self.data.shape}")
        n = self.data.shape[1]
        if not _is_power_of_four(n):
            raise ShapeError(
                f"patch count {n} is not a power of four; the spatial grid cannot halve to 1"
            )

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def n_patches(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]


def make_encoder_proj(rng, dim: int) -> Tensor:
    """The frozen patch projection, (PATCH_SIDE^2 * 3) x dim."""
    proj = xavier_uniform(rng, (PATCH_SIDE * PATCH_SIDE * 3, dim))
    proj.requires_grad = False
    return proj


def patchify_embed(frame: np.ndarray, proj: Tensor) -> Tensor:
    """Split a (H, W, 3) frame into non-overlapping 16x16 patches and project.

    Patches are ordered row-major over the grid; each patch is flattened
    row-major before the linear projection. There is no bias, so an all-zero
    frame maps to all-zero tokens.
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"frame must have shape (H, W, 3), got {frame.shape}")
    h, w, _ = frame.shape
    if h % PATCH_SIDE or w % PATCH_SIDE:
        raise ShapeError(f"frame size {h}x{w} is not divisible by the patch side {PATCH_SIDE}")
    flat_dim = PATCH_SIDE * PATCH_SIDE * 3
    if proj.ndim != 2 or proj.shape[0] != flat_dim:
        raise ShapeError(f"projection must have shape ({flat_dim}, d), got {proj.shape}")
    gh, gw = h // PATCH_SIDE, w // PATCH_SIDE
    patches = (
        frame.reshape(gh, PATCH_SIDE, gw, PATCH_SIDE, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, flat_dim)
    )
    return Tensor._wrap(patches.astype(proj.data.dtype) @ proj.data)


def signal_vector(signal_id: int, dim: int) -> np.ndarray:
    """Deterministic unit direction for a signal id: the (id mod dim) basis axis."""
    v = np.zeros(dim)
    v[signal_id % dim] = 1.0
    return v


@dataclass
class SyntheticVideoSpec:
    """Seeded Gaussian background plus unit signal spikes at (frame, patch)."""

    frames: int
    n_patches: int
    dim: int
    events: list = field(default_factory=list)  # (frame, patch, signal id)
    noise_scale: float = 0.1
    seed: int = 0


def gen_synthetic_video(spec: SyntheticVideoSpec) -> VideoFeature:
    rng = np.random.default_rng(spec.seed)
    data = rng.standard_normal((spec.frames, spec.n_patches, spec.dim)) * spec.noise_scale
    for frame, patch, signal_id in spec.events:
        if not (0 <= frame < spec.frames and 0 <= patch < spec.n_patches):
            raise ConfigError(
                f"event ({frame}, {patch}, {signal_id}) outside video of "
                f"{spec.frames} frames x {spec.n_patches} patches"
            )
        data[frame, patch] += signal_vector(signal_id, spec.dim)
    return VideoFeature(Tensor(data))


# ---------------------------------------------------------------------------
# Feature files


def save_features(path, feature: VideoFeature):
    """Write features: magic, version, dtype code, T/N/d, then row-major scalars."""
    arr = feature.data.data
    code = _CODES_BY_KIND.get(arr.dtype)
    if code is None:
        raise ConfigError(f"cannot serialize dtype {arr.dtype}; use f32 or f64")
    t, n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, code, t, n, d))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def load_features(path) -> VideoFeature:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"feature file shorter than the {_HEADER.size}-byte header", offset=len(raw))
    magic, version, code, t, n, d = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}, expected {_VERSION}", offset=4)
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset=8)
    dtype = _DTYPE_CODES[code]
    expected = _HEADER.size + t * n * d * dtype.itemsize
    if len(raw) < expected:
        raise FormatError(
            f"payload truncated: expected {expected} bytes total, file has {len(raw)}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after payload", offset=expected)
    data = np.frombuffer(raw, dtype=dtype, count=t * n * d, offset=_HEADER.size)
    native = dtype.newbyteorder("=").type
    return VideoFeature(Tensor(data.reshape(t, n, d).astype(native, copy=True), dtype=native))
