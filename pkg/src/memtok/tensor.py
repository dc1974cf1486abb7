"""A small dense-tensor library with reverse-mode differentiation.

Values are numpy arrays of rank <= 5 wrapped in :class:`Tensor`. Operations
are a fixed set of kernels, each with a closed-form vector-Jacobian product.
When a :class:`Tape` is active, operations on tensors that require gradients
append nodes to it; :func:`backward` replays the tape in reverse to produce a
gradient for every leaf.

The op set is deliberately bounded: matrix multiplication (with stacked
leading axes), broadcasting add/multiply, scalar scaling, GELU, row softmax,
layer normalization, per-channel pooled 3-D convolution, concat/narrow/
reshape/transpose data movement, axis means and full sums, embedding lookup,
and a fused cross-entropy loss. Everything downstream composes these.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, ShapeError

MAX_RANK = 5

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}
_default_dtype = [np.float32]


def set_default_dtype(name):
    """Set the global default scalar type ("f32" or "f64")."""
    if name not in _DTYPE_NAMES:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_DTYPE_NAMES)}")
    _default_dtype[0] = _DTYPE_NAMES[name]


def default_dtype():
    return _default_dtype[0]


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default scalar type, e.g. ``with precision("f64"):``."""
    if name not in _DTYPE_NAMES:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_DTYPE_NAMES)}")
    saved = _default_dtype[0]
    _default_dtype[0] = _DTYPE_NAMES[name]
    try:
        yield
    finally:
        _default_dtype[0] = saved


class Tensor:
    """A rank <= 5 dense value. Treated as immutable once constructed."""

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype[0])
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None

    @staticmethod
    def _wrap(arr, requires_grad=False):
        t = object.__new__(Tensor)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        """A view of the same values that does not require gradients."""
        return Tensor._wrap(self.data, False)

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"


# ---------------------------------------------------------------------------
# Tape


@dataclass
class TapeNode:
    op: str
    in_ids: tuple
    out_id: int
    vjp: Callable


class Tape:
    """Append-only record of operations; node ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._ids: dict[int, int] = {}  # id(tensor) -> node id
        self._tensors: list[Tensor] = []
        self._leaf_ids: list[int] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def node_id_of(self, t: Tensor):
        return self._ids.get(id(t))

    def _register(self, t: Tensor) -> int:
        nid = len(self._tensors)
        self._tensors.append(t)
        self._ids[id(t)] = nid
        t.node_id = nid
        return nid

    def _leaf(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = self._register(t)
            self._leaf_ids.append(nid)
        return nid


_TAPES: list[Tape] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _record(op, out, inputs, vjp):
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    in_ids = tuple(tape._leaf(t) if t.requires_grad else -1 for t in inputs)
    out.requires_grad = True
    out_id = tape._register(out)
    tape.nodes.append(TapeNode(op, in_ids, out_id, vjp))
    return out


def backward(tape: Tape, loss: Tensor):
    """Reverse sweep from a scalar loss; returns {node id: gradient Tensor}.

    Every leaf registered on the tape appears in the result, with an all-zero
    gradient if the loss does not depend on it. Each node is visited once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    lid = tape.node_id_of(loss)
    if lid is not None:
        grads[lid] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for iid, gin in zip(node.in_ids, node.vjp(g)):
            if iid < 0 or gin is None:
                continue
            acc = grads.get(iid)
            grads[iid] = gin if acc is None else acc + gin
    out: dict[int, Tensor] = {}
    for nid in tape._leaf_ids:
        ref = tape._tensors[nid]
        arr = grads.get(nid)
        if arr is None:
            arr = np.zeros_like(ref.data)
        out[nid] = Tensor._wrap(np.asarray(arr, dtype=ref.data.dtype))
    for nid, arr in grads.items():
        if nid not in out:
            out[nid] = Tensor._wrap(np.asarray(arr))
    return out


def gradients(tape: Tape, loss: Tensor, tensors):
    """Backward pass returning gradients aligned with ``tensors``."""
    gmap = backward(tape, loss)
    result = []
    for t in tensors:
        nid = tape.node_id_of(t)
        if nid is not None and nid in gmap:
            result.append(gmap[nid])
        else:
            result.append(Tensor._wrap(np.zeros_like(t.data)))
    return result


# ---------------------------------------------------------------------------
# Kernels


def _result(arr):
    return Tensor._wrap(np.asarray(arr))


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(sa, sb, op):
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast") from None


def add(a: Tensor, b: Tensor):
    _check_broadcast(a.shape, b.shape, "add")
    out = _result(a.data + b.data)
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))

    return _record("add", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor):
    _check_broadcast(a.shape, b.shape, "mul")
    out = _result(a.data * b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _record("mul", out, (a, b), vjp)


def scale(a: Tensor, s):
    s = float(s)
    out = _result(a.data * np.asarray(s, dtype=a.data.dtype))

    def vjp(g):
        return (g * s,)

    return _record("scale", out, (a,), vjp)


def matmul(a: Tensor, b: Tensor):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    out = _result(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return (ga, gb)

    return _record("matmul", out, (a, b), vjp)


def transpose_last2(a: Tensor):
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 requires rank >= 2, got {a.shape}")
    out = _result(a.data.swapaxes(-1, -2))

    def vjp(g):
        return (g.swapaxes(-1, -2),)

    return _record("transpose_last2", out, (a,), vjp)


def reshape(a: Tensor, shape):
    try:
        out = _result(a.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    if out.ndim > MAX_RANK:
        raise ShapeError(f"rank {out.ndim} exceeds the supported maximum of {MAX_RANK}")
    in_shape = a.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _record("reshape", out, (a,), vjp)


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of an empty list")
    arrs = [p.data for p in parts]
    try:
        out = _result(np.concatenate(arrs, axis=axis))
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    offsets = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", out, tuple(parts), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int):
    ax = axis if axis >= 0 else a.ndim + axis
    if not 0 <= ax < a.ndim:
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.shape}")
    if start < 0 or length < 1 or start + length > a.shape[ax]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of bounds for extent {a.shape[ax]} (shape {a.shape})"
        )
    index = tuple(slice(start, start + length) if i == ax else slice(None) for i in range(a.ndim))
    out = _result(a.data[index])
    in_shape, in_dtype = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(in_shape, dtype=in_dtype)
        full[index] = g
        return (full,)

    return _record("narrow", out, (a,), vjp)


def mean_axis(a: Tensor, axis: int, keepdims=False):
    ax = axis if axis >= 0 else a.ndim + axis
    if not 0 <= ax < a.ndim:
        raise ShapeError(f"mean axis {axis} out of range for shape {a.shape}")
    out = _result(a.data.mean(axis=ax, keepdims=keepdims))
    n = a.shape[ax]
    in_shape = a.shape

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gg, in_shape) / n,)

    return _record("mean_axis", out, (a,), vjp)


def sum_all(a: Tensor):
    out = _result(np.asarray(a.data.sum(), dtype=a.data.dtype))
    in_shape, in_dtype = a.shape, a.data.dtype

    def vjp(g):
        return (np.full(in_shape, g, dtype=in_dtype),)

    return _record("sum_all", out, (a,), vjp)


def expand0(a: Tensor, n: int):
    """Stack ``n`` broadcast copies of ``a`` along a new leading axis."""
    if a.ndim + 1 > MAX_RANK:
        raise ShapeError(f"expand0 would exceed rank {MAX_RANK} from shape {a.shape}")
    out = _result(np.broadcast_to(a.data, (n,) + a.shape))

    def vjp(g):
        return (g.sum(axis=0),)

    return _record("expand0", out, (a,), vjp)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu(a: Tensor):
    d = a.data
    out = _result(0.5 * d * (1.0 + erf(d / _SQRT2)))

    def vjp(g):
        return (g * _gelu_grad(d),)

    return _record("gelu", out, (a,), vjp)


def softmax_rows(a: Tensor):
    """Stabilized softmax over the last axis."""
    d = a.data
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _result(s)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", out, (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5):
    d = a.data
    dim = d.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"layer_norm parameters must have shape ({dim},); got gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = d.mean(axis=-1, keepdims=True)
    var = ((d - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * inv
    out = _result(xhat * gamma.data + beta.data)
    gd = gamma.data

    def vjp(g):
        dgamma = (g * xhat).reshape(-1, dim).sum(axis=0)
        dbeta = g.reshape(-1, dim).sum(axis=0)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return _record("layer_norm", out, (a, gamma, beta), vjp)


@dataclass(frozen=True)
class PoolConfig:
    """Pooled-convolution geometry over the (time, height, width) axes."""

    stride: tuple = (1, 2, 2)
    kernel: tuple = (3, 3, 3)
    padding: tuple = (1, 1, 1)

    def __post_init__(self):
        for name, values, low in (
            ("stride", self.stride, 1),
            ("kernel", self.kernel, 1),
            ("padding", self.padding, 0),
        ):
            if len(values) != 3 or any(int(v) < low for v in values):
                raise ConfigError(f"pool {name} must be three integers >= {low}, got {values!r}")

    def out_extent(self, extent: int, axis: int) -> int:
        k, s, p = self.kernel[axis], self.stride[axis], self.padding[axis]
        out = (extent + 2 * p - k) // s + 1
        if out < 1:
            raise ConfigError(
                f"pooling produces nonpositive extent {out} on axis {axis} "
                f"(extent {extent}, kernel {k}, stride {s}, padding {p})"
            )
        return out

    def out_shape(self, extents):
        return tuple(self.out_extent(e, i) for i, e in enumerate(extents))


def conv3d_pool(a: Tensor, kernels: Tensor, cfg: PoolConfig):
    """Depthwise 3-D convolution with zero padding; one kernel per channel.

    ``a`` has shape (T, H, W, C) or (B, T, H, W, C); ``kernels`` has shape
    (C, kT, kH, kW). Output extents follow floor((e + 2p - k)/s) + 1.
    """
    d, k = a.data, kernels.data
    if d.ndim not in (4, 5):
        raise ShapeError(f"conv3d_pool input must have rank 4 or 5, got {a.shape}")
    if k.ndim != 4:
        raise ShapeError(f"conv3d_pool kernels must have rank 4, got {kernels.shape}")
    channels = d.shape[-1]
    if k.shape[0] != channels or k.shape[1:] != tuple(cfg.kernel):
        raise ShapeError(
            f"kernels {kernels.shape} do not match channels {channels} and kernel size {cfg.kernel}"
        )
    t, h, w = d.shape[-4:-1]
    ot, oh, ow = cfg.out_shape((t, h, w))
    (st, sh, sw), (kt, kh, kw), (pt, ph, pw) = cfg.stride, cfg.kernel, cfg.padding
    pad = [(0, 0)] * (d.ndim - 4) + [(pt, pt), (ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(d, pad)
    win = sliding_window_view(xp, (kt, kh, kw), axis=(d.ndim - 4, d.ndim - 3, d.ndim - 2))
    win = win[..., ::st, ::sh, ::sw, :, :, :, :]
    out = _result(np.einsum("...cijk,cijk->...c", win, k))

    def vjp(g):
        gk = np.einsum(
            "pcijk,pc->cijk",
            win.reshape(-1, channels, kt, kh, kw),
            g.reshape(-1, channels),
        )
        gxp = np.zeros_like(xp)
        for i in range(kt):
            for j in range(kh):
                for l in range(kw):
                    gxp[
                        (
                            Ellipsis,
                            slice(i, i + st * ot, st),
                            slice(j, j + sh * oh, sh),
                            slice(l, l + sw * ow, sw),
                            slice(None),
                        )
                    ] += g * k[:, i, j, l]
        gx = gxp[(Ellipsis, slice(pt, pt + t), slice(ph, ph + h), slice(pw, pw + w), slice(None))]
        return (gx, gk)

    return _record("conv3d_pool", out, (a, kernels), vjp)


def embedding(table: Tensor, ids):
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    out = _result(table.data[ids])
    td = table.data

    def vjp(g):
        full = np.zeros_like(td)
        np.add.at(full, ids, g)
        return (full,)

    return _record("embedding", out, (table,), vjp)


def cross_entropy(logits: Tensor, labels):
    """Mean cross-entropy of integer labels under row logits (log-sum-exp form)."""
    x = logits.data
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    if x2.ndim != 2:
        raise ShapeError(f"cross_entropy expects logits of rank 1 or 2, got {logits.shape}")
    y = np.asarray(labels).reshape(-1)
    n, c = x2.shape
    if y.shape[0] != n:
        raise ShapeError(f"cross_entropy got {n} logit rows but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ShapeError(f"labels out of range [0, {c})")
    m = x2.max(axis=-1, keepdims=True)
    z = x2 - m
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = log_norm[:, 0] + m[:, 0] - x2[np.arange(n), y]
    out = _result(np.asarray(nll.mean(), dtype=x.dtype))

    def vjp(g):
        p = np.exp(z - log_norm)
        p[np.arange(n), y] -= 1.0
        gx = g * p / n
        return (gx[0] if squeeze else gx,)

    return _record("cross_entropy", out, (logits,), vjp)


# ---------------------------------------------------------------------------
# Initialization


def xavier_uniform(rng, shape, fan_in=None, fan_out=None, dtype=None):
    """Seeded uniform init with bound sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(shape)
    if fan_in is None:
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    if fan_out is None:
        fan_out = shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)
