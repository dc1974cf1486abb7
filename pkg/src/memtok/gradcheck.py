"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, OracleError, ShapeError
from .tensor import Tape, Tensor, _active_tape, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple
    analytic_at_worst: float
    numeric_at_worst: float
    coords_checked: int

    def __str__(self):
        return (
            f"max_rel_err={self.max_rel_err:.3e} at {self.worst_index} "
            f"(analytic {self.analytic_at_worst:.6e}, numeric {self.numeric_at_worst:.6e}, "
            f"{self.coords_checked} coords)"
        )


def finite_diff_check(f, param: Tensor, eps=1e-5, max_coords=64, seed=0) -> GradCheckReport:
    """Compare the tape gradient of ``f(param)`` against central differences.

    ``f`` must be a deterministic scalar-valued function of ``param`` (it may
    close over other fixed tensors). The check runs in 64-bit; for tensors
    larger than ``max_coords`` a seeded random subset of coordinates is
    probed. Relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if _active_tape() is not None:
        raise ConfigError("finite_diff_check must run outside any recording tape")
    if param.data.dtype != np.float64:
        raise ConfigError(
            "finite differences require float64 parameters; build them under precision('f64')"
        )

    def evaluate():
        out = f(param)
        if out.data.size != 1:
            raise ShapeError(f"checked function must return a scalar, got shape {out.shape}")
        return float(out.data)

    y0, y1 = evaluate(), evaluate()
    if not (y0 == y1 or (np.isnan(y0) and np.isnan(y1))):
        raise OracleError(f"function is not deterministic under repeated evaluation: {y0!r} != {y1!r}")

    saved_flag = param.requires_grad
    param.requires_grad = True
    try:
        with Tape() as tape:
            loss = f(param)
        if loss.data.size != 1:
            raise ShapeError(f"checked function must return a scalar, got shape {loss.shape}")
        gmap = backward(tape, loss)
        nid = tape.node_id_of(param)
        analytic = gmap[nid].data if nid is not None and nid in gmap else np.zeros_like(param.data)
    finally:
        param.requires_grad = saved_flag

    size = param.data.size
    if size <= max_coords:
        flat_indices = np.arange(size)
    else:
        flat_indices = np.sort(
            np.random.default_rng(seed).choice(size, size=max_coords, replace=False)
        )

    analytic_flat = analytic.reshape(-1)
    worst = (-1.0, (), 0.0, 0.0)
    for flat_idx in flat_indices:
        idx = np.unravel_index(int(flat_idx), param.data.shape)
        old = param.data[idx]
        param.data[idx] = old + eps
        y_plus = evaluate()
        param.data[idx] = old - eps
        y_minus = evaluate()
        param.data[idx] = old
        numeric = (y_plus - y_minus) / (2.0 * eps)
        analytic_v = float(analytic_flat[flat_idx])
        rel = abs(analytic_v - numeric) / max(1e-8, abs(analytic_v) + abs(numeric))
        if rel > worst[0]:
            worst = (rel, idx, analytic_v, numeric)

    return GradCheckReport(
        max_rel_err=max(worst[0], 0.0),
        worst_index=worst[1],
        analytic_at_worst=worst[2],
        numeric_at_worst=worst[3],
        coords_checked=len(flat_indices),
    )
