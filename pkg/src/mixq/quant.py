"""Symmetric fake quantization with learnable scales.

    Q[x] = s * round(clamp(x / s, l_min, l_max)),  l_min = -2^(k-1)+1, l_max = 2^(k-1)

Two rules are provided for the gradient of the scale:

* ``STE``: the learned-step-size rule that treats round() as identity,
  dQ/ds = round(x/s) - x/s.
* ``MSE``: the gradient of the squared quantization error itself,
  d(Q[x]-x)^2/ds = 2 (Q[x]-x) round(x/s), independent of the task loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import CalibrationError, ContractError

GradMode = Literal["STE", "MSE"]
Granularity = Literal["tensor", "row"]

SCALE_FLOOR = 1e-8
CALIB_PERCENTILE = 99.99
RESERVOIR_CAPACITY = 1_000_000


def code_bounds(bits: int) -> tuple[int, int]:
    if bits not in (4, 8):
        raise ContractError(f"unsupported bit-width {bits}; expected 4 or 8")
    return -(2 ** (bits - 1)) + 1, 2 ** (bits - 1)


@dataclass
class QuantScale:
    """Learnable scale for one quantized tensor.

    ``s`` is a 0-d array for per-tensor scales and a 1-d array (one entry per
    row) for per-row scales.
    """

    s: np.ndarray
    bits: int
    granularity: Granularity = "tensor"
    grad_mode: GradMode = "MSE"
    lr_group: Literal["weight_scale", "activation_scale"] = "activation_scale"
    l_min: int = field(init=False)
    l_max: int = field(init=False)

    def __post_init__(self):
        self.l_min, self.l_max = code_bounds(self.bits)
        self.s = np.asarray(self.s)
        if self.s.dtype.kind != "f":
            self.s = self.s.astype(np.float32)
        if self.granularity == "tensor" and self.s.ndim != 0:
            raise ContractError("per-tensor scale must be a scalar")
        if self.granularity == "row" and self.s.ndim != 1:
            raise ContractError("per-row scale must be a vector")

    def broadcast(self, x: np.ndarray) -> np.ndarray:
        """Scale reshaped to broadcast against ``x`` (rows along axis 0)."""
        s = self.s.astype(x.dtype, copy=False)
        if self.granularity == "row":
            if x.shape[0] != s.shape[0]:
                raise ContractError(f"per-row scale has {s.shape[0]} entries, tensor has {x.shape[0]} rows")
            return s.reshape((-1,) + (1,) * (x.ndim - 1))
        return s

    def clamp_positive(self) -> None:
        np.maximum(self.s, self.s.dtype.type(SCALE_FLOOR), out=self.s)

    def copy(self) -> "QuantScale":
        return QuantScale(self.s.copy(), self.bits, self.granularity, self.grad_mode, self.lr_group)


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    a = np.abs(v)
    r = np.floor(a)
    r += (a - r) >= 0.5
    return np.copysign(r, v)


def _check_scale(qs: QuantScale) -> None:
    if not np.all(qs.s > 0):
        raise ContractError("quantization scale must be strictly positive")


def _codes_float(x: np.ndarray, qs: QuantScale) -> np.ndarray:
    s = qs.broadcast(x)
    return round_half_away(np.clip(x / s, qs.l_min, qs.l_max))


def fake_quantize(x: np.ndarray, qs: QuantScale) -> np.ndarray:
    _check_scale(qs)
    return qs.broadcast(x) * _codes_float(x, qs)


def quantize_int(x: np.ndarray, qs: QuantScale) -> np.ndarray:
    """Integer codes in [l_min, l_max] as int16 (wide enough for k=8)."""
    _check_scale(qs)
    return _codes_float(x, qs).astype(np.int16)


def dequantize(codes: np.ndarray, qs: QuantScale, dtype=np.float32) -> np.ndarray:
    return qs.broadcast(codes.astype(dtype)) * codes.astype(dtype)


def _reduce(t: np.ndarray, qs: QuantScale) -> np.ndarray:
    if qs.granularity == "row":
        return t.reshape(t.shape[0], -1).sum(axis=1)
    return np.asarray(t.sum(), dtype=t.dtype)


def in_range_mask(x: np.ndarray, qs: QuantScale) -> np.ndarray:
    v = x / qs.broadcast(x)
    return (v >= qs.l_min) & (v <= qs.l_max)


def scale_grad_ste(x: np.ndarray, qs: QuantScale, upstream: np.ndarray | None = None) -> np.ndarray:
    """Straight-through scale gradient sum_i g_i * (round(x_i/s) - x_i/s).

    With ``upstream`` omitted g_i = 1, which is dQ/ds summed over the tensor.
    Clamped elements contribute g_i * l_min or g_i * l_max.
    """
    _check_scale(qs)
    v = x / qs.broadcast(x)
    codes = round_half_away(np.clip(v, qs.l_min, qs.l_max))
    inside = (v >= qs.l_min) & (v <= qs.l_max)
    dq_ds = codes - np.where(inside, v, 0.0).astype(x.dtype, copy=False)
    if upstream is not None:
        dq_ds = dq_ds * upstream
    return _reduce(dq_ds, qs)


def scale_grad_mse(x: np.ndarray, qs: QuantScale) -> np.ndarray:
    """2 * sum_i (Q[x_i] - x_i) * round(clamp(x_i/s))."""
    _check_scale(qs)
    codes = _codes_float(x, qs)
    err = qs.broadcast(x) * codes - x
    return _reduce(2.0 * err * codes, qs)


def scale_grad(x: np.ndarray, qs: QuantScale, upstream: np.ndarray) -> np.ndarray:
    """Scale gradient according to ``qs.grad_mode``."""
    if qs.grad_mode == "MSE":
        return scale_grad_mse(x, qs)
    return scale_grad_ste(x, qs, upstream)


def input_grad_ste(upstream: np.ndarray, x: np.ndarray, qs: QuantScale) -> np.ndarray:
    """Clipped straight-through: pass ``upstream`` where x/s is inside the code range."""
    if upstream.shape != x.shape:
        raise ContractError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    return np.where(in_range_mask(x, qs), upstream, 0.0).astype(upstream.dtype, copy=False)


# -- calibration ----------------------------------------------------------------

def calibrate_weight(
    w: np.ndarray,
    bits: int,
    granularity: Granularity = "row",
    grad_mode: GradMode = "MSE",
    literal_max: bool = False,
) -> QuantScale:
    """Max-abs calibration: s = max|w| / l_max (or s = max|w| with ``literal_max``)."""
    if w.size == 0:
        raise ContractError("cannot calibrate an empty weight")
    _, l_max = code_bounds(bits)
    if granularity == "row":
        amax = np.abs(w.reshape(w.shape[0], -1)).max(axis=1)
    else:
        amax = np.asarray(np.abs(w).max())
    s = amax if literal_max else amax / l_max
    s = np.maximum(s, SCALE_FLOOR).astype(w.dtype)
    return QuantScale(s, bits, granularity, grad_mode, "weight_scale")


class CalibStats:
    """Reservoir of observed |activation| values.

    Keeps every value until ``capacity`` is reached, then switches to uniform
    reservoir sampling (Algorithm R) driven by a seeded generator.
    """

    def __init__(self, capacity: int = RESERVOIR_CAPACITY, seed: int = 0):
        self.capacity = capacity
        self.sample_count = 0
        self._buf = np.empty(0, dtype=np.float32)
        self._rng = np.random.default_rng(seed)

    @property
    def abs_value_reservoir(self) -> np.ndarray:
        return self._buf

    def update(self, x: np.ndarray) -> None:
        vals = np.abs(np.asarray(x, dtype=np.float32)).ravel()
        room = self.capacity - self._buf.size
        if room > 0:
            self._buf = np.concatenate([self._buf, vals[:room]])
            self.sample_count += min(room, vals.size)
            vals = vals[room:]
        if vals.size:
            # global 0-based indices of the incoming items
            idx = self.sample_count + np.arange(vals.size)
            slots = self._rng.integers(0, idx + 1)
            keep = slots < self.capacity
            # fancy assignment keeps the last write on duplicate slots,
            # matching the sequential algorithm
            self._buf[slots[keep]] = vals[keep]
            self.sample_count += vals.size


def calibrate_activation(
    stats: CalibStats,
    bits: int,
    grad_mode: GradMode = "MSE",
    percentile: float = CALIB_PERCENTILE,
) -> QuantScale:
    """s = percentile(|activation|) / l_max, floored at 1e-8."""
    if stats.sample_count == 0:
        raise CalibrationError("no activation samples collected")
    _, l_max = code_bounds(bits)
    p = np.percentile(stats.abs_value_reservoir, percentile)
    s = np.float32(max(p / l_max, SCALE_FLOOR))
    return QuantScale(np.asarray(s, dtype=np.float32), bits, "tensor", grad_mode, "activation_scale")
