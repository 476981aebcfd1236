"""Uniform affine (asymmetric) weight quantizer.

    codes = clamp(round(v / s) + z, 0, 2**B - 1)
    deq   = s * (codes - z)

Rounding is half-to-even (``np.rint``). Ranges are extended to include zero,
so the zero-point always lands inside the code range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GroupParamsMissing, InvalidConfig, ShapeMismatch, ValidationError

MIN_BITS, MAX_BITS = 2, 8
SCALE_FLOOR = 1e-8


def _check_bits(bits: int) -> int:
    if not MIN_BITS <= int(bits) <= MAX_BITS:
        raise InvalidConfig(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return int(bits)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero: int
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        if not 0 <= self.zero <= self.maxq:
            raise ValidationError(f"zero point {self.zero} outside [0, {self.maxq}]")

    @property
    def maxq(self) -> int:
        return (1 << self.bits) - 1


def _exact_constant_scale(v: float, maxq: int) -> float:
    """Scale whose grid reproduces the constant ``v`` bit-exactly.

    |v|/maxq is tried first together with a few neighbouring floats; when no
    candidate survives the round trip the grid step falls back to |v| itself.
    """
    mag = abs(v)
    base = mag / maxq
    candidates = [base]
    up = down = base
    for _ in range(4):
        up = math.nextafter(up, math.inf)
        down = math.nextafter(down, 0.0)
        candidates += [up, down]
    for s in candidates:
        if s <= 0.0:
            continue
        code = float(np.rint(v / s))
        if abs(code) == maxq and s * maxq == mag:
            return s
    return mag


def fit_rows(values, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (scale, zero) for a 2-D array; rows are independent."""
    bits = _check_bits(bits)
    m = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if m.shape[1] == 0:
        raise ValidationError("cannot fit quantization params on an empty vector")
    maxq = (1 << bits) - 1
    vmin, vmax = m.min(axis=1), m.max(axis=1)
    lo = np.minimum(vmin, 0.0)
    hi = np.maximum(vmax, 0.0)
    span = hi - lo
    scale = np.where(span > 0, span / maxq, SCALE_FLOOR / maxq)
    # subnormal spans can underflow to zero
    scale = np.maximum(scale, np.finfo(np.float64).tiny)

    constant = (vmin == vmax) & (vmin != 0)
    for r in np.flatnonzero(constant):
        scale[r] = _exact_constant_scale(float(vmin[r]), maxq)

    zero = np.clip(-np.rint(lo / scale), 0, maxq).astype(np.int64)
    return scale, zero


def fit_params(values, bits: int) -> QuantParams:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValidationError("values must be non-empty and finite")
    scale, zero = fit_rows(v[None, :], bits)
    return QuantParams(float(scale[0]), int(zero[0]), int(bits))


def quantize_array(values, scale, zero, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Broadcasting quant/dequant; ``scale``/``zero`` broadcast against ``values``."""
    maxq = (1 << bits) - 1
    v = np.asarray(values, dtype=np.float64)
    s = np.asarray(scale, dtype=np.float64)
    z = np.asarray(zero, dtype=np.float64)
    codes = np.clip(np.rint(v / s) + z, 0, maxq)
    deq = s * (codes - z)
    return codes.astype(np.int64), deq


def quant_dequant(values, params: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    return quantize_array(values, params.scale, params.zero, params.bits)


class GroupQuantizer:
    """Quantization state for all rows of one weight matrix.

    Columns are addressed by *visit position* (the solver's possibly permuted
    order), and groups are contiguous runs of ``group_size`` visit positions.
    ``group_size=None`` means one group per row (per-channel).
    """

    def __init__(self, rows: int, cols: int, bits: int, group_size: int | None = None):
        self.bits = _check_bits(bits)
        if group_size is not None and group_size < 1:
            raise InvalidConfig("group_size must be positive or None")
        self.rows, self.cols = rows, cols
        self.group_size = cols if group_size is None or group_size >= cols else int(group_size)
        self.num_groups = -(-cols // self.group_size)
        self.scales = np.zeros((rows, self.num_groups))
        self.zeros = np.zeros((rows, self.num_groups), dtype=np.int64)
        self.fitted = np.zeros(self.num_groups, dtype=bool)
        self.codes = np.zeros((rows, cols), dtype=np.int64)

    def group_of(self, col: int) -> int:
        return col // self.group_size

    def group_span(self, g: int) -> tuple[int, int]:
        start = g * self.group_size
        return start, min(start + self.group_size, self.cols)

    def is_group_head(self, col: int) -> bool:
        return col % self.group_size == 0

    def fit_group(self, g: int, values) -> None:
        start, stop = self.group_span(g)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.rows, stop - start):
            raise ShapeMismatch(
                f"group {g} expects values of shape {(self.rows, stop - start)}, got {values.shape}"
            )
        self.scales[:, g], self.zeros[:, g] = fit_rows(values, self.bits)
        self.fitted[g] = True

    def quantize_column(self, col: int, values) -> np.ndarray:
        g = self.group_of(col)
        if not self.fitted[g]:
            raise GroupParamsMissing(f"column {col} visited before the head of group {g}")
        codes, deq = quantize_array(values, self.scales[:, g], self.zeros[:, g], self.bits)
        self.codes[:, col] = codes
        return deq


def quantize_column_groupwise(w_current, col: int, state: GroupQuantizer) -> np.ndarray:
    """Quantize column ``col`` of the current (error-compensated) matrix.

    Group params are fitted from ``w_current`` the first time a group's head
    column is reached.
    """
    w_current = np.asarray(w_current, dtype=np.float64)
    g = state.group_of(col)
    if state.is_group_head(col) and not state.fitted[g]:
        start, stop = state.group_span(g)
        state.fit_group(g, w_current[:, start:stop])
    return state.quantize_column(col, w_current[:, col])


def round_to_nearest(w, bits: int, group_size: int | None = None) -> np.ndarray:
    """Plain RTN baseline in natural column order."""
    w = np.asarray(w, dtype=np.float64)
    state = GroupQuantizer(w.shape[0], w.shape[1], bits, group_size)
    out = np.empty_like(w)
    for c in range(w.shape[1]):
        out[:, c] = quantize_column_groupwise(w, c, state)
    return out
