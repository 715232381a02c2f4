"""
Dynamic fixed-point numbers and the tensor types the accelerator streams.

Every quantized value is a signed integer ``raw`` standing for
``raw * 2**-frac_bits``. Weights and biases use 8-bit raws, feature maps use
16-bit raws and accumulators 32-bit raws. Conversions round half away from
zero and saturate instead of wrapping.

Feature maps are stored pixel-major: all channels of one ``(x, y)`` location
are contiguous, ``index(x, y, c) = (y * width + x) * channels + c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import FormatError, ShapeError

_DTYPES = {8: np.int8, 16: np.int16, 32: np.int32}

Number = Union[int, float]


@dataclass(frozen=True)
class QFormat:
    """Signed dynamic fixed-point format descriptor."""

    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self) -> None:
        if self.total_bits not in _DTYPES:
            raise FormatError(f"total_bits must be one of 8, 16, 32, got {self.total_bits}")
        if not self.signed:
            raise FormatError("only signed fixed-point formats are supported")

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def step(self) -> float:
        """Real value of one least significant bit."""
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def max_real(self) -> float:
        return math.ldexp(float(self.raw_max), -self.frac_bits)

    @property
    def dtype(self) -> type:
        return _DTYPES[self.total_bits]

    def __str__(self) -> str:
        return f"Q{self.total_bits}.{self.frac_bits}"


def _round_half_away(value: float) -> int:
    whole = math.trunc(value)
    if abs(value - whole) >= 0.5:
        whole += 1 if value > 0 else -1
    return whole


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Elementwise round-half-away-from-zero that stays exact near ties.

    ``v - trunc(v)`` is exact in binary floating point, so comparing the
    fractional part against 0.5 never misrounds values like 0.49999999999999994.
    """
    values = np.asarray(values, dtype=np.float64)
    whole = np.trunc(values)
    bump = (np.abs(values - whole) >= 0.5).astype(np.float64)
    return whole + np.sign(values) * bump


def quantize_value(x: Number, fmt: QFormat) -> int:
    """Quantize one real number to a raw integer of ``fmt``."""
    x = float(x)
    if math.isnan(x):
        raise FormatError("cannot quantize NaN")
    if math.isinf(x):
        return fmt.raw_max if x > 0 else fmt.raw_min
    raw = _round_half_away(math.ldexp(x, fmt.frac_bits))
    return max(fmt.raw_min, min(fmt.raw_max, raw))


def quantize_array(values: np.ndarray, fmt: QFormat) -> np.ndarray:
    """Vector form of :func:`quantize_value`; returns raws in ``fmt.dtype``."""
    values = np.asarray(values, dtype=np.float64)
    if np.isnan(values).any():
        raise FormatError("cannot quantize NaN")
    scaled = np.ldexp(values, fmt.frac_bits)
    raws = np.clip(round_half_away(scaled), fmt.raw_min, fmt.raw_max)
    return raws.astype(fmt.dtype)


def dequantize(raw: int, fmt: QFormat) -> float:
    """Real value of ``raw`` under ``fmt`` (exact, power-of-two scale)."""
    raw = int(raw)
    if not fmt.raw_min <= raw <= fmt.raw_max:
        raise FormatError(f"raw value {raw} outside {fmt} range [{fmt.raw_min}, {fmt.raw_max}]")
    return math.ldexp(float(raw), -fmt.frac_bits)


def dequantize_array(raws: np.ndarray, fmt: QFormat) -> np.ndarray:
    raws = np.asarray(raws)
    if raws.size and (raws.min() < fmt.raw_min or raws.max() > fmt.raw_max):
        raise FormatError(f"raw values outside {fmt} range")
    return np.ldexp(raws.astype(np.float64), -fmt.frac_bits)


def saturate(values: np.ndarray, total_bits: int) -> np.ndarray:
    low = -(1 << (total_bits - 1))
    high = (1 << (total_bits - 1)) - 1
    return np.clip(values, low, high)


def shift_round(values: np.ndarray, shift: int) -> np.ndarray:
    """Rescale integers by ``2**-shift``.

    Positive shifts are arithmetic right shifts rounding half away from zero,
    non-positive shifts are exact left shifts. Works on int64 arrays.
    """
    values = np.asarray(values, dtype=np.int64)
    if shift <= 0:
        return values << np.int64(-shift)
    half = np.int64(1) << np.int64(shift - 1)
    magnitude = (np.abs(values) + half) >> np.int64(shift)
    return np.where(values < 0, -magnitude, magnitude)


@dataclass
class Fmap:
    """A width x height x channels feature map in pixel-major order.

    ``fmt`` is ``None`` for the 32-bit float reference path; otherwise ``data``
    holds raws of that format.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray
    fmt: Optional[QFormat] = None

    def __post_init__(self) -> None:
        if min(self.width, self.height, self.channels) < 1:
            raise ShapeError(f"fmap dims must be positive, got {self.shape}")
        self.data = np.ascontiguousarray(self.data).reshape(-1)
        if self.data.size != self.width * self.height * self.channels:
            raise ShapeError(
                f"fmap data length {self.data.size} != "
                f"{self.width}*{self.height}*{self.channels}"
            )
        if self.fmt is None:
            if self.data.dtype != np.float32:
                self.data = self.data.astype(np.float32)
        elif self.data.dtype != self.fmt.dtype:
            raise FormatError(f"fmap data dtype {self.data.dtype} does not match {self.fmt}")

    @property
    def shape(self) -> tuple:
        return (self.width, self.height, self.channels)

    @property
    def is_float(self) -> bool:
        return self.fmt is None

    @classmethod
    def from_hwc(cls, array: np.ndarray, fmt: Optional[QFormat] = None) -> "Fmap":
        array = np.asarray(array)
        if array.ndim != 3:
            raise ShapeError(f"expected an (h, w, c) array, got shape {array.shape}")
        height, width, channels = array.shape
        if fmt is not None:
            array = array.astype(fmt.dtype)
        return cls(width, height, channels, array.reshape(-1), fmt)

    def as_hwc(self) -> np.ndarray:
        """(height, width, channels) view sharing memory with ``data``."""
        return self.data.reshape(self.height, self.width, self.channels)

    def index(self, x: int, y: int, c: int = 0) -> int:
        return (y * self.width + x) * self.channels + c

    def pixel_slice(self, x: int, y: int) -> np.ndarray:
        """The contiguous channel vector at ``(x, y)``; writes go through."""
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise FormatError(f"pixel ({x}, {y}) outside {self.width}x{self.height} fmap")
        start = self.index(x, y)
        return self.data[start : start + self.channels]

    def dequantized(self) -> "Fmap":
        if self.fmt is None:
            return self
        real = dequantize_array(self.data, self.fmt).astype(np.float32)
        return Fmap(self.width, self.height, self.channels, real)

    def quantized(self, fmt: QFormat) -> "Fmap":
        if self.fmt is not None:
            raise FormatError("fmap is already quantized")
        return Fmap(self.width, self.height, self.channels, quantize_array(self.data, fmt), fmt)


def pixel_slice(fmap: Fmap, x: int, y: int) -> np.ndarray:
    return fmap.pixel_slice(x, y)


@dataclass
class QTensor:
    """Quantized convolution weights laid out ``[out][ky][kx][in]``.

    Input channels are innermost so one 16-lane operand fetch is contiguous.
    """

    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    fmt: QFormat
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.fmt.total_bits != 8:
            raise FormatError(f"weight tensors are 8-bit, got {self.fmt}")
        self.data = np.ascontiguousarray(self.data).reshape(-1)
        expected = self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
        if self.data.size != expected:
            raise ShapeError(f"weight data length {self.data.size} != {expected}")
        if self.data.dtype != np.int8:
            wide = np.asarray(self.data, dtype=np.int64)
            if wide.size and (wide.min() < -128 or wide.max() > 127):
                raise FormatError("weight raws exceed the 8-bit range")
            self.data = wide.astype(np.int8)

    @property
    def shape(self) -> tuple:
        return (self.out_channels, self.kernel_h, self.kernel_w, self.in_channels)

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @classmethod
    def from_array(cls, array: np.ndarray, fmt: QFormat) -> "QTensor":
        out_channels, kernel_h, kernel_w, in_channels = np.asarray(array).shape
        return cls(out_channels, in_channels, kernel_h, kernel_w, fmt, np.asarray(array))
