"""
Functional model of the SqueezeJet convolution accelerator.

The accelerator computes stride-1 1x1 and 3x3 convolutions with ``P``
replicated MAC-16 units. Each unit multiplies a 16-wide input-channel chunk by
the matching weights and accumulates in one clock, and the ``P`` units work on
``P`` output channels of the same pixel at once. Input rows flow through an
input tile buffer (ITB, ``kernel_h`` rows deep) and a kernel-sized window
(ITBW) is cut from it for every output pixel. Output pixels leave in row-major
order with all channels of one pixel before the next.

The first network layer (3 input channels, stride 2) runs on a dedicated unit
that pads its channels to one 16-lane chunk.

Integer contract shared with the naive quantized backend::

    acc32 = align(bias, bias_frac -> weight_frac + input_frac) + sum(w * a)
    out16 = saturate16(round_shift(acc32, weight_frac + input_frac - output_frac))
    out16 = max(out16, 0) if relu
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, field_validator

from .errors import AccumulatorOverflowError, ConstraintViolation, FormatError, ShapeError
from .fixedpoint import Fmap, QTensor, saturate, shift_round
from .reference import conv_hwc, conv_output_dim
from .weights import LayerQSpec

logger = logging.getLogger(__name__)

LANE_WIDTH = 16
ACC_MIN = -(1 << 31)
ACC_MAX = (1 << 31) - 1


class SqjConfig(BaseModel):
    """Accelerator parameters."""

    model_config = ConfigDict(frozen=True)

    mac_units: int = 8
    lane_width: int = LANE_WIDTH
    clock_mhz: float = 100.0

    @field_validator("mac_units")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value < 4 or value & (value - 1):
            raise ValueError(f"mac_units must be 2**n with n >= 2, got {value}")
        return value

    @field_validator("lane_width")
    @classmethod
    def _fixed_lanes(cls, value: int) -> int:
        if value != LANE_WIDTH:
            raise ValueError(f"lane_width is fixed at {LANE_WIDTH}")
        return value

    @field_validator("clock_mhz")
    @classmethod
    def _positive_clock(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("clock_mhz must be positive")
        return value


def mac16(weights: Sequence[int], acts: Sequence[int], acc: int) -> int:
    """One MAC-16 operation: ``acc + sum(w_i * a_i)`` over 16 lanes."""
    if len(weights) != LANE_WIDTH or len(acts) != LANE_WIDTH:
        raise FormatError(f"mac16 takes {LANE_WIDTH} weights and activations")
    if any(not -128 <= int(w) <= 127 for w in weights):
        raise FormatError("mac16 weight outside the 8-bit range")
    if any(not -32768 <= int(a) <= 32767 for a in acts):
        raise FormatError("mac16 activation outside the 16-bit range")
    if not ACC_MIN <= int(acc) <= ACC_MAX:
        raise FormatError("mac16 accumulator outside the 32-bit range")
    total = int(acc) + sum(int(w) * int(a) for w, a in zip(weights, acts))
    if not ACC_MIN <= total <= ACC_MAX:
        raise AccumulatorOverflowError(f"mac16 result {total} overflows 32 bits")
    return total


class MacArray:
    """``P`` replicated MAC-16 units with an issue counter.

    Vectorized form of :func:`mac16`: one issue is one clock in which every
    unit performs one ``mac16`` on a 16-lane chunk, so ``mac_cycles`` counts
    ``mac16`` invocations per unit.
    """

    def __init__(self, units: int):
        self.units = units
        self.mac_cycles = 0

    def run(self, lanes: np.ndarray, weight_lanes: np.ndarray, acc: np.ndarray) -> np.ndarray:
        """Accumulate ``T`` chunks for ``n`` pixels on up to ``P`` output channels.

        ``lanes`` is (n, T, 16) activations, ``weight_lanes`` (p, T, 16) with
        p <= P, ``acc`` (n, p) starting accumulators. Every partial sum is
        checked against the 32-bit range.
        """
        pixels, chunks, _ = lanes.shape
        if weight_lanes.shape[0] > self.units:
            raise ConstraintViolation("mac-units", f"{weight_lanes.shape[0]} > {self.units}")
        per_cycle = np.einsum("ntl,ptl->ntp", lanes, weight_lanes)
        running = acc[:, None, :] + np.cumsum(per_cycle, axis=1)
        if running.size and (running.min() < ACC_MIN or running.max() > ACC_MAX):
            raise AccumulatorOverflowError(
                "accumulator left the 32-bit range; check the layer's fixed-point formats"
            )
        self.mac_cycles += pixels * chunks
        return running[:, -1, :]


class ItbState:
    """Input tile buffer plus the window for the pixel being computed.

    Holds the last ``kernel_h`` zero-padded input rows. ``window(x)`` is the
    ``kernel_h x kernel_w x channels`` ITBW for output column ``x``.
    """

    def __init__(
        self, kernel_h: int, kernel_w: int, padded_width: int, channels: int, stride: int = 1
    ):
        self.kernel_h = kernel_h
        self.kernel_w = kernel_w
        self.padded_width = padded_width
        self.channels = channels
        self.stride = stride
        self.rows: Deque[np.ndarray] = deque(maxlen=kernel_h)
        self.rows_loaded = 0

    @property
    def ready(self) -> bool:
        return len(self.rows) == self.kernel_h

    def push_row(self, row: np.ndarray) -> None:
        if row.shape != (self.padded_width, self.channels):
            raise ShapeError(f"ITB row shape {row.shape} != {(self.padded_width, self.channels)}")
        self.rows.append(row)
        self.rows_loaded += 1

    def tile(self) -> np.ndarray:
        return np.stack(self.rows)

    def window(self, x: int) -> np.ndarray:
        start = x * self.stride
        return self.tile()[:, start : start + self.kernel_w, :]

    def windows(self, out_width: int) -> np.ndarray:
        """All ITBW contents of the current output row, shape (out_w, kh, kw, c)."""
        view = sliding_window_view(self.tile(), self.kernel_w, axis=1)
        view = view.transpose(1, 0, 3, 2)
        return view[:: self.stride][:out_width]


def align_bias(bias: np.ndarray, qspec: LayerQSpec) -> np.ndarray:
    """Bias raws moved to the accumulator scale ``weight_frac + input_frac``."""
    shift = qspec.bias_fmt.frac_bits - qspec.accumulator_frac_bits
    return shift_round(np.asarray(bias, dtype=np.int64), shift)


def requantize(acc: np.ndarray, qspec: LayerQSpec, relu: bool) -> np.ndarray:
    """Accumulator values to 16-bit output raws."""
    shift = qspec.accumulator_frac_bits - qspec.output_fmt.frac_bits
    out = saturate(shift_round(acc, shift), 16)
    if relu:
        out = np.maximum(out, 0)
    return out.astype(np.int16)


def _check_input(input: Fmap, weights: QTensor, qspec: LayerQSpec) -> None:
    if input.fmt is None:
        raise FormatError("quantized convolution needs a quantized fmap")
    if input.fmt != qspec.input_fmt:
        raise FormatError(f"input fmap format {input.fmt} != layer input format {qspec.input_fmt}")
    if weights.fmt != qspec.weight_fmt:
        raise FormatError(f"weight format {weights.fmt} != layer weight format {qspec.weight_fmt}")
    if input.channels != weights.in_channels:
        raise ShapeError(
            f"input has {input.channels} channels, weights expect {weights.in_channels}"
        )


def conv_quant_naive(
    input: Fmap,
    weights: QTensor,
    bias: np.ndarray,
    qspec: LayerQSpec,
    stride: int = 1,
    pad: int = 0,
    relu: bool = True,
) -> Fmap:
    """Direct quantized convolution, the ``reference-quant`` backend."""
    _check_input(input, weights, qspec)
    out_h = conv_output_dim(input.height, weights.kernel_h, stride, pad)
    out_w = conv_output_dim(input.width, weights.kernel_w, stride, pad)
    if out_h < 1 or out_w < 1:
        raise ShapeError("kernel larger than padded input")
    acc = np.empty((out_h, out_w, weights.out_channels), dtype=np.int64)
    acc[...] = align_bias(bias, qspec)
    conv_hwc(input.as_hwc(), weights.as_array(), stride, pad, acc)
    if acc.size and (acc.min() < ACC_MIN or acc.max() > ACC_MAX):
        raise AccumulatorOverflowError("accumulator left the 32-bit range")
    return Fmap.from_hwc(requantize(acc, qspec, relu), qspec.output_fmt)


@dataclass
class LayerDims:
    """Geometry of one accelerated convolution."""

    h_out: int
    w_out: int
    c_in: int
    c_out: int
    kernel: int
    w_in: Optional[int] = None

    @property
    def input_width(self) -> int:
        return self.w_in if self.w_in is not None else self.w_out


@dataclass
class CycleReport:
    mac_cycles: int
    buffer_init_cycles: int
    total_cycles: int
    latency_ms: float

    def to_record(self) -> Dict[str, object]:
        return asdict(self)

    def to_text(self) -> str:
        return " ".join(f"{key}={value}" for key, value in self.to_record().items())


def estimate_cycles(dims: LayerDims, cfg: SqjConfig = SqjConfig()) -> CycleReport:
    """Analytic cycle count of one convolution on the accelerator.

    MAC cycles are exact for the model; the buffer term counts one ITB fill
    pass. Memory traffic and pipeline fill are not modeled, so the latency is
    a lower bound.
    """
    chunks = math.ceil(dims.c_in / cfg.lane_width)
    groups = math.ceil(dims.c_out / cfg.mac_units)
    mac_cycles = dims.h_out * dims.w_out * chunks * dims.kernel * dims.kernel * groups
    buffer_init_cycles = chunks * dims.kernel * dims.input_width
    total = mac_cycles + buffer_init_cycles
    return CycleReport(
        mac_cycles=mac_cycles,
        buffer_init_cycles=buffer_init_cycles,
        total_cycles=total,
        latency_ms=total / (cfg.clock_mhz * 1000.0),
    )


class SqjEngine:
    """One accelerator instance. Invocations are sequential; config is immutable."""

    def __init__(self, cfg: SqjConfig = SqjConfig(), trace: bool = False):
        self.cfg = cfg
        self.macs = MacArray(cfg.mac_units)
        self.trace = trace
        self.emitted: List[Tuple[int, int]] = []

    @property
    def mac_cycles(self) -> int:
        return self.macs.mac_cycles

    def reset_counters(self) -> None:
        self.macs.mac_cycles = 0
        self.emitted = []

    def conv_sqj(
        self,
        input: Fmap,
        weights: QTensor,
        bias: np.ndarray,
        qspec: LayerQSpec,
        relu: bool = True,
        stride: int = 1,
        pad: Optional[int] = None,
    ) -> Fmap:
        kernel = (weights.kernel_h, weights.kernel_w)
        if pad is None:
            pad = weights.kernel_h // 2
        if stride != 1:
            raise ConstraintViolation("stride-1", f"stride is {stride}")
        if kernel not in ((1, 1), (3, 3)) or pad != weights.kernel_h // 2:
            raise ConstraintViolation(
                "kernel-1x1-or-3x3-pad-1", f"kernel {kernel[0]}x{kernel[1]} pad {pad}"
            )
        if weights.in_channels % self.cfg.lane_width:
            raise ConstraintViolation(
                "input-channels-multiple-of-16", f"{weights.in_channels} input channels"
            )
        if weights.out_channels % self.cfg.mac_units:
            raise ConstraintViolation(
                f"output-channels-multiple-of-{self.cfg.mac_units}",
                f"{weights.out_channels} output channels",
            )
        _check_input(input, weights, qspec)
        return self._stream(input, weights.as_array(), bias, qspec, stride, pad, relu)

    def conv_first_layer(
        self,
        input: Fmap,
        weights: QTensor,
        bias: np.ndarray,
        qspec: LayerQSpec,
        relu: bool = True,
    ) -> Fmap:
        """Dedicated first-layer unit: 3 channels, 3x3 kernel, stride 2, no padding."""
        if input.channels != 3 or weights.in_channels != 3:
            raise ConstraintViolation(
                "first-layer-3-channels", f"{input.channels} input channels"
            )
        if (weights.kernel_h, weights.kernel_w) != (3, 3):
            raise ConstraintViolation(
                "first-layer-3x3-kernel", f"{weights.kernel_h}x{weights.kernel_w}"
            )
        _check_input(input, weights, qspec)
        lanes = self.cfg.lane_width - weights.in_channels
        widened = np.pad(input.as_hwc(), ((0, 0), (0, 0), (0, lanes)))
        taps = np.pad(weights.as_array(), ((0, 0), (0, 0), (0, 0), (0, lanes)))
        wide_input = Fmap.from_hwc(widened, input.fmt)
        return self._stream(wide_input, taps, bias, qspec, 2, 0, relu)

    def _stream(
        self,
        input: Fmap,
        taps: np.ndarray,
        bias: np.ndarray,
        qspec: LayerQSpec,
        stride: int,
        pad: int,
        relu: bool,
    ) -> Fmap:
        out_c, kernel_h, kernel_w, channels = taps.shape
        out_h = conv_output_dim(input.height, kernel_h, stride, pad)
        out_w = conv_output_dim(input.width, kernel_w, stride, pad)
        if out_h < 1 or out_w < 1:
            raise ShapeError("kernel larger than padded input")

        chunks = kernel_h * kernel_w * channels // self.cfg.lane_width
        weight_lanes = taps.astype(np.int64).reshape(out_c, chunks, self.cfg.lane_width)
        bias_acc = align_bias(bias, qspec)
        units = self.cfg.mac_units

        source = input.as_hwc()
        padded_width = input.width + 2 * pad
        itb = ItbState(kernel_h, kernel_w, padded_width, channels, stride)
        blank = np.zeros((padded_width, channels), dtype=source.dtype)
        output = np.empty((out_h, out_w, out_c), dtype=np.int16)

        for row_index in range(input.height + 2 * pad):
            y_in = row_index - pad
            if 0 <= y_in < input.height:
                itb.push_row(np.pad(source[y_in], ((pad, pad), (0, 0))))
            else:
                itb.push_row(blank)
            if not itb.ready:
                continue
            first_row = row_index - (kernel_h - 1)
            if first_row % stride:
                continue
            y = first_row // stride
            if y >= out_h:
                break

            lanes = itb.windows(out_w).astype(np.int64).reshape(out_w, chunks, self.cfg.lane_width)
            acc = np.empty((out_w, out_c), dtype=np.int64)
            for start in range(0, out_c, units):
                stop = min(start + units, out_c)
                seed = np.broadcast_to(bias_acc[start:stop], (out_w, stop - start))
                acc[:, start:stop] = self.macs.run(lanes, weight_lanes[start:stop], seed)
            output[y] = requantize(acc, qspec, relu)
            if self.trace:
                self.emitted.extend((x, y) for x in range(out_w))

        logger.debug(
            "streamed %dx%dx%d -> %dx%dx%d, %d mac cycles so far",
            input.width, input.height, input.channels, out_w, out_h, out_c, self.mac_cycles,
        )
        return Fmap.from_hwc(output, qspec.output_fmt)


def conv_sqj(
    input: Fmap,
    weights: QTensor,
    bias: np.ndarray,
    qspec: LayerQSpec,
    cfg: SqjConfig = SqjConfig(),
    relu: bool = True,
) -> Fmap:
    return SqjEngine(cfg).conv_sqj(input, weights, bias, qspec, relu=relu)


def conv_first_layer(
    input: Fmap,
    weights: QTensor,
    bias: np.ndarray,
    qspec: LayerQSpec,
    relu: bool = True,
    cfg: SqjConfig = SqjConfig(),
) -> Fmap:
    return SqjEngine(cfg).conv_first_layer(input, weights, bias, qspec, relu=relu)


def trace_stream(
    input: Fmap,
    weights: QTensor,
    bias: np.ndarray,
    qspec: LayerQSpec,
    cfg: SqjConfig = SqjConfig(),
) -> List[Tuple[int, int]]:
    """Output pixel coordinates in the order the accelerator emits them."""
    engine = SqjEngine(cfg, trace=True)
    engine.conv_sqj(input, weights, bias, qspec)
    return engine.emitted
