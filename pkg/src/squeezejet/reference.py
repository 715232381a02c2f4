"""
Floating-point reference layers.

These are the correctness oracle for the quantized engine and the "CPU path"
of the benchmarks. Inputs and outputs are float32 fmaps; sums are carried in
float64 and stored back as float32 so repeated runs are bit-identical.

Activation placement (ReLU after every convolution, including the Fire
squeeze) and floor-mode pooling follow the public SqueezeNet v1.1 model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .fixedpoint import Fmap


@dataclass
class FloatLayerParams:
    """Float convolution parameters, weights laid out ``[out][ky][kx][in]``."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be [out][ky][kx][in], got shape {self.weights.shape}")
        if self.bias.size != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.size} != out_channels {self.weights.shape[0]}"
            )
        if self.stride < 1 or self.pad < 0:
            raise ShapeError(f"invalid stride {self.stride} / pad {self.pad}")

    @property
    def out_channels(self) -> int:
        return int(self.weights.shape[0])

    @property
    def kernel_h(self) -> int:
        return int(self.weights.shape[1])

    @property
    def kernel_w(self) -> int:
        return int(self.weights.shape[2])

    @property
    def in_channels(self) -> int:
        return int(self.weights.shape[3])


def conv_output_dim(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv_hwc(
    array: np.ndarray,
    weights: np.ndarray,
    stride: int,
    pad: int,
    accumulator: np.ndarray,
) -> np.ndarray:
    """Accumulate a direct convolution of an (h, w, c) array into ``accumulator``.

    Shared by the float reference and the naive quantized backend; the dtype of
    ``accumulator`` decides the arithmetic (float64 or int64).
    """
    out_h, out_w, _ = accumulator.shape
    _, kernel_h, kernel_w, _ = weights.shape
    padded = np.pad(array, ((pad, pad), (pad, pad), (0, 0))).astype(accumulator.dtype)
    taps = weights.astype(accumulator.dtype)
    for ky in range(kernel_h):
        for kx in range(kernel_w):
            patch = padded[
                ky : ky + stride * (out_h - 1) + 1 : stride,
                kx : kx + stride * (out_w - 1) + 1 : stride,
                :,
            ]
            accumulator += patch @ taps[:, ky, kx, :].T
    return accumulator


def conv2d_ref(input: Fmap, params: FloatLayerParams, relu: bool = True) -> Fmap:
    if not input.is_float:
        raise ShapeError("conv2d_ref expects a float fmap")
    if input.channels != params.in_channels:
        raise ShapeError(
            f"input has {input.channels} channels, weights expect {params.in_channels}"
        )
    out_h = conv_output_dim(input.height, params.kernel_h, params.stride, params.pad)
    out_w = conv_output_dim(input.width, params.kernel_w, params.stride, params.pad)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"kernel {params.kernel_h}x{params.kernel_w} larger than padded input")

    accumulator = np.empty((out_h, out_w, params.out_channels), dtype=np.float64)
    accumulator[...] = params.bias.astype(np.float64)
    conv_hwc(input.as_hwc(), params.weights, params.stride, params.pad, accumulator)
    if relu:
        np.maximum(accumulator, 0.0, out=accumulator)
    return Fmap.from_hwc(accumulator.astype(np.float32))


def max_pool_hwc(array: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Floor-mode max pooling of an (h, w, c) array of any dtype."""
    height, width, _ = array.shape
    if kernel > height or kernel > width:
        raise ShapeError(f"pool kernel {kernel} larger than {width}x{height} input")
    if kernel < 1 or stride < 1:
        raise ShapeError(f"invalid pool kernel {kernel} / stride {stride}")
    windows = sliding_window_view(array, (kernel, kernel), axis=(0, 1))
    return windows[::stride, ::stride].max(axis=(-2, -1))


def maxpool_ref(input: Fmap, kernel: int = 3, stride: int = 2) -> Fmap:
    pooled = max_pool_hwc(input.as_hwc(), kernel, stride)
    return Fmap.from_hwc(pooled, input.fmt)


def avgpool_global_ref(input: Fmap) -> Fmap:
    real = input.dequantized().as_hwc().astype(np.float64)
    means = real.sum(axis=(0, 1)) / (input.width * input.height)
    return Fmap(1, 1, input.channels, means.astype(np.float32))


def softmax_ref(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if logits.size == 0:
        raise ShapeError("softmax of an empty vector")
    exps = np.exp(logits - logits.max())
    return exps / exps.sum()


def fire_ref(
    input: Fmap,
    squeeze: FloatLayerParams,
    expand1: FloatLayerParams,
    expand3: FloatLayerParams,
) -> Fmap:
    """Fire module: 1x1 squeeze, then parallel 1x1 / 3x3 expands concatenated."""
    if expand1.in_channels != squeeze.out_channels or expand3.in_channels != squeeze.out_channels:
        raise ShapeError(
            f"expand layers take {expand1.in_channels}/{expand3.in_channels} channels, "
            f"squeeze produces {squeeze.out_channels}"
        )
    squeezed = conv2d_ref(input, squeeze, relu=True)
    left = conv2d_ref(squeezed, expand1, relu=True)
    right = conv2d_ref(squeezed, expand3, relu=True)
    if left.shape[:2] != right.shape[:2]:
        raise ShapeError(f"expand outputs differ spatially: {left.shape} vs {right.shape}")
    joined = np.concatenate([left.as_hwc(), right.as_hwc()], axis=2)
    return Fmap.from_hwc(joined)
