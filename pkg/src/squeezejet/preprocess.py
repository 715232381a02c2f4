"""
Image preprocessing for the recognition pipeline.

The client side decodes a binary PPM and resizes it to the network geometry;
the server side reorders channels, subtracts the per-channel means and
quantizes to the first layer's input format.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .config import ChannelOrder, PreprocessConfig
from .errors import (
    BadMaxvalError,
    PpmError,
    ShapeError,
    TruncatedRasterError,
    UnsupportedPpmError,
)
from .fixedpoint import Fmap, QFormat, quantize_array
from .quantizer import choose_frac_bits

logger = logging.getLogger(__name__)

PPM_MAGIC = b"P6"
PPM_MAXVAL = 255
_WHITESPACE = b" \t\r\n\v\f"


@dataclass
class RgbImage:
    """8-bit interleaved RGB image, ``data`` shaped (height, width, 3)."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ShapeError(f"image dims must be positive, got {self.width}x{self.height}")
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.shape != (self.height, self.width, 3):
            self.data = self.data.reshape(self.height, self.width, 3)

    @classmethod
    def from_bytes(cls, width: int, height: int, payload: bytes) -> "RgbImage":
        expected = width * height * 3
        if len(payload) != expected:
            raise ShapeError(f"payload has {len(payload)} bytes, expected {expected}")
        return cls(width, height, np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3))

    def to_bytes(self) -> bytes:
        return self.data.tobytes()


def _header_tokens(blob: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read ``count`` whitespace separated header tokens, skipping comments."""
    tokens: List[bytes] = []
    pos = 0
    size = len(blob)
    while len(tokens) < count:
        while pos < size and blob[pos] in _WHITESPACE:
            pos += 1
        if pos < size and blob[pos] == ord("#"):
            while pos < size and blob[pos] not in b"\r\n":
                pos += 1
            continue
        if pos >= size:
            raise PpmError(f"PPM header ends after {len(tokens)} of {count} fields")
        start = pos
        while pos < size and blob[pos] not in _WHITESPACE and blob[pos] != ord("#"):
            pos += 1
        tokens.append(blob[start:pos])
    return tokens, pos


def _header_int(token: bytes, name: str) -> int:
    if not token.isdigit():
        raise PpmError(f"PPM {name} is not a number: {token[:16]!r}")
    return int(token)


def decode_ppm(blob: bytes) -> RgbImage:
    """Decode a binary ``P6`` PPM with maxval 255.

    Data after the first raster is ignored.
    """
    if blob[:2] != PPM_MAGIC:
        raise UnsupportedPpmError(f"expected a P6 PPM, got magic {blob[:2]!r}")
    tokens, pos = _header_tokens(blob, 4)
    if tokens[0] != PPM_MAGIC:
        raise UnsupportedPpmError(f"expected a P6 PPM, got magic {tokens[0][:16]!r}")
    width = _header_int(tokens[1], "width")
    height = _header_int(tokens[2], "height")
    maxval = _header_int(tokens[3], "maxval")
    if maxval != PPM_MAXVAL:
        raise BadMaxvalError(f"only maxval {PPM_MAXVAL} is supported, got {maxval}")
    if width < 1 or height < 1:
        raise PpmError(f"PPM dims must be positive, got {width}x{height}")
    if pos >= len(blob) or blob[pos] not in _WHITESPACE:
        raise TruncatedRasterError("PPM header is not followed by a raster")
    start = pos + 1
    expected = width * height * 3
    raster = blob[start : start + expected]
    if len(raster) < expected:
        raise TruncatedRasterError(f"PPM raster has {len(raster)} of {expected} bytes")
    return RgbImage.from_bytes(width, height, raster)


def load_ppm(path: Union[str, Path]) -> RgbImage:
    return decode_ppm(Path(path).read_bytes())


def _sample_grid(src: int, dst: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centers, clamped at the edges.
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    low = np.floor(pos).astype(np.int64)
    high = np.minimum(low + 1, src - 1)
    return low, high, pos - low


def resize_bilinear(image: RgbImage, target_w: int, target_h: int) -> RgbImage:
    """Bilinear resize; results round half up (``floor(v + 0.5)``)."""
    if target_w < 1 or target_h < 1:
        raise ShapeError(f"target dims must be positive, got {target_w}x{target_h}")
    if (image.width, image.height) == (target_w, target_h):
        return RgbImage(image.width, image.height, image.data.copy())

    x0, x1, fx = _sample_grid(image.width, target_w)
    y0, y1, fy = _sample_grid(image.height, target_h)
    src = image.data.astype(np.float64)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1.0 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1.0 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    blended = top * (1.0 - fy) + bottom * fy
    out = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    return RgbImage(target_w, target_h, out)


def preprocess_image(image: RgbImage, cfg: PreprocessConfig = PreprocessConfig()) -> RgbImage:
    """Client-side stage: bring the image to the network geometry."""
    return resize_bilinear(image, cfg.target_w, cfg.target_h)


def input_format_for(cfg: PreprocessConfig = PreprocessConfig()) -> QFormat:
    """Finest 16-bit format holding every mean-subtracted 8-bit pixel."""
    max_abs = max(255.0, *(abs(mean) for mean in cfg.means), *(abs(255.0 - m) for m in cfg.means))
    return QFormat(16, choose_frac_bits(max_abs, 16))


def _ordered(image: RgbImage, order: ChannelOrder) -> np.ndarray:
    if order is ChannelOrder.BGR:
        return image.data[:, :, ::-1]
    return image.data


def normalize(image: RgbImage, cfg: PreprocessConfig = PreprocessConfig()) -> Fmap:
    """Float fmap of mean-subtracted pixels in ``cfg.channel_order``."""
    if (image.width, image.height) != (cfg.target_w, cfg.target_h):
        raise ShapeError(
            f"image is {image.width}x{image.height}, expected {cfg.target_w}x{cfg.target_h}"
        )
    values = _ordered(image, cfg.channel_order).astype(np.float64)
    values -= np.asarray(cfg.means, dtype=np.float64)
    return Fmap.from_hwc(values.astype(np.float32))


def normalize_quantize(
    image: RgbImage, cfg: PreprocessConfig, input_fmt: QFormat
) -> Fmap:
    """Server-side stage: mean subtraction and input quantization."""
    if input_fmt.total_bits != 16:
        raise ShapeError(f"fmaps are 16-bit, got {input_fmt}")
    if (image.width, image.height) != (cfg.target_w, cfg.target_h):
        raise ShapeError(
            f"image is {image.width}x{image.height}, expected {cfg.target_w}x{cfg.target_h}"
        )
    values = _ordered(image, cfg.channel_order).astype(np.float64)
    values = values - np.asarray(cfg.means, dtype=np.float64)
    return Fmap.from_hwc(quantize_array(values, input_fmt), input_fmt)
