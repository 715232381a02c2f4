"""
Parameter storage and the SQNW weight file.

A store holds one record per convolution (``conv1``, ``fire2/squeeze1x1``,
``fire2/expand1x1``, ``fire2/expand3x3`` ... ``conv10``). Each record can carry
float parameters, quantized parameters, or both.

SQNW layout, all multi-byte integers little-endian::

    magic "SQNW" | version u16 | record count u32
    per record:
      name_len u16 | name utf-8 | role u8 | out u16 | in u16 | kh u8 | kw u8
      stride u8 | pad u8 | flags u8 (bit0 float, bit1 quantized)
      quantized: frac bits i8 x4 (weight, bias, input, output)
                 weight count u32 | int8 weights | bias count u32 | int8 bias
      float:     weight count u32 | f32 weights | bias count u32 | f32 bias
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np

from .errors import (
    BadMagicError,
    CorruptRecordError,
    FormatError,
    ShapeError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .fixedpoint import QFormat, QTensor
from .reference import FloatLayerParams

logger = logging.getLogger(__name__)

MAGIC = b"SQNW"
VERSION = 1

_FLAG_FLOAT = 0x01
_FLAG_QUANT = 0x02


class ConvRole(IntEnum):
    """Kind tag of a stored convolution."""

    CONV = 0
    SQUEEZE = 1
    EXPAND1 = 2
    EXPAND3 = 3


@dataclass(frozen=True)
class LayerQSpec:
    """Fixed-point formats of one convolution: 8-bit parameters, 16-bit fmaps."""

    weight_fmt: QFormat
    bias_fmt: QFormat
    input_fmt: QFormat
    output_fmt: QFormat

    def __post_init__(self) -> None:
        widths = (
            self.weight_fmt.total_bits,
            self.bias_fmt.total_bits,
            self.input_fmt.total_bits,
            self.output_fmt.total_bits,
        )
        if widths != (8, 8, 16, 16):
            raise FormatError(f"LayerQSpec widths must be 8/8/16/16, got {widths}")

    @property
    def accumulator_frac_bits(self) -> int:
        return self.weight_fmt.frac_bits + self.input_fmt.frac_bits

    @classmethod
    def from_frac_bits(cls, weight: int, bias: int, input: int, output: int) -> "LayerQSpec":
        return cls(QFormat(8, weight), QFormat(8, bias), QFormat(16, input), QFormat(16, output))

    def frac_bits(self) -> tuple:
        return (
            self.weight_fmt.frac_bits,
            self.bias_fmt.frac_bits,
            self.input_fmt.frac_bits,
            self.output_fmt.frac_bits,
        )


@dataclass
class QuantConvParams:
    weights: QTensor
    bias: np.ndarray
    qspec: LayerQSpec
    stride: int = 1
    pad: int = 0

    def __post_init__(self) -> None:
        self.bias = np.asarray(self.bias).reshape(-1)
        if self.bias.size != self.weights.out_channels:
            raise ShapeError(
                f"bias length {self.bias.size} != out_channels {self.weights.out_channels}"
            )
        if self.bias.dtype != np.int8:
            wide = self.bias.astype(np.int64)
            if wide.size and (wide.min() < -128 or wide.max() > 127):
                raise FormatError("bias raws exceed the 8-bit range")
            self.bias = wide.astype(np.int8)
        if self.weights.fmt != self.qspec.weight_fmt:
            raise FormatError(
                f"weight tensor format {self.weights.fmt} != qspec {self.qspec.weight_fmt}"
            )


@dataclass
class ConvWeights:
    name: str
    role: ConvRole
    float_params: Optional[FloatLayerParams] = None
    quant_params: Optional[QuantConvParams] = None

    @property
    def dims(self) -> tuple:
        """(out, in, kh, kw, stride, pad) taken from whichever params are present."""
        if self.quant_params is not None:
            q = self.quant_params
            w = q.weights
            return (w.out_channels, w.in_channels, w.kernel_h, w.kernel_w, q.stride, q.pad)
        if self.float_params is not None:
            f = self.float_params
            return (f.out_channels, f.in_channels, f.kernel_h, f.kernel_w, f.stride, f.pad)
        raise ShapeError(f"record {self.name} carries no parameters")


@dataclass
class WeightStore:
    """Per-convolution parameters in network order."""

    records: Dict[str, ConvWeights] = field(default_factory=dict)

    def add(self, record: ConvWeights) -> None:
        self.records[record.name] = record

    def __getitem__(self, name: str) -> ConvWeights:
        return self.records[name]

    def __contains__(self, name: object) -> bool:
        return name in self.records

    def __iter__(self) -> Iterator[ConvWeights]:
        return iter(self.records.values())

    def __len__(self) -> int:
        return len(self.records)

    def float_params(self, name: str) -> FloatLayerParams:
        record = self.records.get(name)
        if record is None or record.float_params is None:
            raise KeyError(f"no float parameters for {name}")
        return record.float_params

    def quant_params(self, name: str) -> QuantConvParams:
        record = self.records.get(name)
        if record is None or record.quant_params is None:
            raise KeyError(f"no quantized parameters for {name}")
        return record.quant_params

    @property
    def has_float(self) -> bool:
        return bool(self.records) and all(r.float_params is not None for r in self)

    @property
    def has_quant(self) -> bool:
        return bool(self.records) and all(r.quant_params is not None for r in self)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise TruncatedFileError(
                f"truncated weight file: {what} needs {size} bytes at offset {self.offset}"
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, expected: int, what: str) -> np.ndarray:
        (count,) = self.unpack("<I", f"{what} count")
        if count != expected:
            raise ShapeMismatchError(f"{what}: {count} values stored, dims imply {expected}")
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype).copy()


def _encode_record(record: ConvWeights) -> bytes:
    out_c, in_c, kh, kw, stride, pad = record.dims
    name = record.name.encode("utf-8")
    flags = (_FLAG_FLOAT if record.float_params is not None else 0) | (
        _FLAG_QUANT if record.quant_params is not None else 0
    )
    parts: List[bytes] = [
        struct.pack("<H", len(name)),
        name,
        struct.pack("<BHHBBBBB", int(record.role), out_c, in_c, kh, kw, stride, pad, flags),
    ]
    if record.quant_params is not None:
        q = record.quant_params
        parts.append(struct.pack("<bbbb", *q.qspec.frac_bits()))
        parts.append(struct.pack("<I", q.weights.data.size))
        parts.append(q.weights.data.astype("<i1").tobytes())
        parts.append(struct.pack("<I", q.bias.size))
        parts.append(q.bias.astype("<i1").tobytes())
    if record.float_params is not None:
        f = record.float_params
        parts.append(struct.pack("<I", f.weights.size))
        parts.append(f.weights.astype("<f4").tobytes())
        parts.append(struct.pack("<I", f.bias.size))
        parts.append(f.bias.astype("<f4").tobytes())
    return b"".join(parts)


def dump_weights(store: WeightStore) -> bytes:
    header = MAGIC + struct.pack("<HI", VERSION, len(store))
    return header + b"".join(_encode_record(record) for record in store)


def parse_weights(payload: bytes) -> WeightStore:
    reader = _Reader(payload)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = reader.unpack("<HI", "header")
    if version != VERSION:
        raise VersionMismatchError(f"weight file version {version}, supported {VERSION}")

    store = WeightStore()
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptRecordError(f"record name at offset {reader.offset} is not utf-8") from exc
        role, out_c, in_c, kh, kw, stride, pad, flags = reader.unpack("<BHHBBBBB", "dims")
        try:
            kind = ConvRole(role)
        except ValueError as exc:
            raise CorruptRecordError(f"{name}: unknown kind tag {role}") from exc
        weight_count = out_c * in_c * kh * kw
        record = ConvWeights(name=name, role=kind)
        if flags & _FLAG_QUANT:
            frac = reader.unpack("<bbbb", f"{name} frac bits")
            try:
                qspec = LayerQSpec.from_frac_bits(*frac)
            except FormatError as exc:
                raise CorruptRecordError(f"{name}: {exc}") from exc
            raw_w = reader.array("<i1", weight_count, f"{name} int8 weights")
            raw_b = reader.array("<i1", out_c, f"{name} int8 bias")
            tensor = QTensor(out_c, in_c, kh, kw, qspec.weight_fmt, raw_w.astype(np.int8))
            record.quant_params = QuantConvParams(
                tensor, raw_b.astype(np.int8), qspec, stride=stride, pad=pad
            )
        if flags & _FLAG_FLOAT:
            weights = reader.array("<f4", weight_count, f"{name} float weights")
            bias = reader.array("<f4", out_c, f"{name} float bias")
            record.float_params = FloatLayerParams(
                weights.astype(np.float32).reshape(out_c, kh, kw, in_c),
                bias.astype(np.float32),
                stride=stride,
                pad=pad,
            )
        store.add(record)
    if reader.offset != len(payload):
        raise CorruptRecordError(
            f"{len(payload) - reader.offset} trailing bytes after {count} records"
        )
    return store


def save_weights(store: WeightStore, path: Union[str, Path]) -> None:
    payload = dump_weights(store)
    Path(path).write_bytes(payload)
    logger.info("Wrote %d weight records (%d bytes) to %s", len(store), len(payload), path)


def load_weights(path: Union[str, Path]) -> WeightStore:
    store = parse_weights(Path(path).read_bytes())
    logger.info("Loaded %d weight records from %s", len(store), path)
    return store
