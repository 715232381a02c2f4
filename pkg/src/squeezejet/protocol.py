"""
Wire format of the recognition service.

All multi-byte integers are big-endian.

Request::

    "SQNJ" | version u8 | width u16 | height u16 | channels u8 |
    pixel_format u8 | payload_len u32 | payload

Response::

    "SQNR" | status u8 | count u8 | count x (class_id u16 | probability f32)

A response with a non-zero status carries ``msg_len u16 | utf-8 message`` in
place of the entries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

from .errors import ProtocolError
from .preprocess import RgbImage

REQUEST_MAGIC = b"SQNJ"
RESPONSE_MAGIC = b"SQNR"
VERSION = 1
PIXEL_FORMAT_RGB8 = 0
TOP_K = 5

REQUEST_HEADER = struct.Struct(">4sBHHBBI")
RESPONSE_HEADER = struct.Struct(">4sBB")
ENTRY = struct.Struct(">Hf")
MESSAGE_LEN = struct.Struct(">H")

DEFAULT_DIMS = (227, 227, 3)


class Status(IntEnum):
    OK = 0
    BAD_MAGIC = 1
    BAD_VERSION = 2
    WRONG_DIMS = 3
    WRONG_PIXEL_FORMAT = 4
    TRUNCATED = 5
    INTERNAL_ERROR = 6
    SERVER_BUSY = 7


Entry = Tuple[int, float]


@dataclass
class RecognitionRequest:
    width: int
    height: int
    channels: int
    pixel_format: int
    payload: bytes = field(repr=False)

    @classmethod
    def from_image(cls, image: RgbImage) -> "RecognitionRequest":
        return cls(image.width, image.height, 3, PIXEL_FORMAT_RGB8, image.to_bytes())

    def encode(self) -> bytes:
        header = REQUEST_HEADER.pack(
            REQUEST_MAGIC,
            VERSION,
            self.width,
            self.height,
            self.channels,
            self.pixel_format,
            len(self.payload),
        )
        return header + self.payload

    def image(self) -> RgbImage:
        return RgbImage.from_bytes(self.width, self.height, self.payload)


@dataclass
class RecognitionResponse:
    status: Status
    entries: List[Entry] = field(default_factory=list)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


def check_request_header(blob: bytes, dims: Tuple[int, int, int] = DEFAULT_DIMS) -> int:
    """Validate the fixed-size request header; returns the payload length.

    Raises :class:`ProtocolError` with the status to answer with.
    """
    prefix = blob[: len(REQUEST_MAGIC)]
    if prefix != REQUEST_MAGIC[: len(prefix)]:
        raise ProtocolError(Status.BAD_MAGIC, f"bad magic {prefix!r}")
    if len(blob) < REQUEST_HEADER.size:
        raise ProtocolError(
            Status.TRUNCATED, f"request header has {len(blob)} of {REQUEST_HEADER.size} bytes"
        )
    fields = REQUEST_HEADER.unpack_from(blob)
    _, version, width, height, channels, pixel_format, payload_len = fields
    if version != VERSION:
        raise ProtocolError(Status.BAD_VERSION, f"unsupported protocol version {version}")
    if (width, height, channels) != dims:
        raise ProtocolError(
            Status.WRONG_DIMS,
            f"image must be {dims[0]}x{dims[1]}x{dims[2]}, got {width}x{height}x{channels}",
        )
    if pixel_format != PIXEL_FORMAT_RGB8:
        raise ProtocolError(Status.WRONG_PIXEL_FORMAT, f"unsupported pixel format {pixel_format}")
    expected = width * height * channels
    if payload_len != expected:
        raise ProtocolError(
            Status.WRONG_DIMS, f"payload_len {payload_len} != {width}*{height}*{channels}"
        )
    return payload_len


def decode_request(blob: bytes, dims: Tuple[int, int, int] = DEFAULT_DIMS) -> RecognitionRequest:
    payload_len = check_request_header(blob, dims)
    payload = blob[REQUEST_HEADER.size :]
    if len(payload) < payload_len:
        raise ProtocolError(Status.TRUNCATED, f"payload has {len(payload)} of {payload_len} bytes")
    if len(payload) > payload_len:
        raise ProtocolError(
            Status.WRONG_DIMS, f"{len(payload) - payload_len} trailing bytes after payload"
        )
    width, height, channels = dims
    return RecognitionRequest(width, height, channels, PIXEL_FORMAT_RGB8, bytes(payload))


def encode_response(entries: Sequence[Entry]) -> bytes:
    if len(entries) > 255:
        raise ValueError(f"at most 255 entries fit in a response, got {len(entries)}")
    parts = [RESPONSE_HEADER.pack(RESPONSE_MAGIC, Status.OK, len(entries))]
    parts.extend(ENTRY.pack(class_id, probability) for class_id, probability in entries)
    return b"".join(parts)


def encode_error(status: int, message: str) -> bytes:
    if status == Status.OK:
        raise ValueError("error frames need a non-zero status")
    text = message.encode("utf-8")[: 0xFFFF]
    # Cutting may split a multi-byte character.
    text = text.decode("utf-8", errors="ignore").encode("utf-8")
    return RESPONSE_HEADER.pack(RESPONSE_MAGIC, status, 0) + MESSAGE_LEN.pack(len(text)) + text


def decode_response(blob: bytes) -> RecognitionResponse:
    """Parse a response frame; malformed frames raise :class:`ProtocolError`."""
    if len(blob) < RESPONSE_HEADER.size:
        raise ProtocolError(Status.TRUNCATED, f"response has only {len(blob)} bytes")
    magic, status_code, count = RESPONSE_HEADER.unpack_from(blob)
    if magic != RESPONSE_MAGIC:
        raise ProtocolError(Status.BAD_MAGIC, f"bad response magic {magic!r}")
    try:
        status = Status(status_code)
    except ValueError:
        raise ProtocolError(Status.INTERNAL_ERROR, f"unknown status {status_code}") from None
    body = blob[RESPONSE_HEADER.size :]

    if status is not Status.OK:
        if len(body) < MESSAGE_LEN.size:
            raise ProtocolError(Status.TRUNCATED, "error response lacks its message length")
        (length,) = MESSAGE_LEN.unpack_from(body)
        text = body[MESSAGE_LEN.size : MESSAGE_LEN.size + length]
        if len(text) < length:
            raise ProtocolError(Status.TRUNCATED, "error message is truncated")
        return RecognitionResponse(status, [], text.decode("utf-8", errors="replace"))

    needed = count * ENTRY.size
    if len(body) < needed:
        raise ProtocolError(Status.TRUNCATED, f"response has {len(body)} of {needed} entry bytes")
    if len(body) > needed:
        raise ProtocolError(Status.WRONG_DIMS, "trailing bytes after response entries")
    entries = [ENTRY.unpack_from(body, i * ENTRY.size) for i in range(count)]
    return RecognitionResponse(status, [(int(c), float(p)) for c, p in entries])


def request_size(dims: Tuple[int, int, int] = DEFAULT_DIMS) -> int:
    width, height, channels = dims
    return REQUEST_HEADER.size + width * height * channels


def status_name(status: Optional[int]) -> str:
    try:
        return Status(status).name.lower().replace("_", " ")
    except ValueError:
        return f"status {status}"
