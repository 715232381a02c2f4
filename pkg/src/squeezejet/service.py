"""
Headless recognition service and its client.

One request per TCP connection: the client sends a raw 227x227 RGB image,
the server answers with the top-5 classes and closes. Connections are
accepted concurrently but inference runs one request at a time on the
single engine, the way one accelerator would serve them.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import anyio
import numpy as np

from .config import PreprocessConfig, ServiceSettings
from .engine import SqjEngine
from .errors import ProtocolError, ServiceConnectError, ServiceTimeoutError
from .graph import ExecMode, ExecPlan, NetworkDef, check_store, forward, top_k
from .preprocess import RgbImage, normalize, normalize_quantize
from .protocol import (
    REQUEST_HEADER,
    REQUEST_MAGIC,
    TOP_K,
    Entry,
    RecognitionRequest,
    Status,
    check_request_header,
    decode_request,
    decode_response,
    encode_error,
    encode_response,
)
from .weights import WeightStore

logger = logging.getLogger(__name__)

Inference = Callable[[RgbImage], np.ndarray]

# Upper bound on draining a peer after the reply is written.
LINGER_S = 1.0


def network_inference(
    net: NetworkDef,
    store: WeightStore,
    mode: ExecMode = ExecMode.QUANT_SQJ,
    preprocess: PreprocessConfig = PreprocessConfig(),
    engine: Optional[SqjEngine] = None,
) -> Inference:
    """Server-side tail of the pipeline: normalize, quantize and run the net."""
    plan = ExecPlan.for_mode(net, mode)
    check_store(net, store, plan)
    engine = engine or SqjEngine()

    def infer(image: RgbImage) -> np.ndarray:
        if plan.mode is ExecMode.FLOAT:
            fmap = normalize(image, preprocess)
        else:
            input_fmt = store.quant_params(net.first_conv.name).qspec.input_fmt
            fmap = normalize_quantize(image, preprocess, input_fmt)
        return forward(net, store, plan, fmap, engine=engine).probs

    return infer


class RecognitionService:
    """Maps request bytes to response bytes; holds no per-request state."""

    def __init__(self, infer: Inference, dims: Tuple[int, int, int] = (227, 227, 3)):
        self.infer = infer
        self.dims = dims

    def handle_request(self, blob: bytes) -> bytes:
        try:
            request = decode_request(blob, self.dims)
        except ProtocolError as exc:
            logger.warning("Rejected request: %s", exc)
            return encode_error(exc.status, str(exc))
        try:
            probs = self.infer(request.image())
            entries = top_k(probs, TOP_K)
        except Exception as exc:
            logger.error("Inference failed: %s", exc, exc_info=True)
            return encode_error(Status.INTERNAL_ERROR, f"inference failed: {exc}")
        return encode_response(entries)


class RecognitionServer:
    """asyncio TCP front end for a :class:`RecognitionService`."""

    def __init__(self, service: RecognitionService, settings: ServiceSettings = ServiceSettings()):
        self.service = service
        self.settings = settings
        self._lock = asyncio.Lock()
        self._pending = 0
        self._server: Optional[asyncio.Server] = None

    @property
    def port(self) -> int:
        if self._server is None or not self._server.sockets:
            raise RuntimeError("server is not started")
        return int(self._server.sockets[0].getsockname()[1])

    async def _read_request(self, reader: asyncio.StreamReader) -> bytes:
        """Read one frame; stops early once the header decides the answer."""
        try:
            magic = await reader.readexactly(len(REQUEST_MAGIC))
        except asyncio.IncompleteReadError as exc:
            return exc.partial
        if magic != REQUEST_MAGIC:
            return magic
        try:
            header = magic + await reader.readexactly(REQUEST_HEADER.size - len(magic))
        except asyncio.IncompleteReadError as exc:
            return magic + exc.partial
        try:
            payload_len = check_request_header(header, self.service.dims)
        except ProtocolError:
            return header
        if REQUEST_HEADER.size + payload_len > self.settings.max_frame_bytes:
            raise ProtocolError(Status.WRONG_DIMS, "frame exceeds the size limit")
        try:
            payload = await reader.readexactly(payload_len)
        except asyncio.IncompleteReadError as exc:
            payload = exc.partial
        return header + payload

    async def _respond(self, reader: asyncio.StreamReader) -> bytes:
        try:
            blob = await asyncio.wait_for(
                self._read_request(reader), timeout=self.settings.read_deadline_s
            )
        except asyncio.TimeoutError:
            logger.warning("Read deadline of %.1fs exceeded", self.settings.read_deadline_s)
            return encode_error(Status.TRUNCATED, "read deadline exceeded")
        except ProtocolError as exc:
            return encode_error(exc.status, str(exc))

        try:
            decode_request(blob, self.service.dims)
        except ProtocolError as exc:
            logger.warning("Rejected request: %s", exc)
            return encode_error(exc.status, str(exc))
        async with self._lock:
            return await anyio.to_thread.run_sync(self.service.handle_request, blob)

    async def _linger(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        """Half-close and discard unread input so closing does not reset the reply."""
        if not writer.can_write_eof():
            return
        writer.write_eof()
        deadline = min(LINGER_S, self.settings.read_deadline_s)
        try:
            async with asyncio.timeout(deadline):
                while await reader.read(65536):
                    pass
        except TimeoutError:
            logger.debug("Peer kept its side open past %.1fs", deadline)

    async def _handle_client(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        peer = writer.get_extra_info("peername")
        if self._pending >= self.settings.max_pending:
            logger.warning("Refusing %s: %d requests pending", peer, self._pending)
            response = encode_error(Status.SERVER_BUSY, "server busy")
        else:
            self._pending += 1
            logger.debug("Accepted %s", peer)
            try:
                response = await self._respond(reader)
            except Exception as exc:
                logger.error("Unexpected error serving %s: %s", peer, exc, exc_info=True)
                response = encode_error(Status.INTERNAL_ERROR, "internal error")
            finally:
                self._pending -= 1
        try:
            writer.write(response)
            await writer.drain()
            await self._linger(reader, writer)
        except (ConnectionError, OSError) as exc:
            logger.debug("Could not reply to %s: %s", peer, exc)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle_client, self.settings.host, self.settings.port
        )
        logger.info("Recognition service listening on %s:%d", self.settings.host, self.port)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        assert self._server is not None
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None


async def serve(service: RecognitionService, settings: ServiceSettings = ServiceSettings()) -> None:
    """Run the service until cancelled. Bind failures raise ``OSError``."""
    server = RecognitionServer(service, settings)
    try:
        await server.serve_forever()
    finally:
        await server.close()


@dataclass
class ClassifyResult:
    entries: List[Entry]
    net_transfer_ms: float
    inference_ms: float
    end_to_end_ms: float


async def client_classify(
    host: str,
    port: int,
    image: RgbImage,
    timeout: float = 10.0,
    clock: Callable[[], float] = time.perf_counter,
) -> ClassifyResult:
    """Send one image and return the server's top-5 with timings.

    ``inference_ms`` runs from the request being fully sent to the first
    response byte; ``net_transfer_ms`` is the rest of the round trip.
    """
    frame = RecognitionRequest.from_image(image).encode()
    started = clock()
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    except asyncio.TimeoutError as exc:
        raise ServiceTimeoutError(f"connecting to {host}:{port} timed out") from exc
    except OSError as exc:
        raise ServiceConnectError(f"cannot connect to {host}:{port}: {exc}") from exc

    try:
        writer.write(frame)
        await asyncio.wait_for(writer.drain(), timeout)
        sent = clock()
        first = await asyncio.wait_for(reader.read(1), timeout)
        first_byte = clock()
        rest = await asyncio.wait_for(reader.read(), timeout)
        done = clock()
    except asyncio.TimeoutError as exc:
        raise ServiceTimeoutError(f"{host}:{port} did not answer within {timeout}s") from exc
    except OSError as exc:
        raise ServiceConnectError(f"connection to {host}:{port} failed: {exc}") from exc
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except OSError:
            pass

    if not first:
        raise ProtocolError(Status.TRUNCATED, "server closed without a response")
    response = decode_response(first + rest)
    if not response.ok:
        raise ProtocolError(
            response.status, f"server answered {response.status.name}: {response.message}"
        )
    if len(response.entries) != TOP_K:
        raise ProtocolError(
            Status.WRONG_DIMS, f"expected {TOP_K} entries, got {len(response.entries)}"
        )

    transfer = (sent - started) + (done - first_byte)
    inference = first_byte - sent
    return ClassifyResult(
        entries=response.entries,
        net_transfer_ms=transfer * 1000.0,
        inference_ms=inference * 1000.0,
        end_to_end_ms=(transfer + inference) * 1000.0,
    )
