"""Exception hierarchy for the SqueezeJet inference stack."""

from __future__ import annotations

from typing import Optional


class SqueezeJetError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SqueezeJetError, ValueError):
    """Invalid configuration file or environment override."""


class FormatError(SqueezeJetError, ValueError):
    """Bad fixed-point format, out-of-range raw value or bad coordinate."""


class ShapeError(SqueezeJetError, ValueError):
    """Tensor or feature-map dimensions do not fit together."""


class ConstraintViolation(SqueezeJetError, ValueError):
    """An accelerator precondition does not hold.

    ``constraint`` names the violated rule so callers can report it.
    """

    def __init__(self, constraint: str, detail: str = ""):
        self.constraint = constraint
        message = f"{constraint} violated"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class AccumulatorOverflowError(SqueezeJetError, ArithmeticError):
    """A 32-bit accumulator left its range (signals a bad quantization format)."""


class TopologyError(SqueezeJetError, ValueError):
    """Topology file is malformed or its layers do not compose."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class PlanError(SqueezeJetError, ValueError):
    """The execution plan cannot run with the given network, weights or input."""


class QuantizationError(SqueezeJetError, ValueError):
    """Calibration or quantization cannot proceed."""


class WeightFileError(SqueezeJetError):
    """Base class for SQNW weight file problems."""


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


class CorruptRecordError(WeightFileError):
    """A record field holds a value no writer produces, or bytes follow the last record."""


class PpmError(SqueezeJetError, ValueError):
    """Base class for PPM decoding problems."""


class UnsupportedPpmError(PpmError):
    pass


class BadMaxvalError(PpmError):
    pass


class TruncatedRasterError(PpmError):
    pass


class ProtocolError(SqueezeJetError):
    """A frame violates the recognition wire format."""

    def __init__(self, status: int, message: str):
        self.status = status
        super().__init__(message)


class ServiceConnectError(SqueezeJetError, ConnectionError):
    """The recognition service could not be reached."""


class ServiceTimeoutError(SqueezeJetError, TimeoutError):
    """The recognition service did not answer in time."""


class BenchError(SqueezeJetError):
    """A benchmark iteration failed."""

    def __init__(self, iteration: int, cause: BaseException):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"iteration {iteration} failed: {cause}")
