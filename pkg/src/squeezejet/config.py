"""
Configuration for the SqueezeJet tools.

Settings come from three layers, later ones winning: model defaults, an
optional TOML file (``[preprocess]``, ``[power]``, ``[service]``, ``[sqj]``
sections) and ``SQJ_*`` environment variables, which may be placed in a
``.env`` file.
"""

from __future__ import annotations

import logging
import math
import os
import tomllib
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .engine import SqjConfig
from .errors import ConfigError

# Load environment variables from .env file
try:
    from dotenv import load_dotenv

    load_dotenv()
except ImportError:
    pass  # dotenv not available, use system environment variables

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "squeezejet.toml"


class ChannelOrder(str, Enum):
    RGB = "RGB"
    BGR = "BGR"


class PreprocessConfig(BaseModel):
    """Client resize geometry and the server-side mean subtraction."""

    model_config = ConfigDict(frozen=True)

    target_w: int = Field(227, gt=0)
    target_h: int = Field(227, gt=0)
    channel_order: ChannelOrder = ChannelOrder.BGR
    # Listed in channel_order order.
    means: Tuple[float, float, float] = (104.0, 117.0, 123.0)
    resize: str = "bilinear"

    @field_validator("means")
    @classmethod
    def _finite_means(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if not all(math.isfinite(mean) for mean in value):
            raise ValueError("means must be finite")
        return value

    @field_validator("resize")
    @classmethod
    def _known_resize(cls, value: str) -> str:
        if value != "bilinear":
            raise ValueError(f"unsupported resize method {value!r}")
        return value


class PowerProfile(BaseModel):
    """Chip power per named platform, in watts. Configured, never measured."""

    model_config = ConfigDict(frozen=True)

    watts: Dict[str, float] = Field(default_factory=dict)

    @field_validator("watts")
    @classmethod
    def _positive(cls, value: Dict[str, float]) -> Dict[str, float]:
        for platform, watts in value.items():
            if not watts > 0:
                raise ValueError(f"power of {platform!r} must be positive, got {watts}")
        return value


class ServiceSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    host: str = "127.0.0.1"
    port: int = Field(5555, ge=0, le=65535)
    max_pending: int = Field(8, ge=1)
    read_deadline_s: float = Field(10.0, gt=0)
    max_frame_bytes: int = Field(1 << 20, gt=0)


class AppConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    preprocess: PreprocessConfig = PreprocessConfig()
    power: PowerProfile = PowerProfile()
    service: ServiceSettings = ServiceSettings()
    sqj: SqjConfig = SqjConfig()


_ENV_OVERRIDES = {
    "SQJ_HOST": ("service", "host"),
    "SQJ_PORT": ("service", "port"),
    "SQJ_MAX_PENDING": ("service", "max_pending"),
    "SQJ_READ_DEADLINE": ("service", "read_deadline_s"),
    "SQJ_MAC_UNITS": ("sqj", "mac_units"),
    "SQJ_CLOCK_MHZ": ("sqj", "clock_mhz"),
}


def _read_toml(path: Path) -> Dict[str, Any]:
    try:
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc


def load_config(
    path: Union[str, Path, None] = None, environ: Optional[Dict[str, str]] = None
) -> AppConfig:
    """Build the application config from file and environment.

    ``path`` falls back to ``SQJ_CONFIG``; with neither, only defaults and
    environment overrides apply.
    """
    environ = dict(os.environ if environ is None else environ)
    path = path or environ.get("SQJ_CONFIG")
    raw: Dict[str, Any] = {}
    if path:
        raw = _read_toml(Path(path))
        logger.debug("Loaded config file %s", path)
    if "power" in raw and "watts" not in raw["power"]:
        raw["power"] = {"watts": raw["power"]}

    for variable, (section, key) in _ENV_OVERRIDES.items():
        if variable in environ:
            raw.setdefault(section, {})[key] = environ[variable]
    try:
        return AppConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid configuration at {location}: {first['msg']}") from exc


def example_config_path() -> Path:
    """The shipped example configuration with the published power figures."""
    return Path(str(resources.files("squeezejet.data").joinpath(DEFAULT_CONFIG)))


def log_level(default: str = "INFO") -> str:
    return os.getenv("SQJ_LOG_LEVEL", default).upper()
