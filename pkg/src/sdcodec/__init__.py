"""Source-disentangled neural audio codec: per-source residual quantizers over a shared encoder/decoder."""

from .codec import CodecConfig, preset
from .config import RunConfig, default_config, load_config
from .mixing import SOURCES
from .model import SDCodec

__version__ = "0.1.0"

__all__ = ["CodecConfig", "RunConfig", "SDCodec", "SOURCES", "default_config", "load_config", "preset"]
