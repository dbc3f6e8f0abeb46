"""
Utility functions and helpers.
"""

from patchlab.utils.cache import DatasetCache, cache_key
from patchlab.utils.config_file import (
    ConfigParseError,
    load_config,
    parse_config,
    serialize_config,
)

__all__ = [
    # Dataset cache
    "DatasetCache",
    "cache_key",
    # Config files
    "ConfigParseError",
    "load_config",
    "parse_config",
    "serialize_config",
]
