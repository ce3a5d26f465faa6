import re
import sys
import json
import logging
from pathlib import Path
from typing import Any, Optional, Dict, List, Sequence, Union

import constants
from config import LOG_FORMAT

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Send log records to standard error, plus a log file when configured"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def log_error(error: Exception, context: str = "") -> None:
    """Enhanced error logging with context"""
    error_msg = f"{context}: {str(error)}" if context else str(error)
    logger.error(error_msg, exc_info=True)


def validate_json_structure(data: Dict[str, Any], required_keys: List[str]) -> bool:
    """Validate JSON structure contains required keys"""
    if not isinstance(data, dict):
        return False
    return all(key in data for key in required_keys)


def safe_filename(filename: str) -> str:
    """Generate safe filename by removing dangerous characters"""
    if not filename:
        return "unnamed"
    # Remove path traversal and dangerous characters
    safe_name = re.sub(r'[<>:"/\\|?*\s]', '_', filename)
    safe_name = re.sub(r'\.\.', '_', safe_name)
    return safe_name[:100]  # Limit length


def fnv1a_64(data: bytes) -> int:
    """Stable 64-bit FNV-1a hash"""
    value = constants.FNV_OFFSET_BASIS
    for byte in data:
        value ^= byte
        value = (value * constants.FNV_PRIME) & constants.UINT64_MASK
    return value


def write_json(data: Any, path: Union[str, Path]) -> None:
    """Write JSON with sorted keys so reruns produce identical bytes"""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: Union[str, Path]) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def unique_names(names: Sequence[str]) -> List[str]:
    """Keep order; a repeated name gets a numeric suffix (_2, _3, ...)"""
    unique = []
    for name in names:
        candidate, n = name, 2
        while candidate in unique:
            candidate = f"{name}_{n}"
            n += 1
        unique.append(candidate)
    return unique
