import csv
import logging
import os
from numbers import Integral, Real
from typing import Any, Iterable, List, Sequence

import numpy as np
import orjson

from field_core.errors import ConfigurationError

logger = logging.getLogger(__name__)

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def ensure_output_dir(path: str) -> str:
    """Create the output directory if needed and check that it is writable."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(f"Cannot create output directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise ConfigurationError(f"Output directory {path} is not writable")
    return path


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, Integral):
        return str(int(value))
    if isinstance(value, Real):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Write rows with a header line; floats keep 17 significant digits."""
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            count = 0
            for row in rows:
                writer.writerow([_cell(value) for value in row])
                count += 1
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise ConfigurationError(f"Cannot write {path}: {e}") from e
    logger.info(f"Wrote {count} rows to {path}")
    return path


def _default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "model_dump"):
        return value.model_dump()
    raise TypeError(f"Type is not JSON serializable: {type(value).__name__}")


def dumps(data: Any) -> bytes:
    return orjson.dumps(data, default=_default, option=JSON_OPTIONS)


def write_json(path: str, data: Any) -> str:
    """Write sorted, indented JSON without timestamps so reruns are byte-identical."""
    try:
        with open(path, "wb") as f:
            f.write(dumps(data))
            f.write(b"\n")
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise ConfigurationError(f"Cannot write {path}: {e}") from e
    logger.info(f"Wrote {path}")
    return path


def read_json(path: str) -> Any:
    try:
        with open(path, "rb") as f:
            return orjson.loads(f.read())
    except FileNotFoundError as e:
        raise ConfigurationError(f"Config file {path} does not exist") from e
    except orjson.JSONDecodeError as e:
        raise ConfigurationError(f"Malformed JSON in {path}: {e}") from e


def read_csv(path: str) -> List[List[str]]:
    with open(path, newline="") as f:
        return list(csv.reader(f))
