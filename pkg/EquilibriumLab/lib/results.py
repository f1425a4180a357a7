"""
Result persistence for lab experiments. Every experiment produces a list of rows with a fixed column order, written
as a CSV file with a header. Files are written to a temporary sibling and renamed into place, so a reader never
observes a partial file...
"""

import csv
import io
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)

# Default directory for relative output paths.
OUT_DIR_ENV = "EQUILIBRIUMLAB_OUT_DIR"


def resolve_output(path: Union[str, Path]) -> Path:
    """
    Resolve a relative output path against $EQUILIBRIUMLAB_OUT_DIR when it is set.
    """
    path = Path(path)
    out_dir = os.environ.get(OUT_DIR_ENV)
    if out_dir and not path.is_absolute():
        path = Path(out_dir) / path
    return path


def format_value(value: Any) -> str:
    """
    Render a cell. Floats use repr, the shortest text that reads back to the identical double.
    """
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def rows_to_csv(rows: Sequence[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> str:
    """
    Render rows as CSV text with a header row. Column order is columns, or the key order of the first row.
    """
    if columns is None:
        columns = list(rows[0].keys()) if rows else []

    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n", extrasaction="raise")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: format_value(row.get(key)) for key in columns})
    return buffer.getvalue()


def write_atomic(path: Union[str, Path], data: Union[str, bytes]):
    """
    Write data to path through a temporary file in the same directory followed by a rename.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + f".tmp.{os.getpid()}")
    payload = data.encode("utf-8") if isinstance(data, str) else data

    try:
        with tmp_path.open("wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    finally:
        if tmp_path.exists():
            tmp_path.unlink()


def write_csv(
    path: Union[str, Path], rows: Sequence[Dict[str, Any]], columns: Optional[Sequence[str]] = None
) -> Path:
    """
    Write experiment rows to a CSV file atomically.

    :param path: Destination, relative paths are resolved with resolve_output.
    :param rows: The rows, dictionaries keyed by column name.
    :param columns: The column order, defaults to the key order of the first row.
    :return: The path actually written.
    """
    path = resolve_output(path)
    write_atomic(path, rows_to_csv(rows, columns))
    logger.info("Wrote %d rows to %s", len(rows), path)
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open("r", newline="") as f:
        return list(csv.DictReader(f))
