"""Line-delimited text files with a provenance header.

Every file starts with ``#``-prefixed lines::

    # costrec split/1
    # config_hash: 3fa2c0d9e1b4
    # seed: 0
    # config: {...}

followed by one column-name line and tab- (or comma-) separated rows.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

from costrec.exceptions import DataError


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_table(
    path: str | os.PathLike,
    schema: str,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    meta: dict[str, Any] | None = None,
    sep: str = "\t",
) -> Path:
    """Write ``rows`` atomically, preceded by the provenance header."""
    path = Path(path)
    lines = [f"# costrec {schema}"]
    for key, value in (meta or {}).items():
        if not isinstance(value, str):
            value = json.dumps(value, sort_keys=True, default=str)
        lines.append(f"# {key}: {value}")
    lines.append(sep.join(columns))
    for row in rows:
        lines.append(sep.join(_fmt(v) for v in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def read_table(
    path: str | os.PathLike, schema: str | None = None, sep: str = "\t"
) -> tuple[dict[str, str], list[str], list[list[str]]]:
    """Return ``(meta, columns, rows)``; rows are lists of raw strings."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    meta: dict[str, str] = {}
    columns: list[str] | None = None
    rows: list[list[str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if lineno == 1:
                    meta["schema"] = body.removeprefix("costrec ").strip()
                elif ":" in body:
                    key, value = body.split(":", 1)
                    meta[key.strip()] = value.strip()
                continue
            if not line:
                continue
            fields = line.split(sep)
            if columns is None:
                columns = fields
                continue
            if len(fields) != len(columns):
                raise DataError(
                    f"{path}:{lineno}: expected {len(columns)} fields, got {len(fields)}"
                )
            rows.append(fields)
    if columns is None:
        raise DataError(f"{path}: no column header")
    if schema is not None and meta.get("schema") != schema:
        raise DataError(f"{path}: expected schema {schema!r}, found {meta.get('schema')!r}")
    return meta, columns, rows
