"""Versioned text container for scene files and activation dumps.

Grammar (one record per line, LF-terminated, ASCII):

    #%spmoe-container v1 <kind>
    #%meta <key> <value>                 zero or more
    #%section <name> <f64|i64> <rows> <cols>
    <rows data lines, cols space-separated values each>
    ...                                  further sections
    #%end

Floats are written with ``repr`` so every f64 round-trips bitwise; ints are
plain decimals. Section order is preserved. Anything else is a format error
reported with its line number.
"""

from __future__ import annotations

import io
import os

import numpy as np

from .errors import DataFormatError, VersionError

MAGIC = "#%spmoe-container"
VERSION = "v1"


class Container:
    """Ordered named sections of 2-D arrays plus string metadata."""

    def __init__(self, kind: str):
        self.kind = kind
        self.meta: dict[str, str] = {}
        self.sections: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> None:
        arr = np.asarray(array)
        if arr.ndim != 2:
            raise ValueError(f"section {name!r} must be 2-D, got {arr.shape}")
        if name in self.sections:
            raise ValueError(f"duplicate section {name!r}")
        self.sections[name] = arr

    def dumps(self) -> str:
        out = io.StringIO()
        out.write(f"{MAGIC} {VERSION} {self.kind}\n")
        for key, value in self.meta.items():
            out.write(f"#%meta {key} {value}\n")
        for name, arr in self.sections.items():
            if np.issubdtype(arr.dtype, np.integer):
                dtype, fmt = "i64", lambda v: str(int(v))
            else:
                dtype, fmt = "f64", lambda v: repr(float(v))
            rows, cols = arr.shape
            out.write(f"#%section {name} {dtype} {rows} {cols}\n")
            for row in arr:
                out.write(" ".join(fmt(v) for v in row) + "\n")
        out.write("#%end\n")
        return out.getvalue()

    def write(self, path) -> None:
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(self.dumps())
        os.replace(tmp, path)


def _fail(lineno: int, msg: str):
    raise DataFormatError(f"line {lineno}: {msg}")


def loads(text: str, expect_kind: str | None = None) -> Container:
    lines = text.split("\n")
    if not lines or not lines[0].startswith(MAGIC):
        _fail(1, "missing container header")
    head = lines[0].split()
    if len(head) != 3:
        _fail(1, "malformed header")
    if head[1] != VERSION:
        raise VersionError(f"line 1: unsupported container version {head[1]!r}")
    box = Container(head[2])
    if expect_kind is not None and box.kind != expect_kind:
        _fail(1, f"expected kind {expect_kind!r}, found {box.kind!r}")

    i = 1
    ended = False
    while i < len(lines):
        line = lines[i]
        if line == "":
            i += 1
            continue
        if ended:
            _fail(i + 1, "content after #%end")
        if line.startswith("#%meta "):
            parts = line.split(" ", 2)
            if len(parts) < 3:
                _fail(i + 1, "malformed meta line")
            box.meta[parts[1]] = parts[2]
            i += 1
        elif line.startswith("#%section "):
            parts = line.split()
            if len(parts) != 5:
                _fail(i + 1, "malformed section header")
            name, dtype = parts[1], parts[2]
            try:
                rows, cols = int(parts[3]), int(parts[4])
            except ValueError:
                _fail(i + 1, "non-integer section dims")
            if dtype not in ("f64", "i64") or rows < 0 or cols < 0:
                _fail(i + 1, f"bad section spec {dtype} {rows}x{cols}")
            data = np.empty((rows, cols),
                            dtype=np.float64 if dtype == "f64" else np.int64)
            for r in range(rows):
                i += 1
                if i >= len(lines):
                    _fail(i, f"section {name!r} truncated")
                vals = lines[i].split()
                if len(vals) != cols:
                    _fail(i + 1, f"expected {cols} values, found {len(vals)}")
                try:
                    conv = float if dtype == "f64" else int
                    data[r] = [conv(v) for v in vals]
                except ValueError:
                    _fail(i + 1, "unparsable numeric value")
            if name in box.sections:
                _fail(i + 1, f"duplicate section {name!r}")
            box.sections[name] = data
            i += 1
        elif line == "#%end":
            ended = True
            i += 1
        else:
            _fail(i + 1, f"unrecognized line {line[:40]!r}")
    if not ended:
        _fail(len(lines), "missing #%end (file truncated?)")
    return box


def read(path, expect_kind: str | None = None) -> Container:
    with open(path) as fh:
        return loads(fh.read(), expect_kind)
