"""Small file helpers shared by the loaders."""

from __future__ import annotations

import gzip
import io
import os
from pathlib import Path
from typing import IO, Union

PathLike = Union[str, "os.PathLike[str]"]


def open_text(path: PathLike, mode: str = "r") -> IO[str]:
    """Open a UTF-8 text file, transparently gunzipping ``*.gz`` paths."""
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode.replace("t", "") + "b"), encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def open_binary(path: PathLike, mode: str = "rb") -> IO[bytes]:
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def write_atomic(path: PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temporary sibling and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
