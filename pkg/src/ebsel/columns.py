"""Column-wise access to the putative design matrix.

The EM loop only ever touches the putative matrix one column (or one
contiguous block of columns) at a time, so the matrix can live either in
memory or in a flat binary file on disk.

On-disk format
--------------
``<stem>.bin``  float64 little-endian values, column-contiguous (column k
                occupies bytes ``[k * 8N, (k + 1) * 8N)``).
``<stem>.json`` sidecar index::

    {"format": "ebsel-columns", "version": 1, "dtype": "<f8",
     "n_rows": N, "n_columns": K, "names": [...], "offsets": [...]}
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

_DTYPE = np.dtype("<f8")


class ColumnSource:
    """Base class: an N x K matrix accessed column by column."""

    n_rows: int
    n_columns: int
    names: list[str]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_columns)

    def fetch(self, k: int) -> np.ndarray:
        raise NotImplementedError

    def fetch_block(self, start: int, stop: int) -> np.ndarray:
        """Columns ``start:stop`` as an N x (stop - start) array."""
        raise NotImplementedError

    def fetch_many(self, indices: Sequence[int]) -> np.ndarray:
        if len(indices) == 0:
            return np.empty((self.n_rows, 0))
        return np.column_stack([self.fetch(k) for k in indices])

    def blocks(self, size: int = 512) -> Iterator[tuple[int, int]]:
        for start in range(0, self.n_columns, size):
            yield start, min(start + size, self.n_columns)

    def to_array(self) -> np.ndarray:
        return self.fetch_block(0, self.n_columns)

    def _check(self, k: int) -> int:
        k = int(k)
        if not 0 <= k < self.n_columns:
            raise IndexError(f"column {k} out of range [0, {self.n_columns})")
        return k


class InMemoryColumns(ColumnSource):
    """Column-major in-memory store."""

    def __init__(self, Z: np.ndarray, names: Sequence[str] | None = None):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2:
            raise ValueError("Z must be two-dimensional")
        self._Z = np.asfortranarray(Z)
        self._Z.setflags(write=False)
        self.n_rows, self.n_columns = Z.shape
        self.names = list(names) if names is not None else [f"z{k + 1}" for k in range(self.n_columns)]
        if len(self.names) != self.n_columns:
            raise ValueError("names length does not match the number of columns")

    def fetch(self, k: int) -> np.ndarray:
        return self._Z[:, self._check(k)].copy()

    def fetch_block(self, start: int, stop: int) -> np.ndarray:
        return self._Z[:, start:stop]


class FileColumns(ColumnSource):
    """Read-only file-backed store; each fetch is a positioned read.

    Reads use ``os.pread`` so concurrent readers never share a file offset.
    """

    def __init__(self, stem: str | os.PathLike):
        stem = Path(stem)
        self.bin_path = stem.with_suffix(".bin")
        self.index_path = stem.with_suffix(".json")
        index = json.loads(self.index_path.read_text())
        if index.get("format") != "ebsel-columns":
            raise ValueError(f"{self.index_path} is not a column index")
        self.n_rows = int(index["n_rows"])
        self.n_columns = int(index["n_columns"])
        self.names = list(index["names"])
        self.offsets = [int(o) for o in index["offsets"]]
        if len(self.offsets) != self.n_columns or len(self.names) != self.n_columns:
            raise ValueError("column index does not cover every column")
        expected = self.n_columns * self.n_rows * _DTYPE.itemsize
        if self.bin_path.stat().st_size != expected:
            raise ValueError(f"{self.bin_path} has unexpected size")
        self._fd = os.open(self.bin_path, os.O_RDONLY)

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def _read(self, offset: int, n_values: int) -> np.ndarray:
        nbytes = n_values * _DTYPE.itemsize
        buf = os.pread(self._fd, nbytes, offset)
        if len(buf) != nbytes:
            raise OSError(f"short read at offset {offset}")
        return np.frombuffer(buf, dtype=_DTYPE).astype(np.float64)

    def fetch(self, k: int) -> np.ndarray:
        return self._read(self.offsets[self._check(k)], self.n_rows)

    def fetch_block(self, start: int, stop: int) -> np.ndarray:
        if stop <= start:
            return np.empty((self.n_rows, 0))
        flat = self._read(self.offsets[start], (stop - start) * self.n_rows)
        return flat.reshape((stop - start, self.n_rows)).T


def write_column_store(Z: np.ndarray, stem: str | os.PathLike,
                       names: Sequence[str] | None = None) -> FileColumns:
    """Write ``Z`` in the on-disk format and return a reader for it."""
    Z = np.asarray(Z, dtype=np.float64)
    n, k = Z.shape
    names = list(names) if names is not None else [f"z{j + 1}" for j in range(k)]
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(np.asfortranarray(Z).T.astype(_DTYPE).tobytes(order="C"))
    index = {
        "format": "ebsel-columns",
        "version": 1,
        "dtype": "<f8",
        "n_rows": n,
        "n_columns": k,
        "names": names,
        "offsets": [j * n * _DTYPE.itemsize for j in range(k)],
    }
    stem.with_suffix(".json").write_text(json.dumps(index))
    return FileColumns(stem)


def as_column_source(Z, names=None) -> ColumnSource:
    if isinstance(Z, ColumnSource):
        return Z
    return InMemoryColumns(Z, names)
