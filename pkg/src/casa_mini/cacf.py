"""CACF event-file format and dataset chunk planning.

Layout (little-endian):

    magic "CACF" (4 bytes) | version u32 = 1 | n_columns u32 | n_events u64
    per column: name_len u16 + UTF-8 name
    then, per column in header order: n_events x f64 payload

Readers go through a byte-range source so the same parsing code serves local
files and the caching data proxy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .types import ColumnBatch, DatasetSpec, FileChunk, check_column_name

MAGIC = b"CACF"
VERSION = 1
_FIXED_HEADER = struct.Struct("<4sIIQ")


class CacfError(ValueError):
    pass


def write_dataset_file(columns: Mapping[str, np.ndarray], path: str) -> int:
    """Write a column map to a CACF file; returns the byte count written."""
    if not columns:
        raise CacfError("empty column set")
    arrays: dict[str, np.ndarray] = {}
    n_events = -1
    for name, values in columns.items():
        check_column_name(name)
        arr = np.ascontiguousarray(values, dtype="<f8")
        if arr.ndim != 1:
            raise CacfError(f"column {name!r} is not a 1-d vector")
        if n_events < 0:
            n_events = arr.shape[0]
        elif arr.shape[0] != n_events:
            raise CacfError("unequal column lengths")
        arrays[name] = arr

    header = bytearray(_FIXED_HEADER.pack(MAGIC, VERSION, len(arrays), n_events))
    for name in arrays:
        encoded = name.encode("utf-8")
        header += struct.pack("<H", len(encoded)) + encoded

    written = 0
    with open(path, "wb") as fh:
        written += fh.write(header)
        for arr in arrays.values():
            written += fh.write(arr.tobytes())
    return written


# A RangeReader returns the bytes of [offset, offset+length), truncated at EOF.
RangeReader = Callable[[int, int], bytes]


def local_range_reader(path: str) -> RangeReader:
    def read(offset: int, length: int) -> bytes:
        with open(path, "rb") as fh:
            fh.seek(offset)
            return fh.read(length)

    return read


@dataclass(frozen=True)
class CacfHeader:
    n_events: int
    columns: tuple[str, ...]
    payload_offset: int

    def column_offset(self, name: str) -> int:
        """Byte offset of a column's payload within the file."""
        try:
            idx = self.columns.index(name)
        except ValueError:
            raise CacfError(f"unknown column {name}") from None
        return self.payload_offset + idx * self.n_events * 8


def read_header(read: RangeReader) -> CacfHeader:
    fixed = read(0, _FIXED_HEADER.size)
    if len(fixed) < _FIXED_HEADER.size:
        raise CacfError("truncated header")
    magic, version, n_columns, n_events = _FIXED_HEADER.unpack(fixed)
    if magic != MAGIC:
        raise CacfError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CacfError(f"unsupported version {version}")
    names = []
    offset = _FIXED_HEADER.size
    for _ in range(n_columns):
        raw_len = read(offset, 2)
        if len(raw_len) < 2:
            raise CacfError("truncated column table")
        (name_len,) = struct.unpack("<H", raw_len)
        raw_name = read(offset + 2, name_len)
        if len(raw_name) < name_len:
            raise CacfError("truncated column table")
        names.append(raw_name.decode("utf-8"))
        offset += 2 + name_len
    return CacfHeader(n_events=n_events, columns=tuple(names), payload_offset=offset)


def read_header_path(path: str) -> CacfHeader:
    return read_header(local_range_reader(path))


def read_chunk(
    read: RangeReader,
    chunk: FileChunk,
    wanted: Sequence[str],
    header: CacfHeader | None = None,
) -> ColumnBatch:
    """Read exactly chunk.len events starting at chunk.start, wanted columns only."""
    hdr = header if header is not None else read_header(read)
    if chunk.start + chunk.len > hdr.n_events:
        raise CacfError(
            f"chunk out of range: [{chunk.start}, {chunk.start + chunk.len}) "
            f"in a {hdr.n_events}-event file"
        )
    columns: dict[str, np.ndarray] = {}
    for name in wanted:
        base = hdr.column_offset(name)
        raw = read(base + chunk.start * 8, chunk.len * 8)
        if len(raw) != chunk.len * 8:
            raise CacfError(f"short read for column {name}")
        columns[name] = np.frombuffer(raw, dtype="<f8")
    return ColumnBatch(columns, origin=(chunk.file, chunk.start))


def read_chunk_path(path: str, chunk: FileChunk, wanted: Sequence[str]) -> ColumnBatch:
    return read_chunk(local_range_reader(path), chunk, wanted)


def read_columns_path(path: str) -> ColumnBatch:
    """Whole-file read of every column (test and oracle helper)."""
    hdr = read_header_path(path)
    chunk = FileChunk(file=path, start=0, len=max(hdr.n_events, 1), chunk_id=0)
    if hdr.n_events == 0:
        return ColumnBatch({name: np.empty(0) for name in hdr.columns}, origin=(path, 0))
    return read_chunk(local_range_reader(path), chunk, hdr.columns, header=hdr)


def plan_chunks(
    dataset: DatasetSpec,
    chunk_size: int,
    events_per_file: Sequence[int] | None = None,
) -> list[FileChunk]:
    """Partition every dataset file into chunks of chunk_size (last may be short).

    Chunk ids are 0..N-1 in file order.  events_per_file overrides reading the
    local file headers, for datasets that live behind the data proxy.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if events_per_file is None:
        events_per_file = [read_header_path(p).n_events for p in dataset.files]
    if len(events_per_file) != len(dataset.files):
        raise ValueError("events_per_file does not match the dataset file list")
    total = sum(events_per_file)
    if total != dataset.n_events_total:
        raise ValueError(
            f"dataset claims {dataset.n_events_total} events but files hold {total}"
        )
    chunks: list[FileChunk] = []
    next_id = 0
    for path, n_events in zip(dataset.files, events_per_file):
        start = 0
        while start < n_events:
            length = min(chunk_size, n_events - start)
            chunks.append(FileChunk(file=path, start=start, len=length, chunk_id=next_id))
            next_id += 1
            start += length
    return chunks


def dataset_from_files(name: str, paths: Sequence[str]) -> tuple[DatasetSpec, list[int]]:
    """Build a DatasetSpec from local files, returning per-file event counts."""
    counts = [read_header_path(p).n_events for p in paths]
    return DatasetSpec(name=name, files=tuple(paths), n_events_total=sum(counts)), counts

