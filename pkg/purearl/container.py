"""
Binary container shared by agent checkpoints and dataset files.

Layout, all little-endian:

    B        format version (first byte of the file)
    4s       magic b"PARL"
    I + s    header text (utf-8, config-format lines)
    I        record count
    then per record, in sorted name order:
    H + s    record name (utf-8)
    c        dtype code, d for float64 or q for int64
    B        ndim
    q*ndim   dims
    raw      values in row-major order

No timestamps are written so identical content gives identical bytes.
"""

import logging
import struct
from io import RawIOBase
from typing import BinaryIO, Dict, Mapping, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CONTAINER_VERSION = 1
CONTAINER_MAGIC = b"PARL"

_DTYPES = {b"d": np.dtype("<f8"), b"q": np.dtype("<i8")}

FileLike = Union[RawIOBase, BinaryIO]


def _code_for(array: np.ndarray) -> bytes:
    if np.issubdtype(array.dtype, np.integer):
        return b"q"
    if np.issubdtype(array.dtype, np.floating):
        return b"d"
    raise ValueError(f"unsupported record dtype {array.dtype}")


def write_container(
    outfile: FileLike, header: str, records: Mapping[str, np.ndarray]
) -> None:
    header_bytes = header.encode("utf-8")
    outfile.write(
        struct.pack(
            f"<B4sI{len(header_bytes)}sI",
            CONTAINER_VERSION,
            CONTAINER_MAGIC,
            len(header_bytes),
            header_bytes,
            len(records),
        )
    )
    for name in sorted(records):
        array = np.asarray(records[name])
        code = _code_for(array)
        name_bytes = name.encode("utf-8")
        outfile.write(
            struct.pack(
                f"<H{len(name_bytes)}scB{array.ndim}q",
                len(name_bytes),
                name_bytes,
                code,
                array.ndim,
                *array.shape,
            )
        )
        outfile.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def _read_exact(infile: FileLike, size: int) -> bytes:
    data = infile.read(size)
    if data is None or len(data) != size:
        raise RuntimeError(f"invalid container, expected {size} bytes")
    return data


def read_container(infile: FileLike) -> Tuple[str, Dict[str, np.ndarray]]:
    version, magic, header_len = struct.unpack("<B4sI", _read_exact(infile, 9))
    if version != CONTAINER_VERSION:
        raise RuntimeError(f"invalid container version {version}.")
    if magic != CONTAINER_MAGIC:
        raise RuntimeError(f"invalid container magic {magic!r}.")
    header = _read_exact(infile, header_len).decode("utf-8")
    (n_records,) = struct.unpack("<I", _read_exact(infile, 4))

    records: Dict[str, np.ndarray] = {}
    for _ in range(n_records):
        (name_len,) = struct.unpack("<H", _read_exact(infile, 2))
        name = _read_exact(infile, name_len).decode("utf-8")
        code, ndim = struct.unpack("<cB", _read_exact(infile, 2))
        if code not in _DTYPES:
            raise RuntimeError(f"invalid record dtype {code!r} for {name}.")
        dims = struct.unpack(f"<{ndim}q", _read_exact(infile, 8 * ndim))
        dtype = _DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        raw = _read_exact(infile, count * dtype.itemsize)
        if name in records:
            raise RuntimeError(f"duplicate record name {name}")
        records[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    logger.debug(f"read container with {len(records)} records")
    return header, records
