"""Little-endian binary helpers shared by the weight, index and corpus files."""

from __future__ import annotations

import hashlib
import struct
from typing import BinaryIO

import numpy as np
import numpy.typing as npt

from .errors import FormatError, TruncatedFileError

# magic (4 bytes) + version (u16)
PREAMBLE = struct.Struct("<4sH")
FLOAT32_LE = np.dtype("<f4")


def write_preamble(stream: BinaryIO, magic: bytes, version: int) -> None:
    """Write the magic bytes and format version.

    Args:
        stream: Binary output stream.
        magic: Four magic bytes.
        version: Format version.
    """
    stream.write(PREAMBLE.pack(magic, version))


def read_preamble(stream: BinaryIO, magic: bytes, version: int, what: str) -> None:
    """Read and validate the magic bytes and format version.

    Args:
        stream: Binary input stream.
        magic: Expected magic bytes.
        version: Expected format version.
        what: Human readable file kind, used in error messages.

    Raises:
        FormatError: Magic or version mismatch.
        TruncatedFileError: Stream shorter than the preamble.
    """
    found_magic, found_version = read_struct(stream, PREAMBLE, what)
    if found_magic != magic:
        raise FormatError(f"{what}: bad magic {found_magic!r}, expected {magic!r}")
    if found_version != version:
        raise FormatError(
            f"{what}: unsupported version {found_version}, expected {version}"
        )


def read_exact(stream: BinaryIO, size: int, what: str) -> bytes:
    """Read exactly ``size`` bytes.

    Raises:
        TruncatedFileError: Fewer bytes available.
    """
    data = stream.read(size)
    if len(data) != size:
        raise TruncatedFileError(
            f"{what}: truncated, wanted {size} bytes, got {len(data)}"
        )
    return data


def read_struct(stream: BinaryIO, layout: struct.Struct, what: str) -> tuple:
    """Read and unpack one fixed-size record."""
    return layout.unpack(read_exact(stream, layout.size, what))


def write_floats(stream: BinaryIO, values: npt.ArrayLike) -> None:
    """Write values as little-endian float32."""
    stream.write(np.ascontiguousarray(values, dtype=FLOAT32_LE).tobytes())


def read_floats(
    stream: BinaryIO, count: int, what: str
) -> npt.NDArray[np.float32]:
    """Read ``count`` little-endian float32 values."""
    raw = read_exact(stream, count * FLOAT32_LE.itemsize, what)
    return np.frombuffer(raw, dtype=FLOAT32_LE).astype(np.float32)


def expect_eof(stream: BinaryIO, what: str) -> None:
    """Reject trailing bytes after the declared payload.

    Raises:
        FormatError: Extra data found.
    """
    if stream.read(1):
        raise FormatError(f"{what}: trailing bytes after declared payload")


def checksum(*arrays: npt.ArrayLike) -> bytes:
    """SHA-256 over the float32 little-endian image of the given arrays."""
    digest = hashlib.sha256()
    for array in arrays:
        digest.update(np.ascontiguousarray(array, dtype=FLOAT32_LE).tobytes())
    return digest.digest()
