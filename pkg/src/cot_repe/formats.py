"""
Little-endian binary codecs shared by the checkpoint (ROTM), activation dump (ROTD), reading
vector (ROTV) and steering policy (ROTS) files.

Every file starts with a 4-byte magic and a u32 version. Strings are a u32 byte length followed by
UTF-8 bytes; arrays are raw `<f8` (or `<f4`) values whose shape is known from the header.

"""

import struct
from pathlib import Path

import numpy as np

from cot_repe.exceptions import CorruptFile, IoFailure

__all__ = [
    "CHECKPOINT_MAGIC",
    "DUMP_MAGIC",
    "FORMAT_VERSION",
    "POLICY_MAGIC",
    "READERS_MAGIC",
    "BinaryReader",
    "BinaryWriter",
    "read_file",
    "write_file",
]

CHECKPOINT_MAGIC = b"ROTM"
DUMP_MAGIC = b"ROTD"
READERS_MAGIC = b"ROTV"
POLICY_MAGIC = b"ROTS"
FORMAT_VERSION = 1


class BinaryWriter:
    """Accumulates little-endian fields into a byte buffer."""

    def __init__(self, magic: bytes, version: int = FORMAT_VERSION) -> None:
        self._buffer = bytearray(magic)
        self.u32(version)

    def u8(self, value: int) -> None:
        self._buffer += struct.pack("<B", value)

    def u32(self, value: int) -> None:
        self._buffer += struct.pack("<I", value)

    def u64(self, value: int) -> None:
        self._buffer += struct.pack("<Q", value)

    def f64(self, value: float) -> None:
        self._buffer += struct.pack("<d", value)

    def string(self, value: str) -> None:
        encoded = value.encode("utf-8")
        self.u32(len(encoded))
        self._buffer += encoded

    def array(self, value: np.ndarray, dtype: str = "<f8") -> None:
        self._buffer += np.ascontiguousarray(value, dtype=np.dtype(dtype)).tobytes()

    def getvalue(self) -> bytes:
        return bytes(self._buffer)


class BinaryReader:
    """
    Reads little-endian fields from a byte buffer, raising `CorruptFile` on truncation.

    Attributes:
        version (int): Format version read from the header.

    """

    def __init__(self, data: bytes, magic: bytes, supported_versions: tuple[int, ...] = (FORMAT_VERSION,)) -> None:
        self._data = data
        self._offset = 0

        found = self._take(len(magic))
        if found != magic:
            raise CorruptFile(f"Expected magic {magic!r}, found {found!r}")

        self.version = self.u32()
        if self.version not in supported_versions:
            raise CorruptFile(f"Unsupported {magic.decode()} version {self.version}")

    def _take(self, size: int) -> bytes:
        end = self._offset + size
        if size < 0 or end > len(self._data):
            raise CorruptFile(f"File truncated at byte {self._offset} (needed {size} more)")
        chunk = self._data[self._offset : end]
        self._offset = end
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        raw = self._take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFile("String field is not valid UTF-8") from exc

    def array(self, count: int, dtype: str = "<f8") -> np.ndarray:
        dtype = np.dtype(dtype)
        raw = self._take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).astype(np.float64)

    def expect_end(self) -> None:
        if self._offset != len(self._data):
            raise CorruptFile(f"{len(self._data) - self._offset} trailing byte(s) after the last record")


def write_file(path: str | Path, data: bytes) -> None:
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"Could not write '{path}': {exc}") from exc


def read_file(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"Could not read '{path}': {exc}") from exc
