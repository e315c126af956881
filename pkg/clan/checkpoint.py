"""
Flat binary tensor container.

Layout (all integers little-endian u32):
    b"CLAN" | version | tensor count |
    per tensor: name length | UTF-8 name | rank | extents... | float64 LE data
"""

import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping, Union

import numpy as np

from clan.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b'CLAN'
FORMAT_VERSION = 1

_U32 = struct.Struct('<I')


def _write_u32(stream: BinaryIO, value: int) -> None:
    stream.write(_U32.pack(value))


def _read_exact(stream: BinaryIO, count: int, path: Path) -> bytes:
    chunk = stream.read(count)
    if len(chunk) != count:
        raise DataError(f"Truncated checkpoint: {path}")
    return chunk


def _read_u32(stream: BinaryIO, path: Path) -> int:
    return _U32.unpack(_read_exact(stream, 4, path))[0]


def save_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    """Write named arrays to `path` in insertion order. Values are stored as float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        _write_u32(f, FORMAT_VERSION)
        _write_u32(f, len(tensors))
        for name, array in tensors.items():
            encoded = name.encode('utf-8')
            array = np.asarray(array)
            _write_u32(f, len(encoded))
            f.write(encoded)
            _write_u32(f, array.ndim)
            for extent in array.shape:
                _write_u32(f, extent)
            f.write(np.ascontiguousarray(array, dtype='<f8').tobytes())
    logger.debug(f"Saved {len(tensors)} tensors to {path}")
    return path


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a container written by save_tensors; arrays come back as float64."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    tensors: Dict[str, np.ndarray] = {}
    with open(path, 'rb') as f:
        if _read_exact(f, 4, path) != MAGIC:
            raise DataError(f"Not a CLAN container (bad magic): {path}")
        version = _read_u32(f, path)
        if version != FORMAT_VERSION:
            raise DataError(f"Unsupported container version {version} in {path}")
        count = _read_u32(f, path)
        for _ in range(count):
            raw_name = _read_exact(f, _read_u32(f, path), path)
            try:
                name = raw_name.decode('utf-8')
            except UnicodeDecodeError as e:
                raise DataError(f"Tensor name is not valid UTF-8 in {path}: {raw_name!r}") from e
            rank = _read_u32(f, path)
            shape = tuple(_read_u32(f, path) for _ in range(rank))
            size = int(np.prod(shape, dtype=np.int64))
            raw = _read_exact(f, 8 * size, path)
            tensors[name] = np.frombuffer(raw, dtype='<f8').reshape(shape).astype(np.float64)
        if f.read(1):
            raise DataError(f"Trailing bytes after {count} tensors in {path}")
    return tensors
