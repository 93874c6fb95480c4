"""
Named-tensor container, little-endian:
    magic "XATN1" | count:u32 | per tensor (name-len:u16, name:utf8, rank:u8,
    dims:u32 x rank, f64 data)
"""

from __future__ import annotations
import hashlib
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from ..errors import DataError

MAGIC = b"XATN1"


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_tensors(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if blob[:5] != MAGIC:
        raise DataError(f"{source}: not an XATN1 checkpoint")
    out: Dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", blob, 5)
        off = 9
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
            off += 8 * n
            out[name] = data.reshape(dims).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{source}: truncated or corrupt checkpoint ({e})") from e
    return out


def save_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    return path


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return decode_tensors(path.read_bytes(), str(path))


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()
