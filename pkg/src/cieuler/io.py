"""CIEF1 binary field dumps and content hashing.

Layout: b"CIEF1", rank (u8), N (u32 LE), layout flag (u8: 0 physical,
1 spectral), then the little-endian f64 payload in C order.  Physical
payloads have shape (3**rank, N, N, N); spectral payloads have shape
(3**rank, N, N, N//2+1, 2) with real and imaginary parts interleaved.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"CIEF1"
PHYSICAL = 0
SPECTRAL = 1
_HEADER = struct.Struct("<5sBIB")


def encode(arr, rank: int, layout: int = PHYSICAL) -> bytes:
    arr = np.asarray(arr)
    N = arr.shape[-3]
    ncomp = 3 ** rank
    if layout == PHYSICAL:
        data = np.ascontiguousarray(arr, dtype="<f8").reshape((ncomp, N, N, N))
    elif layout == SPECTRAL:
        c = np.ascontiguousarray(arr, dtype=np.complex128).reshape((ncomp, N, N, N // 2 + 1))
        data = np.ascontiguousarray(np.stack([c.real, c.imag], axis=-1), dtype="<f8")
    else:
        raise ValueError("layout must be PHYSICAL or SPECTRAL")
    return _HEADER.pack(MAGIC, rank, N, layout) + data.tobytes(order="C")


def decode(buf: bytes):
    magic, rank, N, layout = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError("not a CIEF1 dump")
    payload = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    ncomp = 3 ** rank
    if layout == PHYSICAL:
        arr = payload.reshape((ncomp, N, N, N)).astype(float)
    else:
        raw = payload.reshape((ncomp, N, N, N // 2 + 1, 2))
        arr = raw[..., 0] + 1j * raw[..., 1]
    lead = {0: (), 1: (3,), 2: (3, 3)}[rank]
    return arr.reshape(lead + arr.shape[1:]), rank, layout


def write_dump(path, arr, rank, layout=PHYSICAL) -> str:
    data = encode(arr, rank, layout)
    with open(path, "wb") as fh:
        fh.write(data)
    return content_hash(data)


def read_dump(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def content_hash(data: bytes) -> str:
    """Fixed 64-bit content hash (blake2b, 8-byte digest) as hex."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return content_hash(fh.read())
