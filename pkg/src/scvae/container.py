"""Binary container shared by model checkpoints and cached window datasets.

Layout (all integers little-endian)::

    magic            4 bytes
    version          u16
    descriptor       u32 length + UTF-8 text
    tensor count     u32
    tensor table     per tensor: u16 name length, name, u8 dtype tag, u8 rank,
                     rank x u32 extents, u64 byte offset into the payload
    payload          raw little-endian tensor bytes, in table order
    crc32            u32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class LayoutError(ContainerError):
    pass


def pack(magic: bytes, version: int, descriptor: str, tensors) -> bytes:
    """Serialize ``tensors`` (iterable of (name, array)) behind a text descriptor."""
    head = bytearray()
    head += magic
    head += struct.pack("<H", version)
    text = descriptor.encode("utf-8")
    head += struct.pack("<I", len(text)) + text
    tensors = list(tensors)
    head += struct.pack("<I", len(tensors))
    payload = bytearray()
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in TAG_OF:
            raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        head += struct.pack("<H", len(raw)) + raw
        head += struct.pack("<BB", TAG_OF[dt], arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
        head += struct.pack("<Q", len(payload))
        payload += np.ascontiguousarray(arr, dtype=dt).tobytes()
    body = bytes(head + payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"file ends at byte {len(self.buf)} but {self.pos + n} bytes are needed"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack(buf: bytes, magic: bytes, version: int):
    """Inverse of :func:`pack`. Returns (descriptor, {name: array}) in table order."""
    if len(buf) < len(magic):
        raise TruncatedError(f"file is only {len(buf)} bytes long")
    if buf[: len(magic)] != magic:
        raise BadMagicError(f"bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    r = _Reader(buf)
    r.take(len(magic))
    (found,) = r.unpack("<H")
    if found != version:
        raise VersionError(f"format version {found} is not supported (expected {version})")
    (n_text,) = r.unpack("<I")
    text = r.take(n_text)
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name)
        tag, rank = r.unpack("<BB")
        shape = r.unpack(f"<{rank}I")
        (offset,) = r.unpack("<Q")
        table.append((name, tag, shape, offset))
    payload_start = r.pos
    payload_len = 0
    for name, tag, shape, offset in table:
        if tag not in DTYPE_TAGS:
            raise LayoutError(f"unknown dtype tag {tag} for tensor {name!r}")
        if offset != payload_len:
            raise LayoutError(f"tensor {name!r} offset {offset} != expected {payload_len}")
        payload_len += int(np.prod(shape, dtype=np.int64)) * DTYPE_TAGS[tag].itemsize
    expected = payload_start + payload_len + 4
    if len(buf) < expected:
        raise TruncatedError(f"file has {len(buf)} bytes, layout needs {expected}")
    if len(buf) > expected:
        raise LayoutError(f"{len(buf) - expected} unexpected trailing bytes")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC-32 mismatch: file is corrupted")
    try:
        descriptor = text.decode("utf-8")
        names = [n.decode("utf-8") for n, *_ in table]
    except UnicodeDecodeError as err:
        raise LayoutError(f"undecodable text in header: {err}") from err
    tensors = {}
    for name, (_, tag, shape, offset) in zip(names, table):
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64))
        start = payload_start + offset
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return descriptor, tensors
