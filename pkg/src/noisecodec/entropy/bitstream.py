"""The ``.jdc`` container.

Layout (little-endian)::

    magic      4s   b"JDCB"
    version    u16
    flags      u16  bit 0 context model on, bit 1 metric (0 mse, 1 msssim)
    quality    u8   1..6
    orig_w     u32
    orig_h     u32
    pad_w      u32
    pad_h      u32
    z2_len     u32, then z2_len payload bytes
    z1_len     u32, then z1_len payload bytes
    crc32      u32  over both payloads, in order

The checksum lets a flipped payload byte surface as an error even when the
rANS decoder happens to finish in a valid state.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

MAGIC = b"JDCB"
VERSION = 1
FLAG_CONTEXT = 1
FLAG_MSSSIM = 2

_HEAD = struct.Struct("<4sHHB4I")
_U32 = struct.Struct("<I")
OVERHEAD_BYTES = _HEAD.size + 3 * _U32.size


class BitstreamError(ValueError):
    """Malformed, corrupt or incompatible container."""


@dataclass(frozen=True)
class Bitstream:
    context_enabled: bool
    metric: str
    quality: int
    orig_width: int
    orig_height: int
    pad_width: int
    pad_height: int
    z2_payload: bytes
    z1_payload: bytes
    version: int = VERSION

    @property
    def flags(self) -> int:
        return (FLAG_CONTEXT if self.context_enabled else 0) | (FLAG_MSSSIM if self.metric == "msssim" else 0)

    def to_bytes(self) -> bytes:
        if not 1 <= self.quality <= 6:
            raise ValueError(f"quality index {self.quality} outside 1..6")
        head = _HEAD.pack(MAGIC, self.version, self.flags, self.quality, self.orig_width, self.orig_height,
                          self.pad_width, self.pad_height)
        crc = zlib.crc32(self.z1_payload, zlib.crc32(self.z2_payload))
        return b"".join([head, _U32.pack(len(self.z2_payload)), self.z2_payload,
                         _U32.pack(len(self.z1_payload)), self.z1_payload, _U32.pack(crc)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        data = bytes(data)
        if len(data) < _HEAD.size:
            raise BitstreamError("stream shorter than the header")
        magic, version, flags, quality, ow, oh, pw, ph = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise BitstreamError("not a .jdc stream (bad magic)")
        if version != VERSION:
            raise BitstreamError(f"unsupported stream version {version} (this build reads {VERSION})")
        if flags & ~(FLAG_CONTEXT | FLAG_MSSSIM):
            raise BitstreamError(f"unknown flag bits 0x{flags:04x}")
        if not 1 <= quality <= 6:
            raise BitstreamError(f"quality index {quality} outside 1..6")
        pos = _HEAD.size
        segments = []
        for name in ("z2", "z1"):
            if pos + 4 > len(data):
                raise BitstreamError(f"truncated before the {name} length field")
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + n > len(data):
                raise BitstreamError(f"{name} segment declares {n} bytes, only {len(data) - pos} remain")
            segments.append(data[pos : pos + n])
            pos += n
        if pos + 4 != len(data):
            raise BitstreamError("missing checksum or trailing bytes after the payload")
        (crc,) = _U32.unpack_from(data, pos)
        if crc != zlib.crc32(segments[1], zlib.crc32(segments[0])):
            raise BitstreamError("payload checksum mismatch (corrupt stream)")
        return cls(
            context_enabled=bool(flags & FLAG_CONTEXT), metric="msssim" if flags & FLAG_MSSSIM else "mse",
            quality=quality, orig_width=ow, orig_height=oh, pad_width=pw, pad_height=ph,
            z2_payload=segments[0], z1_payload=segments[1], version=version,
        )

    def __len__(self) -> int:
        return OVERHEAD_BYTES + len(self.z2_payload) + len(self.z1_payload)
