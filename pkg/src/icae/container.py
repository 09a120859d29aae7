"""On-disk CodeStream container: header + coded side-info + coded latents.

Layout (all multi-byte integers big-endian):

    magic    4 bytes  b"ICAE"
    version  u8       1
    variant  u8       0 = baseline, 1 = deepened
    N        u16
    M        u16
    height   u32      original image height (pre-padding)
    width    u32      original image width
    z_len    u32      side-info segment length, then that many bytes
    y_len    u32      latent segment length, then that many bytes
    check    u64      FNV-1a 64 of every preceding byte

The trailing checksum guarantees that any single corrupted byte (and any
truncation, via the length framing) is rejected instead of decoding into
a broken image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"ICAE"
VERSION = 1
VARIANT_IDS = {"baseline": 0, "deepened": 1}
VARIANT_NAMES = {v: k for k, v in VARIANT_IDS.items()}

_FIXED_HEADER = struct.Struct(">4sBBHHII")
CHECKSUM_BYTES = 8

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


class StreamFormatError(ValueError):
    """Container bytes violate the CodeStream layout."""


@dataclass
class StreamHeader:
    variant: str
    n_channels: int
    m_channels: int
    height: int
    width: int


def pack_stream(header: StreamHeader, z_bytes: bytes, y_bytes: bytes) -> bytes:
    if header.variant not in VARIANT_IDS:
        raise StreamFormatError(f"unknown variant {header.variant!r}")
    if not (0 < header.height < 1 << 32 and 0 < header.width < 1 << 32):
        raise StreamFormatError(f"bad image dimensions {header.height}x{header.width}")
    body = bytearray()
    body += _FIXED_HEADER.pack(
        MAGIC,
        VERSION,
        VARIANT_IDS[header.variant],
        header.n_channels,
        header.m_channels,
        header.height,
        header.width,
    )
    body += struct.pack(">I", len(z_bytes)) + z_bytes
    body += struct.pack(">I", len(y_bytes)) + y_bytes
    body += struct.pack(">Q", fnv1a64(bytes(body)))
    return bytes(body)


def unpack_stream(data: bytes) -> tuple[StreamHeader, bytes, bytes]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise StreamFormatError("bad magic: not an ICAE code stream")
    if len(data) < _FIXED_HEADER.size + 4 + 4 + CHECKSUM_BYTES:
        raise StreamFormatError("truncated stream: header incomplete")
    _, version, variant_id, n, m, height, width = _FIXED_HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise StreamFormatError(f"unsupported version {version}")
    if variant_id not in VARIANT_NAMES:
        raise StreamFormatError(f"unknown variant id {variant_id}")
    pos = _FIXED_HEADER.size
    segments = []
    for name in ("z", "y"):
        if pos + 4 > len(data) - CHECKSUM_BYTES:
            raise StreamFormatError(f"truncated stream: missing {name} segment length")
        (seg_len,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + seg_len > len(data) - CHECKSUM_BYTES:
            raise StreamFormatError(f"segment length overrun in {name} segment")
        segments.append(bytes(data[pos : pos + seg_len]))
        pos += seg_len
    if pos + CHECKSUM_BYTES != len(data):
        raise StreamFormatError("stream length does not match segment framing")
    (stored,) = struct.unpack_from(">Q", data, pos)
    if fnv1a64(bytes(data[:pos])) != stored:
        raise StreamFormatError("checksum mismatch: corrupt or incomplete stream")
    header = StreamHeader(
        variant=VARIANT_NAMES[variant_id],
        n_channels=n,
        m_channels=m,
        height=height,
        width=width,
    )
    return header, segments[0], segments[1]
