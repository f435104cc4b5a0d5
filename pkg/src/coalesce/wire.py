"""Envelope framing: many tagged sub-messages packed into one byte string.

Layout (little-endian)::

    "COAL" | version:u8 | step_index:u64 | count:u32
    then per sub-message: client_id:u32 | tag:u32 | length:u64 | payload

Sub-messages are kept in ascending (client_id, tag) order, which makes the
encoding canonical: one envelope has exactly one byte representation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import (
    BadMagic,
    BadVersion,
    EncodeError,
    NonCanonical,
    ShortRead,
    TrailingGarbage,
)

MAGIC = b"COAL"
VERSION = 0x01

_HEADER = struct.Struct("<4sBQI")
_SUB_HEADER = struct.Struct("<IIQ")

HEADER_SIZE = _HEADER.size  # 17
SUB_HEADER_SIZE = _SUB_HEADER.size  # 16

_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class SubMessage:
    client_id: int
    tag: int
    payload: bytes

    @property
    def key(self) -> tuple[int, int]:
        return (self.client_id, self.tag)


@dataclass(frozen=True)
class Envelope:
    step_index: int
    sub_messages: tuple[SubMessage, ...] = field(default_factory=tuple)

    @classmethod
    def build(cls, step_index: int, sub_messages) -> "Envelope":
        """Sort sub-messages into canonical order. Duplicates are still refused by encode."""
        return cls(step_index, tuple(sorted(sub_messages, key=lambda m: m.key)))


def encoded_size(payload_lengths) -> int:
    return HEADER_SIZE + sum(SUB_HEADER_SIZE + n for n in payload_lengths)


def encode(envelope: Envelope) -> bytes:
    if not 0 <= envelope.step_index <= _U64_MAX:
        raise EncodeError(f"step_index {envelope.step_index} does not fit in 64 bits")
    subs = envelope.sub_messages
    if len(subs) > _U32_MAX:
        raise EncodeError("too many sub-messages")
    parts = [_HEADER.pack(MAGIC, VERSION, envelope.step_index, len(subs))]
    prev = None
    for sub in subs:
        if not (0 <= sub.client_id <= _U32_MAX and 0 <= sub.tag <= _U32_MAX):
            raise EncodeError(f"client_id/tag {sub.key} out of 32-bit range")
        if prev is not None:
            if sub.key == prev:
                raise EncodeError(f"duplicate sub-message key {sub.key}")
            if sub.key < prev:
                raise EncodeError(f"sub-messages not sorted: {sub.key} after {prev}")
        prev = sub.key
        payload = bytes(sub.payload)
        parts.append(_SUB_HEADER.pack(sub.client_id, sub.tag, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def decode(data) -> Envelope:
    buf = memoryview(data)
    if len(buf) < 4:
        raise ShortRead(f"need 4 bytes of magic, have {len(buf)}")
    if bytes(buf[:4]) != MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < 5:
        raise ShortRead("missing version byte")
    if buf[4] != VERSION:
        raise BadVersion(f"unknown version 0x{buf[4]:02x}")
    if len(buf) < HEADER_SIZE:
        raise ShortRead(f"header needs {HEADER_SIZE} bytes, have {len(buf)}")
    _, _, step_index, count = _HEADER.unpack_from(buf, 0)

    pos = HEADER_SIZE
    subs = []
    prev = None
    for i in range(count):
        if len(buf) - pos < SUB_HEADER_SIZE:
            raise ShortRead(f"sub-message {i} header truncated at offset {pos}")
        client_id, tag, length = _SUB_HEADER.unpack_from(buf, pos)
        pos += SUB_HEADER_SIZE
        if length > len(buf) - pos:
            raise ShortRead(
                f"sub-message {i} declares {length} bytes, {len(buf) - pos} remain"
            )
        key = (client_id, tag)
        if prev is not None and key <= prev:
            raise NonCanonical(f"sub-message {key} follows {prev}")
        prev = key
        subs.append(SubMessage(client_id, tag, bytes(buf[pos:pos + length])))
        pos += length
    if pos != len(buf):
        raise TrailingGarbage(f"{len(buf) - pos} bytes after last sub-message")
    return Envelope(step_index, tuple(subs))
