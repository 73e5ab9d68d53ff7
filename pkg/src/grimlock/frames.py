"""Control-channel wire format, binding-context encoding and channel binding.

ControlFrame::

    "GRLK" || version u8 (=1) || type u8 || flags u16 (=0) || length u32 || payload

Payloads are TLV sequences ``type u16 || length u32 || value``. Field types:

    0x0001 flow_id (16B)        0x0005 evidence bytes
    0x0002 nonce (32B)          0x0006 token bytes
    0x0003 audience (UTF-8)     0x0007 deny reason (u16 code)
    0x0004 scope (canonical)    0x0008 host identity (lp16 host_id || key[32])
    0x0009 destination (IPv4[4] || port u16)
"""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass

from .channel import ChannelHandle, exporter
from .core import Digest, Reader, Scope, digest, lp16, scope_canonical_bytes, u8, u16, u32
from .errors import (
    BadMagic,
    InvalidContext,
    InvalidScopeEntry,
    LengthMismatch,
    ProtocolError,
    UnsupportedVersion,
)

MAGIC = b"GRLK"
FRAME_VERSION = 1
FRAME_HEADER_LEN = 12
CONTEXT_VERSION = 1
CB_LABEL = b"EXPORTER-grimlock-a2a-v1"
CB_LEN = 32


class FrameType(enum.IntEnum):
    HELLO = 0x01
    AUTH_INIT = 0x02
    AUTH_EVIDENCE = 0x03
    AUTH_GRANT = 0x04
    AUTH_DENY = 0x05
    FLOW_CLOSE = 0x06


class Field(enum.IntEnum):
    FLOW_ID = 0x0001
    NONCE = 0x0002
    AUDIENCE = 0x0003
    SCOPE = 0x0004
    EVIDENCE = 0x0005
    TOKEN = 0x0006
    DENY_REASON = 0x0007
    HOST_IDENTITY = 0x0008
    DESTINATION = 0x0009


@dataclass(frozen=True)
class ControlFrame:
    type: int
    payload: bytes = b""
    version: int = FRAME_VERSION
    flags: int = 0


def frame_encode(frame: ControlFrame) -> bytes:
    return (MAGIC + u8(frame.version) + u8(frame.type) + u16(frame.flags)
            + u32(len(frame.payload)) + frame.payload)


def frame_decode(data: bytes) -> ControlFrame:
    if len(data) < FRAME_HEADER_LEN:
        raise LengthMismatch(f"frame shorter than header ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise BadMagic(repr(data[:4]))
    r = Reader(data[4:], LengthMismatch)
    version, ftype, flags, length = r.u8(), r.u8(), r.u16(), r.u32()
    if version != FRAME_VERSION:
        raise UnsupportedVersion(f"frame version {version}")
    if length != r.remaining:
        raise LengthMismatch(f"declared {length}, carried {r.remaining}")
    return ControlFrame(ftype, r.take(length), version, flags)


def tlv_encode(fields: list[tuple[int, bytes]]) -> bytes:
    return b"".join(u16(t) + u32(len(v)) + v for t, v in fields)


def tlv_decode(payload: bytes) -> list[tuple[int, bytes]]:
    r = Reader(payload, ProtocolError)
    out = []
    while r.remaining:
        t = r.u16()
        out.append((t, r.take(r.u32())))
    return out


def tlv_map(payload: bytes) -> dict[int, bytes]:
    fields = tlv_decode(payload)
    out: dict[int, bytes] = {}
    for t, v in fields:
        if t in out:
            raise ProtocolError(f"duplicate TLV field 0x{t:04x}")
        out[t] = v
    return out


def make_frame(ftype: FrameType, fields: list[tuple[int, bytes]]) -> ControlFrame:
    return ControlFrame(int(ftype), tlv_encode(fields))


def encode_destination(ip, port: int) -> bytes:
    return ipaddress.IPv4Address(ip).packed + u16(port)


def decode_destination(value: bytes) -> tuple[ipaddress.IPv4Address, int]:
    if len(value) != 6:
        raise ProtocolError("destination field must be 6 bytes")
    return ipaddress.IPv4Address(value[:4]), int.from_bytes(value[4:], "big")


# -- binding context and channel binding -------------------------------------

@dataclass(frozen=True)
class BindingContext:
    nonce: bytes
    audience: str
    scope: Scope
    version: int = CONTEXT_VERSION


def encode_context(ctx: BindingContext) -> bytes:
    if len(ctx.nonce) != 32:
        raise InvalidContext(f"nonce must be 32 bytes, got {len(ctx.nonce)}")
    if not ctx.audience:
        raise InvalidContext("empty audience")
    if ctx.version != CONTEXT_VERSION:
        raise InvalidContext(f"context version {ctx.version}")
    try:
        scope_bytes = scope_canonical_bytes(ctx.scope)
    except InvalidScopeEntry as exc:
        raise InvalidContext(str(exc)) from None
    return u8(ctx.version) + ctx.nonce + lp16(ctx.audience) + scope_bytes


@dataclass(frozen=True)
class ChannelBinding:
    ctx: BindingContext
    cb: bytes
    cb_hash: Digest
    label: bytes = CB_LABEL


def compute_cb(handle: ChannelHandle, ctx: BindingContext) -> ChannelBinding:
    cb = exporter(handle, CB_LABEL, encode_context(ctx), CB_LEN)
    return ChannelBinding(ctx, cb, digest(cb))
