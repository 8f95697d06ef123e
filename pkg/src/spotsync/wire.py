"""Binary datagram codec.

One message per datagram, all integers big-endian, no padding::

    offset  size  field
    0       4     magic  0x53506F54 ("SPoT")
    4       1     version (1)
    5       1     kind
    6       2     reserved (0)
    8       8     client_id   u64
    16      4     seq         u32
    20      ...   body

    kind               body                                              bytes
    1  THICK_REQ       t1 t2 t3 t4 (i64 us; t2..t4 zero)                 32
    2  THICK_RESP      t1 t2 t3 t4 (i64 us)                              32
    3  REGISTER        mode u8, style u8, device_type u8, pad u8,
                       error_margin_us u32                               8
    4  REGISTER_ACK    status u8, pad u8 x3, first_poll_s u32            8
    5  PROBE           t1 (server send, i64 us)                          8
    6  PROBE_RESP      t1 echo, t2 client recv, t3 client send (i64 us)  24
    7  ADJUST          offset_us i64, skew_ppb i64, next_poll_s u32      20
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

MAGIC = 0x53506F54
VERSION = 1
DEFAULT_PORT = 3735

HEADER = struct.Struct(">IBBHQI")
HEADER_SIZE = HEADER.size  # 20, including seq

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1
I64_MIN, I64_MAX = -(2**63), 2**63 - 1


class Kind(enum.IntEnum):
    THICK_REQ = 1
    THICK_RESP = 2
    REGISTER = 3
    REGISTER_ACK = 4
    PROBE = 5
    PROBE_RESP = 6
    ADJUST = 7


class ClientMode(enum.IntEnum):
    THICK = 0
    THIN = 1


class WireStyle(enum.IntEnum):
    AIMD = 0
    MIMD = 1


class AckStatus(enum.IntEnum):
    ACCEPTED = 0
    REGISTRY_FULL = 1
    INVALID = 2


class WireError(ValueError):
    """Base class for codec failures."""


class BadMagicError(WireError):
    pass


class UnsupportedVersionError(WireError):
    pass


class UnknownKindError(WireError):
    pass


class TruncatedError(WireError):
    pass


class TrailingBytesError(WireError):
    pass


class InvalidFieldError(WireError):
    pass


@dataclass(frozen=True, slots=True)
class Timestamps:
    """t1..t4 of a client-initiated exchange, microseconds."""

    t1: int
    t2: int = 0
    t3: int = 0
    t4: int = 0


@dataclass(frozen=True, slots=True)
class RegistrationBody:
    mode: ClientMode
    polling_style: WireStyle
    error_margin_us: int
    device_type: int = 0


@dataclass(frozen=True, slots=True)
class RegisterAckBody:
    status: AckStatus
    first_poll_s: int = 0


@dataclass(frozen=True, slots=True)
class ProbeBody:
    t1: int


@dataclass(frozen=True, slots=True)
class ProbeRespBody:
    t1: int
    t2: int
    t3: int


@dataclass(frozen=True, slots=True)
class AdjustBody:
    offset_us: int
    skew_ppb: int
    next_poll_s: int


Body = Union[Timestamps, RegistrationBody, RegisterAckBody, ProbeBody, ProbeRespBody, AdjustBody]

_TS = struct.Struct(">qqqq")
_REG = struct.Struct(">BBBBI")
_ACK = struct.Struct(">BBHI")
_PROBE = struct.Struct(">q")
_PROBE_RESP = struct.Struct(">qqq")
_ADJUST = struct.Struct(">qqI")

BODY_STRUCTS: dict[Kind, struct.Struct] = {
    Kind.THICK_REQ: _TS,
    Kind.THICK_RESP: _TS,
    Kind.REGISTER: _REG,
    Kind.REGISTER_ACK: _ACK,
    Kind.PROBE: _PROBE,
    Kind.PROBE_RESP: _PROBE_RESP,
    Kind.ADJUST: _ADJUST,
}

BODY_TYPES: dict[Kind, type] = {
    Kind.THICK_REQ: Timestamps,
    Kind.THICK_RESP: Timestamps,
    Kind.REGISTER: RegistrationBody,
    Kind.REGISTER_ACK: RegisterAckBody,
    Kind.PROBE: ProbeBody,
    Kind.PROBE_RESP: ProbeRespBody,
    Kind.ADJUST: AdjustBody,
}


def message_size(kind: Kind) -> int:
    return HEADER_SIZE + BODY_STRUCTS[kind].size


@dataclass(frozen=True, slots=True)
class Message:
    kind: Kind
    client_id: int
    seq: int
    body: Body
    version: int = VERSION


def _check_range(name: str, value: int, lo: int, hi: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or not lo <= value <= hi:
        raise InvalidFieldError(f"{name}={value!r} outside [{lo}, {hi}]")


def _validate(msg: Message) -> None:
    if msg.version != VERSION:
        raise UnsupportedVersionError(f"cannot encode version {msg.version}")
    try:
        kind = Kind(msg.kind)
    except ValueError:
        raise UnknownKindError(f"kind {msg.kind!r}") from None
    if not isinstance(msg.body, BODY_TYPES[kind]):
        raise InvalidFieldError(f"{kind.name} needs a {BODY_TYPES[kind].__name__} body")
    _check_range("client_id", msg.client_id, 0, U64_MAX)
    _check_range("seq", msg.seq, 0, U32_MAX)
    b = msg.body
    if isinstance(b, Timestamps):
        for name in ("t1", "t2", "t3", "t4"):
            _check_range(name, getattr(b, name), I64_MIN, I64_MAX)
    elif isinstance(b, RegistrationBody):
        ClientMode(b.mode)
        WireStyle(b.polling_style)
        _check_range("device_type", b.device_type, 0, 255)
        _check_range("error_margin_us", b.error_margin_us, 1, U32_MAX)
    elif isinstance(b, RegisterAckBody):
        AckStatus(b.status)
        _check_range("first_poll_s", b.first_poll_s, 0, U32_MAX)
    elif isinstance(b, ProbeBody):
        _check_range("t1", b.t1, I64_MIN, I64_MAX)
    elif isinstance(b, ProbeRespBody):
        for name in ("t1", "t2", "t3"):
            _check_range(name, getattr(b, name), I64_MIN, I64_MAX)
    else:
        _check_range("offset_us", b.offset_us, I64_MIN, I64_MAX)
        _check_range("skew_ppb", b.skew_ppb, I64_MIN, I64_MAX)
        _check_range("next_poll_s", b.next_poll_s, 0, U32_MAX)


def encode(msg: Message) -> bytes:
    try:
        _validate(msg)
    except ValueError as exc:
        if isinstance(exc, WireError):
            raise
        raise InvalidFieldError(str(exc)) from None
    kind = Kind(msg.kind)
    header = HEADER.pack(MAGIC, VERSION, kind, 0, msg.client_id, msg.seq)
    b = msg.body
    if isinstance(b, Timestamps):
        body = _TS.pack(b.t1, b.t2, b.t3, b.t4)
    elif isinstance(b, RegistrationBody):
        body = _REG.pack(b.mode, b.polling_style, b.device_type, 0, b.error_margin_us)
    elif isinstance(b, RegisterAckBody):
        body = _ACK.pack(b.status, 0, 0, b.first_poll_s)
    elif isinstance(b, ProbeBody):
        body = _PROBE.pack(b.t1)
    elif isinstance(b, ProbeRespBody):
        body = _PROBE_RESP.pack(b.t1, b.t2, b.t3)
    else:
        body = _ADJUST.pack(b.offset_us, b.skew_ppb, b.next_poll_s)
    return header + body


def decode(data: bytes) -> Message:
    """Parse one datagram.

    Raises a distinct :class:`WireError` subclass for bad magic, unknown
    version, unknown kind, truncation, trailing bytes and invalid fields.
    """
    if len(data) < 4:
        raise TruncatedError(f"{len(data)} bytes is shorter than the magic")
    if int.from_bytes(data[:4], "big") != MAGIC:
        raise BadMagicError(f"magic {bytes(data[:4]).hex()}")
    if len(data) < 5:
        raise TruncatedError("missing version")
    if data[4] != VERSION:
        raise UnsupportedVersionError(f"version {data[4]}")
    if len(data) < 6:
        raise TruncatedError("missing kind")
    try:
        kind = Kind(data[5])
    except ValueError:
        raise UnknownKindError(f"kind {data[5]}") from None
    expected = message_size(kind)
    if len(data) < expected:
        raise TruncatedError(f"{kind.name} needs {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise TrailingBytesError(f"{kind.name} has {len(data) - expected} trailing bytes")
    _, _, _, reserved, client_id, seq = HEADER.unpack_from(data, 0)
    if reserved:
        raise InvalidFieldError("reserved header bytes must be zero")
    fields = BODY_STRUCTS[kind].unpack_from(data, HEADER_SIZE)
    if kind in (Kind.THICK_REQ, Kind.THICK_RESP):
        body: Body = Timestamps(*fields)
    elif kind is Kind.REGISTER:
        mode, style, device_type, pad, em = fields
        if pad:
            raise InvalidFieldError("registration padding must be zero")
        try:
            body = RegistrationBody(ClientMode(mode), WireStyle(style), em, device_type)
        except ValueError:
            raise InvalidFieldError(f"registration mode={mode} style={style}") from None
        if em == 0:
            raise InvalidFieldError("error margin must be positive")
    elif kind is Kind.REGISTER_ACK:
        status, pad1, pad2, first_poll = fields
        if pad1 or pad2:
            raise InvalidFieldError("ack padding must be zero")
        try:
            body = RegisterAckBody(AckStatus(status), first_poll)
        except ValueError:
            raise InvalidFieldError(f"ack status {status}") from None
    elif kind is Kind.PROBE:
        body = ProbeBody(*fields)
    elif kind is Kind.PROBE_RESP:
        body = ProbeRespBody(*fields)
    else:
        body = AdjustBody(*fields)
    return Message(kind, client_id, seq, body)
