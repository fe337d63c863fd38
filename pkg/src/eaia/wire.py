"""Protocol messages and their canonical TLV wire encoding.

Frame layout::

    type(1) || { field_tag(1) || length(2, big-endian) || value }*

Fields appear in a fixed order with fixed widths for the given system
parameters. Decoding checks every width, every point's curve membership
and every scalar's range, and raises ``MalformedMessage`` for anything
else; it never raises a different exception on untrusted input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import MalformedMessage, MalformedPoint
from .group import Point

TS_LEN = 8

TYPE_AUTH_REQUEST = 0x10
TYPE_CHALLENGE = 0x11
TYPE_RESPONSE = 0x12
TYPE_UPDATE_REQUEST = 0x13
TYPE_UPDATE_REPLY = 0x14


@dataclass(frozen=True)
class AuthRequest:
    requester_id: bytes
    requester_pub_sum: Point


@dataclass(frozen=True)
class ChallengeMsg:
    B: Point
    N: bytes
    sigma: int
    T_a: int


@dataclass(frozen=True)
class ResponseMsg:
    D: Point
    eta: bytes
    T_b: int


@dataclass(frozen=True)
class PseudonymUpdateRequest:
    sigma: int
    B: Point
    A: Point
    id: bytes
    R: Point
    T: int


@dataclass(frozen=True)
class PseudonymUpdateReply:
    Q: bytes
    T_c: int


# (field name, kind); field tags are 1-based positions in this list
_LAYOUT = {
    AuthRequest: (TYPE_AUTH_REQUEST, [("requester_id", "id"), ("requester_pub_sum", "point")]),
    ChallengeMsg: (TYPE_CHALLENGE, [("B", "point"), ("N", "N"), ("sigma", "scalar"), ("T_a", "ts")]),
    ResponseMsg: (TYPE_RESPONSE, [("D", "point"), ("eta", "tag"), ("T_b", "ts")]),
    PseudonymUpdateRequest: (TYPE_UPDATE_REQUEST, [
        ("sigma", "scalar"), ("B", "point"), ("A", "point"), ("id", "id"), ("R", "point"), ("T", "ts"),
    ]),
    PseudonymUpdateReply: (TYPE_UPDATE_REPLY, [("Q", "id"), ("T_c", "ts")]),
}
_BY_TYPE = {t: (cls, fields) for cls, (t, fields) in _LAYOUT.items()}

MESSAGE_NAMES = {
    TYPE_AUTH_REQUEST: "AuthRequest",
    TYPE_CHALLENGE: "ChallengeMsg",
    TYPE_RESPONSE: "ResponseMsg",
    TYPE_UPDATE_REQUEST: "PseudonymUpdateRequest",
    TYPE_UPDATE_REPLY: "PseudonymUpdateReply",
}


def _width(kind, params):
    curve = params.curve
    if kind == "point":
        return curve.point_len
    if kind == "scalar":
        return curve.scalar_len
    if kind == "id":
        return params.id_len
    if kind == "N":
        return params.id_len + curve.point_len
    if kind == "tag":
        return params.tag_bits // 8
    if kind == "ts":
        return TS_LEN
    raise AssertionError(kind)


def _encode_value(kind, value, params):
    curve = params.curve
    if kind == "point":
        if value.is_identity:
            raise ValueError("identity point cannot be sent")
        return curve.encode_point(value)
    if kind == "scalar":
        return curve.encode_scalar(value)
    if kind == "ts":
        return value.to_bytes(TS_LEN, "big")
    return bytes(value)


def encode_message(msg, params):
    try:
        mtype, fields = _LAYOUT[type(msg)]
    except KeyError:
        raise TypeError(f"{type(msg).__name__} is not a wire message") from None
    out = bytearray([mtype])
    for tag, (name, kind) in enumerate(fields, 1):
        value = _encode_value(kind, getattr(msg, name), params)
        if len(value) != _width(kind, params):
            raise ValueError(f"{name}: width {len(value)} != {_width(kind, params)}")
        out += struct.pack(">BH", tag, len(value)) + value
    return bytes(out)


def _iter_fields(data, fields):
    """Yield (name, kind, start, end) for every field, checking framing only."""
    pos = 1
    for tag, (name, kind) in enumerate(fields, 1):
        if pos + 3 > len(data):
            raise MalformedMessage(f"truncated before field {name}")
        ftag, flen = struct.unpack_from(">BH", data, pos)
        if ftag != tag:
            raise MalformedMessage(f"expected field tag {tag}, got {ftag}")
        pos += 3
        if pos + flen > len(data):
            raise MalformedMessage(f"truncated inside field {name}")
        yield name, kind, pos, pos + flen
        pos += flen
    if pos != len(data):
        raise MalformedMessage(f"{len(data) - pos} trailing bytes")


def _layout_for(data):
    if not data:
        raise MalformedMessage("empty frame")
    try:
        return _BY_TYPE[data[0]]
    except KeyError:
        raise MalformedMessage(f"unknown message type 0x{data[0]:02x}") from None


def field_spans(data):
    """Byte ranges of each field value in an encoded frame: {name: (start, end)}."""
    data = bytes(data)
    _, fields = _layout_for(data)
    return {name: (start, end) for name, kind, start, end in _iter_fields(data, fields)}


def message_type(data):
    """Name of the message type of a frame, or None if the type byte is unknown."""
    return MESSAGE_NAMES.get(data[0]) if data else None


def decode_message(data, params):
    data = bytes(data)
    cls, fields = _layout_for(data)
    curve = params.curve
    values = {}
    for name, kind, start, end in _iter_fields(data, fields):
        raw = data[start:end]
        if len(raw) != _width(kind, params):
            raise MalformedMessage(f"{name}: width {len(raw)} != {_width(kind, params)}")
        if kind == "point":
            try:
                pt = curve.decode_point(raw)
            except MalformedPoint as exc:
                raise MalformedMessage(f"{name}: {exc}", field=name) from None
            if pt.is_identity:
                raise MalformedMessage(f"{name}: identity point", field=name)
            values[name] = pt
        elif kind == "scalar":
            k = int.from_bytes(raw, "big")
            if not 0 < k < curve.q:
                raise MalformedMessage(f"{name}: scalar out of range", field=name)
            values[name] = k
        elif kind == "ts":
            values[name] = int.from_bytes(raw, "big")
        else:
            values[name] = raw
    return cls(**values)


def framing_overhead(msg_cls):
    """Bytes of framing (type byte plus per-field headers) for a message type."""
    return 1 + 3 * len(_LAYOUT[msg_cls][1])
