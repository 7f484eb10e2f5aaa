"""Binary message framing for the control and data channels.

Frame layout (all integers big-endian):

    offset  size  field
    ------  ----  -----------------------------------------
    0       2     magic: 0xED 0x9E
    2       1     version (must be 1)
    3       1     msg_type
    4       2     reserved, written as 0
    6       4     session_id
    10      4     seq (monotonically increasing per sender per channel)
    14      4     payload_len
    18      n     payload
    18+n    4     crc32 over all preceding bytes [0, 18+n)

CRC-32 uses the reflected IEEE polynomial 0xEDB88320 (zlib.crc32), so
crc32(b"123456789") == 0xCBF43926.  The payload is capped at 16 MiB.

Framing errors are fatal: a decoder hitting BadMagic/BadVersion/BadCrc/
UnknownMsgType must tear down the connection rather than resynchronize.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

MAGIC = b"\xed\x9e"
VERSION = 1
HEADER_LEN = 18
CRC_LEN = 4
MAX_PAYLOAD = 16 * 1024 * 1024

_HEADER = struct.Struct(">2sBBHIII")


class WireError(Exception):
    """Base class for framing failures; each subclass names the bad field."""


class PayloadTooLarge(WireError):
    pass


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class BadCrc(WireError):
    pass


class UnknownMsgType(WireError):
    pass


class MsgType(IntEnum):
    # control plane
    HELLO = 1
    HELLO_ACK = 2
    CONTEXT_UPDATE = 3
    SERVICE_ACTIVATE = 4
    SERVICE_DEACTIVATE = 5
    HEARTBEAT = 6
    ERROR = 7
    ACTUATOR_CMD = 8
    # data plane
    NAV_SELECT_DEST = 16
    NAV_INSTRUCTION = 17
    NAV_ARRIVED = 18
    NAV_DEST_INFO = 19
    FRAME = 32
    RECOG_RESULT = 33
    # benchmark probes (allowed on either channel)
    ECHO_REQ = 48
    ECHO_RESP = 49
    UPLOAD_BEGIN = 50
    UPLOAD_CHUNK = 51
    UPLOAD_END = 52
    UPLOAD_ACK = 53


CONTROL_TYPES = frozenset({
    MsgType.HELLO, MsgType.HELLO_ACK, MsgType.CONTEXT_UPDATE,
    MsgType.SERVICE_ACTIVATE, MsgType.SERVICE_DEACTIVATE,
    MsgType.HEARTBEAT, MsgType.ERROR, MsgType.ACTUATOR_CMD,
})

DATA_TYPES = frozenset({
    MsgType.NAV_SELECT_DEST, MsgType.NAV_INSTRUCTION, MsgType.NAV_ARRIVED,
    MsgType.NAV_DEST_INFO, MsgType.FRAME, MsgType.RECOG_RESULT,
})

BENCH_TYPES = frozenset({
    MsgType.ECHO_REQ, MsgType.ECHO_RESP, MsgType.UPLOAD_BEGIN,
    MsgType.UPLOAD_CHUNK, MsgType.UPLOAD_END, MsgType.UPLOAD_ACK,
})


def allowed_on(channel: str, msg_type: MsgType) -> bool:
    """True if msg_type may travel on the given channel ("control"/"data")."""
    if msg_type in BENCH_TYPES:
        return True
    if channel == "control":
        return msg_type in CONTROL_TYPES
    if channel == "data":
        return msg_type in DATA_TYPES
    raise ValueError(f"unknown channel {channel!r}")


class ErrorCode(IntEnum):
    """Codes carried in ERROR payloads."""

    NO_ACTIVE_SERVICE = 1
    TYPE_NOT_ACCEPTED = 2
    STALE_CONTEXT = 3
    UNKNOWN_USER = 4
    BAD_REQUEST = 5
    SERVER_REJECTED = 6
    WRONG_CHANNEL = 7


@dataclass(frozen=True)
class MessageEnvelope:
    """One framed message; version is implied (always 1 on encode)."""

    msg_type: MsgType
    session_id: int = 0
    seq: int = 0
    payload: bytes = b""


def encode_frame(envelope: MessageEnvelope) -> bytes:
    """Serialize an envelope; the crc is computed here, never taken as input."""
    payload = envelope.payload
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload is {len(payload)} bytes, cap is {MAX_PAYLOAD}")
    head = _HEADER.pack(MAGIC, VERSION, int(envelope.msg_type), 0,
                        envelope.session_id, envelope.seq, len(payload))
    body = head + payload
    return body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_frame(buffer: bytes) -> tuple[MessageEnvelope, bytes] | None:
    """Consume exactly one frame from the front of buffer.

    Returns (envelope, remaining bytes), or None when the buffer holds only
    a prefix of a valid frame and more data is needed.  Raises a WireError
    subclass on any malformed field; the caller must then drop the
    connection (no resynchronization is attempted).
    """
    if len(buffer) < HEADER_LEN:
        return None
    magic, version, raw_type, _reserved, session_id, seq, payload_len = \
        _HEADER.unpack_from(buffer)
    if magic != MAGIC:
        raise BadMagic(f"magic bytes {magic.hex()} != {MAGIC.hex()}")
    if version != VERSION:
        raise BadVersion(f"version {version} != {VERSION}")
    if payload_len > MAX_PAYLOAD:
        raise PayloadTooLarge(f"declared payload {payload_len} exceeds cap")
    total = HEADER_LEN + payload_len + CRC_LEN
    if len(buffer) < total:
        return None
    (crc,) = struct.unpack_from(">I", buffer, total - CRC_LEN)
    if zlib.crc32(buffer[:total - CRC_LEN]) & 0xFFFFFFFF != crc:
        raise BadCrc(f"crc mismatch on {total}-byte frame")
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownMsgType(f"msg_type {raw_type} is not defined") from None
    envelope = MessageEnvelope(msg_type, session_id, seq,
                               bytes(buffer[HEADER_LEN:HEADER_LEN + payload_len]))
    return envelope, bytes(buffer[total:])


class FrameDecoder:
    """Incremental decoder: feed() bytes, iterate complete envelopes."""

    def __init__(self) -> None:
        self._buf = b""

    def feed(self, data: bytes) -> list[MessageEnvelope]:
        self._buf += data
        out: list[MessageEnvelope] = []
        while True:
            decoded = decode_frame(self._buf)
            if decoded is None:
                return out
            envelope, self._buf = decoded
            out.append(envelope)


# ---------------------------------------------------------------------------
# Payload codecs for channel-management and benchmark message types.
# Service-specific payloads live next to their service modules.
# ---------------------------------------------------------------------------

CHANNEL_CONTROL = 0
CHANNEL_DATA = 1


def pack_hello(channel_kind: int, session_id: int, user_id: str) -> bytes:
    user = user_id.encode("utf-8")
    return struct.pack(">BIH", channel_kind, session_id, len(user)) + user


def unpack_hello(payload: bytes) -> tuple[int, int, str]:
    channel_kind, session_id, n = struct.unpack_from(">BIH", payload)
    user = payload[7:7 + n].decode("utf-8")
    return channel_kind, session_id, user


def pack_hello_ack(session_id: int) -> bytes:
    return struct.pack(">I", session_id)


def unpack_hello_ack(payload: bytes) -> int:
    return struct.unpack(">I", payload)[0]


def pack_error(code: ErrorCode, message: str) -> bytes:
    msg = message.encode("utf-8")
    return struct.pack(">HH", int(code), len(msg)) + msg


def unpack_error(payload: bytes) -> tuple[ErrorCode, str]:
    code, n = struct.unpack_from(">HH", payload)
    return ErrorCode(code), payload[4:4 + n].decode("utf-8")


def pack_upload_begin(total_bytes: int) -> bytes:
    return struct.pack(">Q", total_bytes)


def unpack_upload_begin(payload: bytes) -> int:
    return struct.unpack(">Q", payload)[0]


def pack_upload_ack(received_bytes: int) -> bytes:
    return struct.pack(">Q", received_bytes)


def unpack_upload_ack(payload: bytes) -> int:
    return struct.unpack(">Q", payload)[0]


# ---------------------------------------------------------------------------
# Video frame payload
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FramePayload:
    """One grayscale video frame: 8-bit pixels, row-major."""

    frame_seq: int
    capture_time_ms: int
    width: int
    height: int
    pixels: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("frame dimensions must be >= 1")
        if len(self.pixels) != self.width * self.height:
            raise ValueError(
                f"pixel buffer is {len(self.pixels)} bytes, "
                f"expected {self.width * self.height}")


def pack_frame_payload(frame: FramePayload) -> bytes:
    head = struct.pack(">IQHH", frame.frame_seq, frame.capture_time_ms,
                       frame.width, frame.height)
    return head + frame.pixels


def unpack_frame_payload(payload: bytes) -> FramePayload:
    frame_seq, capture_time_ms, width, height = struct.unpack_from(">IQHH", payload)
    pixels = payload[16:16 + width * height]
    return FramePayload(frame_seq, capture_time_ms, width, height, pixels)
