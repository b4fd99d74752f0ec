"""Length-prefixed frame codec shared by peer and relay connections.

Wire layout, big-endian:

    u32 length | u8 type | payload

``length`` counts the type byte plus the payload, so an empty frame is five
bytes total. The payload is a compact JSON body; frames that carry bytes
(BLOB_CHUNK, LOG_CHUNK) append a single newline after the JSON and the raw
binary after that. Compact JSON contains no newline, so the first newline is
an unambiguous separator and binary data is never re-split.

Frames are capped at 1 MiB; a declared length beyond the cap is rejected
before any payload is buffered. Blob payloads travel as 64 KiB chunks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .errors import FrameError

MAX_FRAME = 1 << 20  # 1 MiB over the wire, including the type byte
CHUNK_SIZE = 64 << 10  # blob payload bytes per BLOB_CHUNK frame

HELLO = 0x01
ERROR = 0x02
PING = 0x03
PONG = 0x04
ANNOUNCE = 0x10
RETRACT = 0x11
LIST = 0x12
DOC_REQUEST = 0x20
DOC_RESPONSE = 0x21
EXEC_REQUEST = 0x30
CHALLENGE = 0x31
PROOF = 0x32
BLOB_CHUNK = 0x33
LOG_CHUNK = 0x34
EXEC_RESULT = 0x35
RUN_SUBMIT = 0x40
RUN_EVENT = 0x41
DATA_QUERY = 0x42
DATA_RESULT = 0x43

TYPE_NAMES = {
    HELLO: "HELLO", ERROR: "ERROR", PING: "PING", PONG: "PONG",
    ANNOUNCE: "ANNOUNCE", RETRACT: "RETRACT", LIST: "LIST",
    DOC_REQUEST: "DOC_REQUEST", DOC_RESPONSE: "DOC_RESPONSE",
    EXEC_REQUEST: "EXEC_REQUEST", CHALLENGE: "CHALLENGE", PROOF: "PROOF",
    BLOB_CHUNK: "BLOB_CHUNK", LOG_CHUNK: "LOG_CHUNK", EXEC_RESULT: "EXEC_RESULT",
    RUN_SUBMIT: "RUN_SUBMIT", RUN_EVENT: "RUN_EVENT",
    DATA_QUERY: "DATA_QUERY", DATA_RESULT: "DATA_RESULT",
}

BINARY_TYPES = frozenset({BLOB_CHUNK, LOG_CHUNK})


def type_name(frame_type: int) -> str:
    return TYPE_NAMES.get(frame_type, f"0x{frame_type:02x}")


@dataclass(frozen=True)
class Frame:
    type: int
    body: Optional[dict] = None
    binary: bytes = field(default=b"")

    def __post_init__(self):
        if not 0 <= self.type <= 0xFF:
            raise FrameError("UNKNOWN_TYPE", f"type {self.type} is not a byte")
        if self.binary and self.type not in BINARY_TYPES:
            raise FrameError("UNKNOWN_TYPE",
                             f"{type_name(self.type)} frames carry no binary section",
                             frame_type=self.type)


def encode_frame(frame: Frame) -> bytes:
    if frame.body is None:
        body = b""
    else:
        body = json.dumps(frame.body, separators=(",", ":"),
                          sort_keys=True).encode()
    if frame.type in BINARY_TYPES:
        payload = body + b"\n" + frame.binary
    else:
        payload = body
    length = 1 + len(payload)
    if length > MAX_FRAME:
        raise FrameError("FRAME_TOO_LARGE",
                         f"frame of {length} bytes exceeds the {MAX_FRAME} cap",
                         frame_type=frame.type)
    return struct.pack(">IB", length, frame.type) + payload


def _parse_payload(frame_type: int, payload: bytes, strict: bool) -> Frame:
    if strict and frame_type not in TYPE_NAMES:
        raise FrameError("UNKNOWN_TYPE", f"unknown frame type 0x{frame_type:02x}",
                         frame_type=frame_type)
    if frame_type in BINARY_TYPES:
        sep = payload.find(b"\n")
        if sep < 0:
            raise FrameError("TRUNCATED", "binary frame without body separator",
                             frame_type=frame_type)
        body_bytes, binary = payload[:sep], payload[sep + 1:]
    else:
        body_bytes, binary = payload, b""
    if body_bytes:
        try:
            body = json.loads(body_bytes)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FrameError("BAD_BODY", f"frame body is not valid JSON: {exc}",
                             frame_type=frame_type) from exc
        if not isinstance(body, dict):
            raise FrameError("BAD_BODY", "frame body must be a JSON object",
                             frame_type=frame_type)
    else:
        body = None
    return Frame(frame_type, body, binary)


def decode_frame(data: bytes, strict: bool = True) -> Frame:
    """Decode one complete frame from ``data``; data must be exactly one frame."""
    if len(data) < 5:
        raise FrameError("TRUNCATED", f"{len(data)} bytes is shorter than a header")
    length, frame_type = struct.unpack(">IB", data[:5])
    if length > MAX_FRAME:
        raise FrameError("FRAME_TOO_LARGE",
                         f"declared length {length} exceeds the {MAX_FRAME} cap")
    if length < 1:
        raise FrameError("TRUNCATED", "declared length misses the type byte")
    if len(data) != 4 + length:
        raise FrameError("TRUNCATED",
                         f"expected {4 + length} bytes, got {len(data)}")
    return _parse_payload(frame_type, data[5:], strict)


class FrameReader:
    """Incremental decoder over a read(n) callable (socket or file-like).

    The declared length is validated before the payload is buffered, so a
    hostile length prefix cannot force a large allocation.
    """

    def __init__(self, read, strict: bool = False):
        self._read = read
        self._strict = strict

    def _read_exact(self, n: int) -> bytes:
        parts = []
        remaining = n
        while remaining:
            chunk = self._read(remaining)
            if not chunk:
                raise FrameError("TRUNCATED",
                                 f"stream ended {remaining} bytes short")
            parts.append(chunk)
            remaining -= len(chunk)
        return b"".join(parts)

    def next_frame(self) -> Optional[Frame]:
        """The next frame, or None on clean end-of-stream between frames."""
        first = self._read(4)
        if not first:
            return None
        header = first if len(first) == 4 else first + self._read_exact(4 - len(first))
        (length,) = struct.unpack(">I", header)
        if length > MAX_FRAME:
            raise FrameError("FRAME_TOO_LARGE",
                             f"declared length {length} exceeds the {MAX_FRAME} cap")
        if length < 1:
            raise FrameError("TRUNCATED", "declared length misses the type byte")
        rest = self._read_exact(length)
        return _parse_payload(rest[0], rest[1:], self._strict)


def chunk_blob(request_id: str, digest: str, data: bytes,
               role: str = "input") -> Iterator[Frame]:
    """Split one blob into BLOB_CHUNK frames; always yields at least one."""
    total = max(1, (len(data) + CHUNK_SIZE - 1) // CHUNK_SIZE)
    for i in range(total):
        piece = data[i * CHUNK_SIZE:(i + 1) * CHUNK_SIZE]
        yield Frame(BLOB_CHUNK, {
            "request_id": request_id, "digest": digest, "role": role,
            "seq": i, "last": i == total - 1,
        }, piece)
