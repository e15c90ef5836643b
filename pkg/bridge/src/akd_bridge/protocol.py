"""Binary framing for the guidance socket protocol.

One message, either direction: the 8-byte ASCII magic ``AKDGRAD1``, a
little-endian u32 JSON header length, the UTF-8 JSON header, then
product(shape) little-endian float32 payload values in C order. The header
carries the payload shape; an error response declares shape [0] and ships
no payload. The size limits mirror the client side so both ends refuse the
same frames.
"""

import json
import struct

import numpy as np

MAGIC = b"AKDGRAD1"
MAX_HEADER_BYTES = 1 << 20
MAX_PAYLOAD_ELEMENTS = 1 << 28


class FrameError(RuntimeError):
    """Malformed or truncated frame.

    ``keep`` marks errors that leave the stream aligned on a frame
    boundary, so the connection can keep serving after an error response.
    """

    def __init__(self, message, keep=False):
        super().__init__(message)
        self.keep = keep


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        part = stream.read(n - len(buf))
        if not part:
            raise FrameError(f"stream closed mid-frame ({len(buf)}/{n} bytes)")
        buf += part
    return buf


def read_frame(stream):
    """Read one framed message; returns (header, payload) or None on EOF.

    None is returned only for a clean close before the first byte of a
    frame. Anything else that goes wrong raises FrameError; errors that
    consumed a known number of bytes set keep=True.
    """
    first = stream.read(1)
    if first == b"":
        return None
    magic = first + _read_exact(stream, len(MAGIC) - 1)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}", keep=True)
    (hlen,) = struct.unpack("<I", _read_exact(stream, 4))
    if hlen > MAX_HEADER_BYTES:
        raise FrameError(f"oversized header ({hlen} bytes)")
    raw = _read_exact(stream, hlen)
    try:
        header = json.loads(raw.decode("utf-8"))
    except ValueError as exc:
        raise FrameError(f"undecodable header: {exc}", keep=True) from exc
    shape = header.get("shape") if isinstance(header, dict) else None
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FrameError(f"header shape invalid: {shape!r}")
    count = 1
    for s in shape:
        count *= s
    if count > MAX_PAYLOAD_ELEMENTS:
        raise FrameError(f"payload too large ({count} elements)")
    if count == 0:
        return header, np.empty(shape, dtype=np.float32)
    payload = np.frombuffer(_read_exact(stream, 4 * count), dtype="<f4").reshape(shape)
    return header, payload


def write_frame(stream, header, payload=None):
    """Frame and send one message; payload is a float32 array or None."""
    data = json.dumps(header, separators=(",", ":")).encode("utf-8")
    stream.write(MAGIC)
    stream.write(struct.pack("<I", len(data)))
    stream.write(data)
    if payload is not None:
        arr = np.ascontiguousarray(payload, dtype="<f4")
        if arr.size:
            stream.write(arr.tobytes())
    stream.flush()
