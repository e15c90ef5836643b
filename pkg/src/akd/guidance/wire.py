"""Socket framing for out-of-process guidance providers.

Message layout, both directions: 8-byte ASCII magic ``AKDGRAD1``, a
little-endian u32 JSON header length, the UTF-8 JSON header, then
product(shape) little-endian float32 payload values in C order.

Request header: {"shape": [F,H,W,3], "t": float, "seed": u64,
"cfg_scale": float, "prompt": str, "mode": "velocity"|"sds_grad"}; the
request payload is the clean clip z. The remote side reconstructs eps from
the seed (noise.draw_noise) and alpha_bar from the shared default schedule,
so both processes agree on z_t bit for bit. Response header:
{"shape": [...], "status": "ok"|"error", "message": str}; an error
response carries shape [0] and no payload.
"""

import json
import struct

import numpy as np

MAGIC = b"AKDGRAD1"
MAX_HEADER_BYTES = 1 << 20
MAX_PAYLOAD_ELEMENTS = 1 << 28


class WireError(RuntimeError):
    """Malformed or truncated message on the stream."""


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        part = stream.read(n - len(buf))
        if not part:
            raise WireError(f"stream closed mid-message ({len(buf)}/{n} bytes)")
        buf += part
    return buf


def write_message(stream, header, payload=None):
    """Frame and send one message. payload: float32 array or None."""
    data = json.dumps(header, separators=(",", ":")).encode("utf-8")
    stream.write(MAGIC)
    stream.write(struct.pack("<I", len(data)))
    stream.write(data)
    if payload is not None:
        arr = np.ascontiguousarray(payload, dtype="<f4")
        if arr.size:
            stream.write(arr.tobytes())
    stream.flush()


def read_message(stream):
    """Read one framed message; returns (header dict, float32 payload)."""
    magic = _read_exact(stream, len(MAGIC))
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    (hlen,) = struct.unpack("<I", _read_exact(stream, 4))
    if hlen > MAX_HEADER_BYTES:
        raise WireError(f"oversized header ({hlen} bytes)")
    try:
        header = json.loads(_read_exact(stream, hlen).decode("utf-8"))
    except ValueError as exc:
        raise WireError(f"undecodable header: {exc}") from exc
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise WireError(f"header shape invalid: {shape!r}")
    count = 1
    for s in shape:
        count *= s
    if count > MAX_PAYLOAD_ELEMENTS:
        raise WireError(f"payload too large ({count} elements)")
    if count == 0:
        return header, np.empty(shape, dtype=np.float32)
    raw = _read_exact(stream, 4 * count)
    payload = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return header, payload
