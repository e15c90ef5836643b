"""Request handling and the serve loops, TCP and stdio.

Each connection is served by one worker, one request at a time; the only
state shared between workers is the read-only predictor. ``velocity``
requests return the stub's v(z_t) at the payload shape and leave the
gradient assembly to the client. ``sds_grad`` requests assemble
w(t) * (z - z_hat) server side, optionally in a 2x2-pooled latent space
whose gradient is mapped back to pixels through the exact pooling adjoint.
"""

import socketserver
import sys
from dataclasses import dataclass

import numpy as np

from .protocol import FrameError, read_frame, write_frame
from .stubs import (
    ALPHA_CEIL,
    ALPHA_FLOOR,
    PREDICTORS,
    alpha_bar,
    draw_noise,
    make_predictor,
    pool2,
    pool2_adjoint,
)


@dataclass(frozen=True)
class BridgeConfig:
    """One predictor, one transport, one schedule."""

    predictor: str = "oracle"
    host: str = "127.0.0.1"
    port: int = 0
    stdio: bool = False
    latent: bool = False
    alpha_floor: float = ALPHA_FLOOR
    alpha_ceil: float = ALPHA_CEIL

    def __post_init__(self):
        if self.predictor not in PREDICTORS:
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if not 0.0 < self.alpha_floor < self.alpha_ceil < 1.0:
            raise ValueError("need 0 < alpha_floor < alpha_ceil < 1")


def _error(message):
    return {"shape": [0], "status": "error", "message": message}, None


def _ok(arr):
    out = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(out.shape), "status": "ok", "message": ""}, out


def handle_request(header, payload, config, predictor):
    """Answer one decoded request; returns (response header, payload or None)."""
    mode = header.get("mode", "velocity")
    if mode not in ("velocity", "sds_grad"):
        return _error(f"unknown mode {mode!r}")
    try:
        t = float(header["t"])
        seed = int(header["seed"])
    except (KeyError, TypeError, ValueError):
        return _error("header needs a numeric t and an integer seed")
    if not np.isfinite(t) or seed < 0:
        return _error("t must be finite and seed non-negative")
    if not np.isfinite(payload).all():
        return _error("payload has non-finite values")

    ab = alpha_bar(t, config.alpha_floor, config.alpha_ceil)
    s = np.sqrt(ab)
    c = np.sqrt(1.0 - ab)

    if mode == "velocity":
        # z stays the raw float32 payload so identity stubs echo it bit for bit
        z64 = np.asarray(payload, dtype=np.float64)
        z_t = s * z64 + c * np.asarray(draw_noise(payload.shape, seed), np.float64)
        v = predictor.velocity(payload, z_t, t, seed)
        if np.shape(v) != payload.shape:
            return _error(f"stub returned shape {np.shape(v)}, expected {payload.shape}")
        return _ok(v)

    z64 = np.asarray(payload, dtype=np.float64)
    if config.latent:
        if z64.ndim != 4 or z64.shape[1] % 2 or z64.shape[2] % 2:
            return _error("latent mode needs an (F,H,W,C) payload with even H and W")
        lat = pool2(z64)
        eps = np.asarray(draw_noise(lat.shape, seed), np.float64)
        lat_t = s * lat + c * eps
        v = np.asarray(predictor.velocity(lat, lat_t, t, seed), np.float64)
        if v.shape != lat.shape:
            return _error(f"stub returned shape {v.shape}, expected {lat.shape}")
        grad = pool2_adjoint(lat - (s * lat_t - c * v))
    else:
        eps = np.asarray(draw_noise(z64.shape, seed), np.float64)
        z_t = s * z64 + c * eps
        v = np.asarray(predictor.velocity(payload, z_t, t, seed), np.float64)
        if v.shape != z64.shape:
            return _error(f"stub returned shape {v.shape}, expected {z64.shape}")
        grad = z64 - (s * z_t - c * v)
    return _ok(grad)  # flat w(t) = 1


def serve_stream(rfile, wfile, config, predictor):
    """Answer frames on one stream until the peer closes it."""
    while True:
        try:
            frame = read_frame(rfile)
        except FrameError as exc:
            try:
                write_frame(wfile, {"shape": [0], "status": "error", "message": str(exc)})
            except (OSError, ValueError):
                return
            if exc.keep:
                continue
            return
        if frame is None:
            return
        header, payload = frame
        resp, out = handle_request(header, payload, config, predictor)
        try:
            write_frame(wfile, resp, out)
        except (OSError, ValueError):
            return


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        serve_stream(self.rfile, self.wfile, self.server.config, self.server.predictor)


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(config, announce=None):
    """Bind, announce ``LISTENING <port>``, and serve until interrupted.

    Port 0 binds an ephemeral port; the announcement carries the real one.
    """
    server = _Server((config.host, config.port), _Handler)
    server.config = config
    server.predictor = make_predictor(config.predictor, config.alpha_floor, config.alpha_ceil)
    if announce is not None:
        announce(f"LISTENING {server.server_address[1]}")
    try:
        server.serve_forever()
    finally:
        server.server_close()


def serve_stdio(config):
    """Serve a single session over this process's stdin/stdout."""
    predictor = make_predictor(config.predictor, config.alpha_floor, config.alpha_ceil)
    serve_stream(sys.stdin.buffer, sys.stdout.buffer, config, predictor)
