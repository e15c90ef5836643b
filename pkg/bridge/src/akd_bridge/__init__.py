"""Out-of-process guidance provider speaking the AKDGRAD1 framing.

Ships deterministic stub predictors (echo, oracle, zero) behind a small
socket or stdio server, so a distillation client can be pointed at a
separate process without linking against a model runtime. A real
v-prediction video model slots in by implementing the same one-method
predictor protocol.
"""

from .protocol import (
    MAGIC,
    MAX_HEADER_BYTES,
    MAX_PAYLOAD_ELEMENTS,
    FrameError,
    read_frame,
    write_frame,
)
from .server import BridgeConfig, handle_request, serve_stdio, serve_stream, serve_tcp
from .stubs import (
    ALPHA_CEIL,
    ALPHA_FLOOR,
    PREDICTORS,
    EchoPredictor,
    OraclePredictor,
    ZeroPredictor,
    alpha_bar,
    draw_noise,
    make_predictor,
    pool2,
    pool2_adjoint,
)

__version__ = "0.1.0"

__all__ = [
    "ALPHA_CEIL",
    "ALPHA_FLOOR",
    "BridgeConfig",
    "EchoPredictor",
    "FrameError",
    "MAGIC",
    "MAX_HEADER_BYTES",
    "MAX_PAYLOAD_ELEMENTS",
    "OraclePredictor",
    "PREDICTORS",
    "ZeroPredictor",
    "alpha_bar",
    "draw_noise",
    "handle_request",
    "make_predictor",
    "pool2",
    "pool2_adjoint",
    "read_frame",
    "serve_stdio",
    "serve_stream",
    "serve_tcp",
    "write_frame",
]
