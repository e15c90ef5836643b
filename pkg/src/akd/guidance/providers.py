"""Gradient providers: local (in-process predictor) and remote (socket)."""

import socket

import numpy as np

from .noise import draw_noise
from .schedule import CosineSchedule
from .sds import sds_from_velocity, sds_gradient
from .wire import WireError, read_message, write_message


class ProviderError(RuntimeError):
    """The provider failed for this request; the call may be retried."""


class GradientProvider:
    """Produces the pixel-space distillation gradient for a rendered clip."""

    def gradient(self, z, t, *, seed, prompt="", cfg_scale=100.0):
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalProvider(GradientProvider):
    """In-process provider wrapping a velocity predictor."""

    def __init__(self, predictor, schedule=None):
        self.predictor = predictor
        self.schedule = schedule if schedule is not None else CosineSchedule()

    def gradient(self, z, t, *, seed, prompt="", cfg_scale=100.0):
        eps = draw_noise(np.shape(z), seed)
        return sds_gradient(
            z, t, eps, self.predictor, self.schedule,
            seed=seed, prompt=prompt, cfg_scale=cfg_scale,
        )


class RemoteProvider(GradientProvider):
    """Provider backed by a socket server speaking the wire framing.

    mode "velocity": the server returns v(z_t) and the gradient is
    assembled locally; mode "sds_grad": the server returns the finished
    gradient (it may work in latent space internally). One request at a
    time per connection; the socket is opened lazily and dropped on any
    transport error so a retry reconnects cleanly.
    """

    def __init__(self, host, port, mode="velocity", schedule=None, timeout=60.0):
        if mode not in ("velocity", "sds_grad"):
            raise ValueError(f"unknown provider mode {mode!r}")
        self.host = host
        self.port = int(port)
        self.mode = mode
        self.schedule = schedule if schedule is not None else CosineSchedule()
        self.timeout = timeout
        self._sock = None
        self._file = None

    def _stream(self):
        if self._file is None:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            self._file = self._sock.makefile("rwb")
        return self._file

    def close(self):
        for handle in (self._file, self._sock):
            if handle is not None:
                try:
                    handle.close()
                except OSError:
                    pass
        self._file = None
        self._sock = None

    def gradient(self, z, t, *, seed, prompt="", cfg_scale=100.0):
        z32 = np.ascontiguousarray(z, dtype=np.float32)
        header = {
            "shape": list(z32.shape),
            "t": float(t),
            "seed": int(seed),
            "cfg_scale": float(cfg_scale),
            "prompt": str(prompt),
            "mode": self.mode,
        }
        try:
            stream = self._stream()
            write_message(stream, header, z32)
            resp, payload = read_message(stream)
        except (OSError, WireError) as exc:
            self.close()
            raise ProviderError(f"transport failure: {exc}") from exc
        if resp.get("status") != "ok":
            raise ProviderError(f"remote error: {resp.get('message', 'unspecified')}")
        if payload.shape != z32.shape:
            raise ProviderError(f"response shape {payload.shape} does not match request {z32.shape}")
        if not np.isfinite(payload).all():
            raise ProviderError("non-finite response payload")
        if self.mode == "sds_grad":
            return payload
        eps = draw_noise(z32.shape, seed)
        return sds_from_velocity(z32, eps, payload, t, self.schedule)
