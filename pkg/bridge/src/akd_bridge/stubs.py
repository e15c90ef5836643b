"""Deterministic velocity stubs plus the shared noise and schedule recipes.

The client regenerates epsilon from the request seed and evaluates the same
squared-cosine signal level on its side, so the recipes here are wire
contract rather than implementation choice: epsilon comes from a PCG64
stream seeded directly with the u64 seed (standard normal, float32, C
order), and alpha_bar(t) = clip(cos^2(pi t / 2), floor, ceil) with a flat
loss weight. Every stub is a pure function of its request, so identical
requests produce identical responses.
"""

import numpy as np

ALPHA_FLOOR = 1e-4
ALPHA_CEIL = 1.0 - 1e-4

PREDICTORS = ("echo", "oracle", "zero")


def draw_noise(shape, seed):
    gen = np.random.Generator(np.random.PCG64(int(seed)))
    return gen.standard_normal(size=tuple(shape), dtype=np.float32)


def alpha_bar(t, floor=ALPHA_FLOOR, ceil=ALPHA_CEIL):
    """Squared-cosine signal level, clamped away from 0 and 1."""
    a = np.cos(0.5 * np.pi * float(t)) ** 2
    return float(np.clip(a, floor, ceil))


def pool2(x):
    """2x2 average pooling over the middle axes of an (F,H,W,C) tensor."""
    f, h, w, c = x.shape
    return x.reshape(f, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def pool2_adjoint(g):
    """Exact transpose of pool2: each cell spreads over its 2x2 block / 4."""
    f, h, w, c = g.shape
    out = np.empty((f, 2 * h, 2 * w, c), dtype=np.float64)
    view = out.reshape(f, h, 2, w, 2, c)
    view[:] = np.asarray(g, dtype=np.float64)[:, :, None, :, None, :] / 4.0
    return out


class EchoPredictor:
    """Identity on the clean request payload; the loopback conformance stub."""

    def velocity(self, z, z_t, t, seed):
        return z


class ZeroPredictor:
    """Always predicts zero velocity."""

    def velocity(self, z, z_t, t, seed):
        return np.zeros(np.shape(z_t))


class OraclePredictor:
    """v = sqrt(ab)*eps - sqrt(1-ab)*z, with z recovered from z_t and the seed.

    Substituted into the gradient assembly, the implied clean estimate is
    the clean clip itself, so distilling against this stub is a null
    operation. The recovery keeps the stub a function of (z_t, t, seed)
    alone; it never peeks at the request payload.
    """

    def __init__(self, floor=ALPHA_FLOOR, ceil=ALPHA_CEIL):
        self.floor = float(floor)
        self.ceil = float(ceil)

    def velocity(self, z, z_t, t, seed):
        z_t = np.asarray(z_t, dtype=np.float64)
        eps = np.asarray(draw_noise(z_t.shape, seed), dtype=np.float64)
        ab = alpha_bar(t, self.floor, self.ceil)
        s = np.sqrt(ab)
        c = np.sqrt(1.0 - ab)
        clean = (z_t - c * eps) / s
        return s * eps - c * clean


def make_predictor(name, floor=ALPHA_FLOOR, ceil=ALPHA_CEIL):
    if name == "oracle":
        return OraclePredictor(floor=floor, ceil=ceil)
    if name == "echo":
        return EchoPredictor()
    if name == "zero":
        return ZeroPredictor()
    raise ValueError(f"unknown predictor {name!r}")
