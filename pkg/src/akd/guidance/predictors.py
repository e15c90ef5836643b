"""Velocity predictors: the pluggable denoiser interface plus test mocks."""

import numpy as np

from .noise import draw_noise


class VelocityPredictor:
    """Interface for v-prediction backends.

    velocity() receives the noised clip z_t and must return a tensor of the
    same shape. eps and seed are forwarded so mocks can invert the forward
    noising exactly; a real backend ignores them and works from
    (z_t, t, prompt, cfg_scale) alone.
    """

    def velocity(self, z_t, t, *, eps=None, seed=0, prompt="", cfg_scale=1.0):
        raise NotImplementedError


class ZeroPredictor(VelocityPredictor):
    """Always predicts zero velocity."""

    def velocity(self, z_t, t, **_):
        return np.zeros_like(np.asarray(z_t, dtype=np.float64))


class OraclePredictor(VelocityPredictor):
    """Returns v* = sqrt(ab)*eps - sqrt(1-ab)*z with z recovered from z_t.

    Substituting v* makes the implied clean estimate equal z itself, so the
    distillation gradient vanishes identically; useful as a nullity check
    and as a regularizer-only baseline. When eps is not passed explicitly it
    is re-derived from the seed, matching the remote-provider convention.
    """

    def __init__(self, schedule):
        self.schedule = schedule

    def velocity(self, z_t, t, *, eps=None, seed=0, **_):
        z_t = np.asarray(z_t, dtype=np.float64)
        if eps is None:
            eps = draw_noise(z_t.shape, seed)
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != z_t.shape:
            raise ValueError("eps shape does not match clip")
        ab = float(self.schedule.alpha_bar(t))
        s = np.sqrt(ab)
        c = np.sqrt(1.0 - ab)
        z = (z_t - c * eps) / s
        return s * eps - c * z


class AttractorPredictor(VelocityPredictor):
    """Predictor whose implied clean estimate is a fixed target clip.

    The resulting gradient is w(t)*(z - target): a constant pull of the
    rendered video toward the target, which makes closed-loop distillation
    testable without any diffusion model behind it.
    """

    def __init__(self, target, schedule):
        self.target = np.asarray(target, dtype=np.float64)
        self.schedule = schedule

    def velocity(self, z_t, t, **_):
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != self.target.shape:
            raise ValueError("target clip shape does not match request")
        ab = float(self.schedule.alpha_bar(t))
        s = np.sqrt(ab)
        c = np.sqrt(1.0 - ab)
        return (s * z_t - self.target) / c
