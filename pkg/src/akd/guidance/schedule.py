"""Diffusion-time schedule for the distillation gradient."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CosineSchedule:
    """Squared-cosine signal level, hard-clamped at both ends.

    alpha_bar(t) = clip(cos^2(pi t / 2), floor, ceil). The clamp keeps
    sqrt(alpha_bar) and sqrt(1 - alpha_bar) bounded away from zero so the
    velocity algebra stays invertible at the extremes of t. weight(t) is
    flat; the gradient assembly folds every prefactor into this one knob.

    Remote providers reconstruct alpha_bar from t on their side, so the
    default parameters here double as a wire-level convention.
    """

    floor: float = 1e-4
    ceil: float = 1.0 - 1e-4

    def __post_init__(self):
        if not 0.0 < self.floor < self.ceil < 1.0:
            raise ValueError("need 0 < floor < ceil < 1")

    def alpha_bar(self, t):
        a = np.cos(0.5 * np.pi * np.asarray(t, dtype=np.float64)) ** 2
        return np.clip(a, self.floor, self.ceil)

    def weight(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))[()]
