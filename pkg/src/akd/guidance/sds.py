"""Score-distillation gradient assembly for v-prediction backends.

The sampled gradient for one noise draw is w(t) * (z - z_hat) where

    z_t   = sqrt(ab) * z + sqrt(1 - ab) * eps
    z_hat = sqrt(ab) * z_t - sqrt(1 - ab) * v(z_t; t)

and ab = alpha_bar(t). The Jacobian of v w.r.t. z is dropped on purpose;
with the default flat w(t) the estimator reduces to E[z - z_hat].
"""

import numpy as np


def _as_f64(name, arr, shape=None):
    out = np.asarray(arr, dtype=np.float64)
    if shape is not None and out.shape != shape:
        raise ValueError(f"{name} shape {out.shape} does not match clip shape {shape}")
    if not np.isfinite(out).all():
        raise ValueError(f"{name} contains non-finite values")
    return out


def sds_from_velocity(z, eps, v, t, schedule):
    """Assemble the gradient from an already-computed velocity prediction.

    Shared by the in-process path and the remote "velocity" mode so both
    produce identical results for equal inputs. Returns float32.
    """
    z64 = _as_f64("clip", z)
    eps64 = _as_f64("eps", eps, z64.shape)
    v64 = _as_f64("velocity prediction", v, z64.shape)
    ab = float(schedule.alpha_bar(t))
    s = np.sqrt(ab)
    c = np.sqrt(1.0 - ab)
    z_t = s * z64 + c * eps64
    z_hat = s * z_t - c * v64
    grad = float(schedule.weight(t)) * (z64 - z_hat)
    return grad.astype(np.float32)


def sds_gradient(z, t, eps, predictor, schedule, *, seed=0, prompt="", cfg_scale=100.0):
    """Single-sample distillation gradient, w(t) * (z - z_hat).

    z: clip tensor (any shape, typically (F,H,W,3)); eps: a noise tensor of
    the same shape; predictor: VelocityPredictor. cfg_scale and prompt are
    forwarded opaquely. Raises ValueError on predictor shape mismatch or
    non-finite predictor output.
    """
    z64 = _as_f64("clip", z)
    eps64 = _as_f64("eps", eps, z64.shape)
    ab = float(schedule.alpha_bar(t))
    s = np.sqrt(ab)
    c = np.sqrt(1.0 - ab)
    z_t = s * z64 + c * eps64
    v = predictor.velocity(z_t, t, eps=eps64, seed=seed, prompt=prompt, cfg_scale=cfg_scale)
    return sds_from_velocity(z64, eps64, v, t, schedule)
