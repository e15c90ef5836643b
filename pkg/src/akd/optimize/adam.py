"""First-order updates with per-parameter moment estimates.

Named parameter groups each carry their own step size; moments live in
the optimizer so they can be checkpointed alongside the parameters.
"""

import numpy as np


class Adam:
    def __init__(self, step_sizes, beta1=0.9, beta2=0.999, eps=1e-8):
        """step_sizes: {group name: step size}."""
        if not step_sizes:
            raise ValueError("need at least one parameter group")
        for name, lr in step_sizes.items():
            if lr <= 0:
                raise ValueError(f"step size for {name!r} must be positive")
        self.step_sizes = dict(step_sizes)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.count = 0
        self.m = {}
        self.v = {}

    def update(self, params, grads):
        """One bias-corrected moment update, in place on the param arrays."""
        self.count += 1
        c1 = 1.0 - self.beta1**self.count
        c2 = 1.0 - self.beta2**self.count
        for name, grad in grads.items():
            if name not in self.step_sizes:
                raise KeyError(f"unknown parameter group {name!r}")
            p = params[name]
            g = np.asarray(grad, dtype=np.float64)
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.step_sizes[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        """Flat {key: array} view of the moment state, NPZ-friendly."""
        out = {"adam_count": np.int64(self.count)}
        for name in self.m:
            out[f"adam_m_{name}"] = self.m[name]
            out[f"adam_v_{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.count = int(arrays["adam_count"])
        self.m, self.v = {}, {}
        for key, val in arrays.items():
            if key.startswith("adam_m_"):
                self.m[key[len("adam_m_"):]] = np.asarray(val, dtype=np.float64).copy()
            elif key.startswith("adam_v_"):
                self.v[key[len("adam_v_"):]] = np.asarray(val, dtype=np.float64).copy()
