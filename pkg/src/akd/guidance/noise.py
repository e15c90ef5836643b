"""Seeded noise draws shared with out-of-process guidance providers.

This is a wire-level constant, not an implementation detail: a remote
provider reconstructs epsilon from the integer seed in the request header,
so both processes must produce the exact same tensor. Pinned recipe: a
PCG64 stream seeded directly with the u64 seed, standard normal samples,
float32, C order. Do not change without versioning the protocol magic.
"""

import numpy as np


def draw_noise(shape, seed):
    gen = np.random.Generator(np.random.PCG64(int(seed)))
    return gen.standard_normal(size=tuple(shape), dtype=np.float32)
