"""Pure numpy versions of the stencil kernels (fallback for ``_kernels``)."""

import numpy as np


def apply_stencil(ups, u, K):
    """``sum_k ups[k] * (u star K[k])`` with zero padding; ``ups`` is (6, m, m)."""
    m0, m1 = u.shape
    up = np.zeros((m0 + 2, m1 + 2))
    up[1:-1, 1:-1] = u
    out = np.zeros((m0, m1))
    for k in range(K.shape[0]):
        acc = np.zeros((m0, m1))
        for dx in range(3):
            for dy in range(3):
                w = K[k, dx, dy]
                if w != 0.0:
                    acc += w * up[dx : dx + m0, dy : dy + m1]
        out += ups[k] * acc
    return out


def richardson(u, f, ups, K, omega, steps):
    u = np.array(u, dtype=float, copy=True)
    for _ in range(steps):
        u += omega * (f - apply_stencil(ups, u, K))
    return u
