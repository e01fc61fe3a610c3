"""Fused single-pass Adam update (numba)."""

import math

from numba import njit


@njit(cache=True)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place Adam step over flat views; c1/c2 are the bias corrections."""
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)
