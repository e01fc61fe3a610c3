"""Vectorized numpy Adam update (fallback)."""

import numpy as np


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
