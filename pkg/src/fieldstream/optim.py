"""Adam over named parameter groups stored as numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Union

import numpy as np

from .kernels import adam_update


@dataclass(frozen=True)
class TrainStats:
    photometric_loss: float
    depth_loss: float
    step_time: float


class TrainStepError(RuntimeError):
    """Raised when a training step produces a non-finite loss; the step is
    rejected and parameters are left unchanged."""


class Adam:
    """Classic Adam (bias-corrected) with a per-group step size.

    Parameters are updated in place; the caller owns the arrays.
    """

    def __init__(
        self,
        params: Dict[str, np.ndarray],
        lr: Union[float, Dict[str, float]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        if isinstance(lr, dict):
            missing = set(params) - set(lr)
            if missing:
                raise ValueError(f"missing step sizes for {sorted(missing)}")
            self.lr = dict(lr)
        else:
            self.lr = {k: float(lr) for k in params}
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            adam_update(
                self.params[k].reshape(-1),
                np.ascontiguousarray(g).reshape(-1),
                self.m[k].reshape(-1),
                self.v[k].reshape(-1),
                self.lr[k],
                self.beta1,
                self.beta2,
                self.eps,
                c1,
                c2,
            )

    def keep_rows(self, keep: np.ndarray) -> None:
        """Drop optimizer state rows (axis 0) for pruned parameters."""
        for k in list(self.m):
            self.m[k] = self.m[k][keep]
            self.v[k] = self.v[k][keep]
