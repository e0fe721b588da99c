"""Adam over the named parameter groups of a GaussianCloud."""

import logging
from typing import Optional

import numpy as np

from .scene.models import PARAM_FIELDS

logger = logging.getLogger(__name__)


class Adam:
    """Adam with one learning rate per parameter group.

    Moment buffers follow the cloud through refinement: prune() drops rows,
    extend() appends zero-initialized rows for new Gaussians.
    """

    def __init__(
        self,
        learning_rates: dict[str, float],
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rates = dict(learning_rates)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update params in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t

        for name, param in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in self.m:
                self.m[name] = np.zeros(param.shape)
                self.v[name] = np.zeros(param.shape)

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)

            lr = self.learning_rates.get(name, 0.0)
            if lr == 0.0:
                continue
            denom = np.sqrt(self.v[name] / bc2) + self.epsilon
            update = (lr / bc1) * self.m[name] / denom
            param -= update.astype(param.dtype)

    def prune(self, keep: np.ndarray) -> None:
        """Keep moment rows where keep is True."""
        for name in list(self.m):
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def extend(self, count: int) -> None:
        """Append zeroed moment rows for count new Gaussians."""
        for name in list(self.m):
            pad = np.zeros((count,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad.copy()])

    def state_summary(self) -> dict[str, Optional[float]]:
        """Mean |m| per group, for debug logging."""
        return {name: (float(np.mean(np.abs(self.m[name]))) if name in self.m else None) for name in PARAM_FIELDS}
