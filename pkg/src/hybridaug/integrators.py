"""Fixed-step RK4 rollouts, differentiable by unrolling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

Field = Callable[[float, Tensor], Tensor]


class DivergenceError(FloatingPointError):
    """A rollout produced a non-finite state."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at observation step {step}")


@dataclass
class Trajectory:
    """Initial state ``x`` [B, *S] and observed states ``ys`` [B, n_obs, *S]."""

    x: Tensor
    ys: Tensor
    dt_obs: float
    substeps: int = 1

    @property
    def n_obs(self) -> int:
        return self.ys.shape[1]

    def full(self) -> Tensor:
        """States including the initial one, [B, n_obs + 1, *S]."""
        return T.concat([self.x.reshape((self.x.shape[0], 1) + self.x.shape[1:]), self.ys], axis=1)


def rk4_step(field: Field, t: float, y: Tensor, h: float) -> Tensor:
    k1 = field(t, y)
    k2 = field(t + 0.5 * h, y + (0.5 * h) * k1)
    k3 = field(t + 0.5 * h, y + (0.5 * h) * k2)
    k4 = field(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_rollout(field: Field, y0, t0: float, n_obs: int, dt_obs: float,
                substeps: int = 1, check_finite: bool = True) -> Trajectory:
    if n_obs < 1 or substeps < 1 or dt_obs <= 0:
        raise ValueError(f"rk4_rollout needs n_obs >= 1, substeps >= 1, dt_obs > 0 "
                         f"(got {n_obs}, {substeps}, {dt_obs})")
    y0 = as_tensor(y0)
    h = dt_obs / substeps
    y = y0
    states = []
    for n in range(n_obs):
        base = t0 + n * dt_obs
        for s in range(substeps):
            y = rk4_step(field, base + s * h, y, h)
        if check_finite and not np.all(np.isfinite(y.data)):
            raise DivergenceError(n + 1)
        states.append(y)
    return Trajectory(x=y0, ys=T.stack(states, axis=1), dt_obs=dt_obs, substeps=substeps)
