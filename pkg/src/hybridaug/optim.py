from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class FrozenParameterError(RuntimeError):
    """A gradient reached a parameter that is declared frozen."""


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, weight_decay=0.0) -> "AdamState":
        return cls(lr=lr, weight_decay=weight_decay,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam with decoupled weight decay.

    Parameters get fresh arrays rather than in-place updates, so snapshots of
    ``p.data`` taken before the step stay valid.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("adam_step: params, grads and state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ValueError(f"adam_step: shape mismatch for parameter {i}: "
                             f"param {p.data.shape}, grad {g.shape}, moment {state.m[i].shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        new = p.data - state.lr * update
        if state.weight_decay:
            new = new - state.lr * state.weight_decay * p.data
        p.data = new
    return state
