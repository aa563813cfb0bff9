"""Vector fields of the three benchmark systems.

States are batched: pendulum and RLC states are [B, 2]; reaction-diffusion
states are [B, 2, G, G] with channels (u, v). Parameter tensors are [B, k].
Every function accepts Tensors and is differentiable in ``y`` and in the
parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor


class System(str, Enum):
    PENDULUM = "pendulum"
    RLC = "rlc"
    DIFFUSION = "diffusion"


Box = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class SystemSpec:
    system: System
    grid: int = 32  # reaction-diffusion only
    d_e: int = 1
    d_a_true: int = 1
    expert_names: tuple[str, ...] = ()
    interaction_names: tuple[str, ...] = ()
    train_ze: Box = ()
    test_ze: Box = ()
    augmented_ze: Box = ()
    train_za: Box = ()
    horizon: tuple[float, float, float] = (0.0, 5.0, 20.0)
    dt_obs: float = 0.1
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100
    model_substeps: int = 2
    data_substeps: int = 4

    @property
    def state_shape(self) -> tuple[int, ...]:
        if self.system is System.DIFFUSION:
            return (2, self.grid, self.grid)
        return (2,)

    @property
    def state_size(self) -> int:
        return int(np.prod(self.state_shape))

    @property
    def n_obs_train(self) -> int:
        t0, t1, _ = self.horizon
        return int(round((t1 - t0) / self.dt_obs))

    @property
    def n_obs_total(self) -> int:
        t0, _, t2 = self.horizon
        return int(round((t2 - t0) / self.dt_obs))

    def validate(self) -> None:
        for box in (self.train_ze, self.test_ze, self.augmented_ze, self.train_za):
            for lo, hi in box:
                if not lo <= hi:
                    raise ValueError(f"empty support interval [{lo}, {hi}] in {self.system.value}")
        if len(self.train_ze) != self.d_e or len(self.augmented_ze) != self.d_e:
            raise ValueError("expert support dimension does not match d_e")
        t0, t1, t2 = self.horizon
        if not t0 < t1 < t2:
            raise ValueError("horizon must satisfy t0 < t1 < t2")


def pendulum_spec(**overrides) -> SystemSpec:
    kw = dict(
        system=System.PENDULUM, d_e=1, d_a_true=1,
        expert_names=("omega0",), interaction_names=("alpha",),
        train_ze=((1.5, 3.1),), test_ze=((0.5, 1.5),), augmented_ze=((0.5, 3.5),),
        train_za=((0.0, 0.6),), horizon=(0.0, 5.0, 20.0),
        n_train=1000, n_val=100, n_test=100, model_substeps=2,
    )
    kw.update(overrides)
    return SystemSpec(**kw)


def rlc_spec(**overrides) -> SystemSpec:
    kw = dict(
        system=System.RLC, d_e=2, d_a_true=1,
        expert_names=("L", "C"), interaction_names=("R",),
        train_ze=((1.0, 3.0), (0.5, 1.5)), test_ze=((3.0, 5.0), (1.0, 2.5)),
        augmented_ze=((1.0, 5.0), (0.5, 2.5)),
        train_za=((1.0, 3.0),), horizon=(0.0, 5.0, 20.0),
        n_train=2000, n_val=100, n_test=100, model_substeps=2,
    )
    kw.update(overrides)
    return SystemSpec(**kw)


def diffusion_spec(**overrides) -> SystemSpec:
    kw = dict(
        system=System.DIFFUSION, grid=32, d_e=2, d_a_true=1,
        expert_names=("a", "b"), interaction_names=("k",),
        train_ze=((0.001, 0.002), (0.003, 0.007)), test_ze=((0.002, 0.004), (0.001, 0.1)),
        augmented_ze=((0.001, 0.004), (0.001, 0.01)),
        train_za=((0.003, 0.005),), horizon=(0.0, 1.0, 5.0),
        n_train=2000, n_val=100, n_test=100, model_substeps=1,
    )
    kw.update(overrides)
    return SystemSpec(**kw)


SPECS = {System.PENDULUM: pendulum_spec, System.RLC: rlc_spec, System.DIFFUSION: diffusion_spec}


def get_spec(system, **overrides) -> SystemSpec:
    return SPECS[System(system)](**overrides)


# ----------------------------------------------------------------------


def source_voltage(t: float) -> float:
    """AC + DC source driving the RLC circuit."""
    return 2.5 * math.sin(4.0 * math.pi * t) + 1.0


def _col(z: Tensor, i: int) -> Tensor:
    return z[:, i]


def _expand(p: Tensor, like: Tensor) -> Tensor:
    # [B] -> [B, 1, ...] to broadcast against a grid channel [B, G, G]
    return p.reshape((p.shape[0],) + (1,) * (like.ndim - 1))


def laplacian(field) -> Tensor:
    """Zero-flux 5-point Laplacian (unit spacing) over the last two axes."""
    return T.laplacian(field)


def expert_field(spec: SystemSpec, t: float, y, z_e) -> Tensor:
    y, z_e = as_tensor(y), as_tensor(z_e)
    if spec.system is System.PENDULUM:
        theta, omega = y[:, 0], y[:, 1]
        w0 = _col(z_e, 0)
        return T.stack([omega, -(w0 * w0) * T.sin(theta)], axis=1)
    if spec.system is System.RLC:
        u, i = y[:, 0], y[:, 1]
        L, C = _col(z_e, 0), _col(z_e, 1)
        return T.stack([i / C, (source_voltage(t) - u) / L], axis=1)
    a, b = _col(z_e, 0), _col(z_e, 1)
    u, v = y[:, 0], y[:, 1]
    return T.stack([_expand(a, u) * T.laplacian(u), _expand(b, v) * T.laplacian(v)], axis=1)


def reaction_terms(u, v, k) -> tuple[Tensor, Tensor]:
    """FitzHugh-Nagumo local reactions (R_u, R_v); ``k`` broadcasts against ``u``."""
    u, v = as_tensor(u), as_tensor(v)
    return u - u * u * u - k - v, u - v


def true_interaction_field(spec: SystemSpec, t: float, y, z_a, z_e=None) -> Tensor:
    """Ground-truth residual. The RLC residual divides by C, so it also needs ``z_e``."""
    y, z_a = as_tensor(y), as_tensor(z_a)
    if spec.system is System.DIFFUSION:
        u, v = y[:, 0], y[:, 1]
        ru, rv = reaction_terms(u, v, _expand(_col(z_a, 0), u))
        return T.stack([ru, rv], axis=1)
    zero = Tensor(np.zeros(y.shape[0]))
    if spec.system is System.PENDULUM:
        return T.stack([zero, -_col(z_a, 0) * y[:, 1]], axis=1)
    if z_e is None:
        raise ValueError("the RLC interaction field depends on C; pass z_e")
    # -(R/C) I as printed for this benchmark, not the textbook -(R/L) I
    R, C = _col(z_a, 0), _col(as_tensor(z_e), 1)
    return T.stack([zero, -(R / C) * y[:, 1]], axis=1)


def full_field(spec: SystemSpec, t: float, y, z_e, z_a) -> Tensor:
    return expert_field(spec, t, y, z_e) + true_interaction_field(spec, t, y, z_a, z_e)


def pendulum_energy(y: np.ndarray, omega0) -> np.ndarray:
    theta, omega = y[..., 0], y[..., 1]
    return 0.5 * omega ** 2 - np.asarray(omega0) ** 2 * np.cos(theta)
