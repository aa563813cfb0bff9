"""Pieces shared by the APHYNITY and HVAE model flavors."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from . import tensor as T
from .dynamics import System, SystemSpec
from .integrators import DivergenceError, Trajectory, rk4_rollout
from .neural import ConvStack, GridEncoder, Mlp, Module, SeqEncoder
from .optim import AdamState, FrozenParameterError, adam_step
from .rng import Rng
from .tensor import Tensor, Tape, as_tensor


class ObservationEncoder(Module):
    """Sequence of states -> feature vector (GRU for vectors, CNN for grids)."""

    def __init__(self, spec: SystemSpec, n_steps: int, rng: Rng, hidden: int = 128,
                 grid_channels=(16, 32, 64, 64)):
        self.grid = spec.system is System.DIFFUSION
        if self.grid:
            self.net = GridEncoder(2 * n_steps, spec.grid, rng, grid_channels)
            self.out_dim = self.net.out_dim
        else:
            self.net = SeqEncoder(spec.state_size, hidden, rng)
            self.out_dim = hidden

    def __call__(self, seq: Tensor) -> Tensor:
        """``seq`` is [B, L, *S] including the initial state."""
        if self.grid:
            B, L = seq.shape[:2]
            return self.net(seq.reshape((B, L * 2) + seq.shape[3:]))
        return self.net(seq.reshape(seq.shape[:2] + (-1,)))


class ResidualField(Module):
    """Learned additive field F_a(y, z_a): an MLP on vector states, a conv stack on grids."""

    def __init__(self, spec: SystemSpec, d_a: int, rng: Rng, width: int = 50, depth: int = 3,
                 activation: str = "relu", grid_width: int = 16, zero_last: bool = False):
        self.grid = spec.system is System.DIFFUSION
        if self.grid:
            self.net = ConvStack([2 + d_a] + [grid_width] * (depth - 1) + [2], rng, zero_last)
        else:
            s = spec.state_size
            self.net = Mlp([s + d_a] + [width] * depth + [s], rng, activation, zero_last)

    def __call__(self, y: Tensor, z_a: Tensor) -> Tensor:
        """``y`` is [B, *S] or [B, L, *S]; ``z_a`` is [B, d_a]."""
        y, z_a = as_tensor(y), as_tensor(z_a)
        if self.grid:
            lead = y.shape[:-3]
            flat = y.reshape((-1,) + y.shape[-3:])
            n = flat.shape[0]
            B = z_a.shape[0]
            za = z_a if n == B else _repeat_rows(z_a, n // B)
            za_map = T.broadcast_to(za.reshape(za.shape + (1, 1)),
                                    (n, za.shape[1]) + y.shape[-2:])
            out = self.net(T.concat([flat, za_map], axis=1))
            return out.reshape(lead + out.shape[1:])
        za = z_a
        if y.ndim == 3:
            za = T.broadcast_to(z_a.reshape((z_a.shape[0], 1, z_a.shape[1])),
                                y.shape[:2] + (z_a.shape[1],))
        return self.net(T.concat([y, za], axis=-1))


def _repeat_rows(z: Tensor, k: int) -> Tensor:
    # [B, d] -> [B * k, d] with each row repeated k times in place
    B, d = z.shape
    return T.broadcast_to(z.reshape((B, 1, d)), (B, k, d)).reshape((B * k, d))


def observation_sequence(x_o, y_o) -> Tensor:
    """Stack the initial state in front of the observations: [B, T + 1, *S]."""
    x_o, y_o = as_tensor(x_o), as_tensor(y_o)
    return T.concat([x_o.reshape((x_o.shape[0], 1) + x_o.shape[1:]), y_o], axis=1)


def hybrid_rollout(spec: SystemSpec, residual: ResidualField | None, x, z_e, z_a,
                   n_obs: int, t0: float = 0.0, substeps: int | None = None,
                   check_finite: bool = True) -> Trajectory:
    z_e = as_tensor(z_e)

    def field(t, y):
        f = dynamics.expert_field(spec, t, y, z_e)
        if residual is not None:
            f = f + residual(y, z_a)
        return f

    return rk4_rollout(field, x, t0, n_obs, spec.dt_obs,
                       substeps if substeps is not None else spec.model_substeps,
                       check_finite=check_finite)


def expert_rollout(spec: SystemSpec, x, z_e, n_obs: int, t0: float = 0.0,
                   substeps: int | None = None) -> Trajectory:
    return hybrid_rollout(spec, None, x, z_e, None, n_obs, t0, substeps)


def mse(a, b) -> Tensor:
    d = as_tensor(a) - as_tensor(b)
    return (d * d).mean()


class HybridModel(Module):
    """Encoder (psi) / decoder (theta) split shared by both flavors."""

    flavor = "base"
    spec: SystemSpec
    n_obs: int

    def encoder_modules(self) -> list[Module]:
        raise NotImplementedError

    def decoder_modules(self) -> list[Module]:
        raise NotImplementedError

    def encoder_parameters(self) -> list[Tensor]:
        return [p for m in self.encoder_modules() for p in m.parameters()]

    def decoder_parameters(self) -> list[Tensor]:
        return [p for m in self.decoder_modules() for p in m.parameters()]

    def freeze_decoder(self) -> None:
        for p in self.decoder_parameters():
            p.requires_grad = False

    def unfreeze_decoder(self) -> None:
        for p in self.decoder_parameters():
            p.requires_grad = True

    def decoder_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.decoder_parameters())

    def decoder_hash(self) -> str:
        h = hashlib.sha256()
        for m in self.decoder_modules():
            for name, p in m.named_parameters():
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def check_observation_length(self, y_o) -> None:
        n = as_tensor(y_o).shape[1]
        if n != self.n_obs:
            raise ValueError(f"observation length {n} does not match the training length {self.n_obs}")


# ----------------------------------------------------------------------
# training loop plumbing


@dataclass
class LossRecord:
    epochs: list[dict] = field(default_factory=list)

    def add(self, **values) -> None:
        self.epochs.append({k: float(v) for k, v in values.items()})

    def column(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]


@dataclass
class TrainState:
    """Everything needed to continue a training run after ``epoch`` epochs."""

    adam: AdamState
    epoch: int = 0
    step: int = 0
    record: LossRecord = field(default_factory=LossRecord)
    extra: dict = field(default_factory=dict)


def minibatches(n: int, batch: int, rng: Rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def optimizer_step(loss: Tensor, tape: Tape, params: list[Tensor], state: AdamState,
                   frozen: list[Tensor] = (), step: int = 0) -> None:
    if not np.isfinite(loss.data).all():
        raise DivergenceError(step, f"non-finite loss at optimizer step {step}")
    leaves = tape.backward(loss)
    frozen_ids = {id(p) for p in frozen}
    hit = frozen_ids.intersection(leaves)
    if hit:
        raise FrozenParameterError(f"{len(hit)} frozen parameter(s) received gradients")
    grads = [leaves.get(id(p), np.zeros_like(p.data)) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError(step, f"non-finite gradient at optimizer step {step}")
    adam_step(params, grads, state)
