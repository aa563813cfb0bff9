"""Amortized APHYNITY-style hybrid model.

An encoder maps an observed trajectory to point estimates (z_e, z_a); the
decoder integrates ``F_e(y; z_e) + F_a(y, z_a; theta)``. Training minimizes
``lam * L_traj + L_res`` and raises ``lam`` by dual ascent on the trajectory
error.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .dynamics import System, SystemSpec
from .hybrid import (HybridModel, LossRecord, ObservationEncoder, ResidualField, TrainState,
                     hybrid_rollout, minibatches, mse, observation_sequence, optimizer_step)
from .integrators import Trajectory
from .neural import Mlp
from .optim import AdamState
from .rng import Rng
from .tensor import Tape, Tensor, as_tensor


@dataclass
class AphynityConfig:
    d_a: int | None = None          # None -> 1 for pendulum/RLC, 10 for diffusion
    hidden: int = 128
    ze_hidden: tuple = (150, 150)
    za_hidden: tuple = (150,)
    fa_width: int = 50
    fa_depth: int = 3
    grid_channels: tuple = (16, 32, 64, 64)
    ze_scale: float | None = None   # None -> centre of the training support / ln 2

    def resolved(self, spec: SystemSpec) -> "AphynityConfig":
        d_a = self.d_a if self.d_a is not None else (10 if spec.system is System.DIFFUSION else 1)
        scale = self.ze_scale
        if scale is None:
            mids = [0.5 * (lo + hi) for lo, hi in spec.train_ze]
            scale = float(np.mean(mids)) / math.log(2.0)
        return AphynityConfig(d_a, self.hidden, tuple(self.ze_hidden), tuple(self.za_hidden),
                              self.fa_width, self.fa_depth, tuple(self.grid_channels), scale)


@dataclass
class LagrangianConfig:
    n_iter: int = 5
    lambda0: float = 10.0
    tau2: float = 5.0
    epochs: int = 50
    lr: float = 5e-4
    batch: int = 100
    weight_decay: float = 0.0

    @classmethod
    def for_system(cls, system, **overrides) -> "LagrangianConfig":
        kw = {"n_iter": 1, "epochs": 500} if System(system) is System.DIFFUSION else {}
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> None:
        if min(self.n_iter, self.epochs, self.batch) <= 0 or self.lr <= 0 or self.lambda0 < 0:
            raise ValueError(f"invalid Lagrangian config: {self}")


class AphynityModel(HybridModel):
    flavor = "aphynity"

    def __init__(self, spec: SystemSpec, rng: Rng, config: AphynityConfig | None = None):
        self.spec = spec
        self.config = (config or AphynityConfig()).resolved(spec)
        c = self.config
        self.n_obs = spec.n_obs_train
        self.encoder = ObservationEncoder(spec, self.n_obs + 1, rng, c.hidden, c.grid_channels)
        h = self.encoder.out_dim
        self.ze_head = Mlp([h, *c.ze_hidden, spec.d_e], rng, "relu")
        self.za_head = Mlp([h, *c.za_hidden, c.d_a], rng, "relu")
        self.residual = ResidualField(spec, c.d_a, rng, c.fa_width, c.fa_depth)
        self.lam = 10.0

    def encoder_modules(self):
        return [self.encoder, self.ze_head, self.za_head]

    def decoder_modules(self):
        return [self.residual]

    def manifest(self) -> dict:
        return {"flavor": self.flavor, "system": self.spec.system.value, "grid": self.spec.grid,
                "config": asdict(self.config), "lam": self.lam}

    # -- model operations ----------------------------------------------
    def encode(self, x_o, y_o) -> tuple[Tensor, Tensor]:
        self.check_observation_length(y_o)
        h = self.encoder(observation_sequence(x_o, y_o))
        z_e = T.softplus(self.ze_head(h)) * self.config.ze_scale
        z_a = self.za_head(h)
        return z_e, z_a

    def rollout(self, x, z_e, z_a, n_obs: int, t0: float = 0.0) -> Trajectory:
        return hybrid_rollout(self.spec, self.residual, x, z_e, z_a, n_obs, t0)

    def residual_norm(self, states, z_a) -> Tensor:
        """Mean over batch, time and coordinates of F_a^2 along ``states`` [B, L, *S]."""
        f = self.residual(states, z_a)
        return (f * f).mean()

    def losses(self, x, y) -> tuple[Tensor, Tensor]:
        """(L_traj, L_res) on one minibatch; ``y`` holds the first ``n_obs`` states."""
        z_e, z_a = self.encode(x, y)
        pred = self.rollout(x, z_e, z_a, self.n_obs)
        return mse(pred.ys, y), self.residual_norm(pred.ys, z_a)

    def objective(self, x, y) -> tuple[Tensor, Tensor, Tensor]:
        l_traj, l_res = self.losses(x, y)
        return self.lam * l_traj + l_res, l_traj, l_res

    def predict(self, x_o, y_o, x, n_obs: int, t0: float | None = None) -> Trajectory:
        z_e, z_a = self.encode(x_o, y_o)
        if t0 is None:
            t0 = self.spec.horizon[1]
        return self.rollout(x, z_e, z_a, n_obs, t0)

    def expert_estimate(self, x_o, y_o) -> np.ndarray:
        return self.encode(x_o, y_o)[0].data

    # -- augmentation hooks ------------------------------------------------
    def augmentation_za(self, x_all, y_all, idx, rng: Rng) -> np.ndarray:
        """Draw z_a from the empirical pool of encoder outputs over all training pairs."""
        pool = np.concatenate([self.encode(x_all[s:s + 250], y_all[s:s + 250])[1].data
                               for s in range(0, len(x_all), 250)])
        return pool[rng.integers(len(pool), len(idx))]

    def decode(self, x, z_e, z_a, n_obs: int) -> np.ndarray:
        with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
            return hybrid_rollout(self.spec, self.residual, x, z_e, z_a, n_obs,
                                  check_finite=False).ys.data

    def finetune_losses(self, x, y, z_e, rng: Rng, unit=None) -> tuple[Tensor, Tensor]:
        """(training objective, squared z_e error) on augmented data."""
        z_hat, z_a = self.encode(x, y)
        pred = self.rollout(x, z_hat, z_a, self.n_obs)
        l_traj = mse(pred.ys, y)
        base = self.lam * l_traj + self.residual_norm(pred.ys, z_a)
        d = z_hat - z_e
        if unit is not None:
            d = d * (1.0 / np.asarray(unit, dtype=float))
        return base, (d * d).mean()


def aph_encode(model: AphynityModel, x_o, y_o):
    return model.encode(x_o, y_o)


def aph_rollout(model: AphynityModel, x, z_e, z_a, n_obs: int, t0: float = 0.0) -> Trajectory:
    return model.rollout(x, z_e, z_a, n_obs, t0)


def residual_norm(model: AphynityModel, states, z_a) -> Tensor:
    if as_tensor(states).shape[0] == 0:
        raise ValueError("residual_norm needs a non-empty batch")
    return model.residual_norm(states, z_a)


def dual_ascent(lam: float, l_traj: float, tau2: float) -> float:
    return lam + tau2 * l_traj


@dataclass
class TrainResult:
    model: AphynityModel
    record: LossRecord
    lambdas: list = field(default_factory=list)
    state: TrainState | None = None


def aph_train(model: AphynityModel, x: np.ndarray, y: np.ndarray, cfg: LagrangianConfig,
              rng: Rng, log=None, resume: TrainState | None = None, on_epoch=None) -> TrainResult:
    """Lagrangian training on initial states ``x`` [N, *S] and observations ``y`` [N, T, *S].

    Epoch ``e`` draws its minibatch order from ``rng.child(e)``, so a run resumed
    from a ``TrainState`` continues exactly as the uninterrupted run would.
    """
    cfg.validate()
    if len(x) == 0:
        raise ValueError("aph_train needs a non-empty dataset")
    y = y[:, :model.n_obs]
    params = model.parameters()
    if resume is None:
        model.lam = cfg.lambda0
        resume = TrainState(AdamState.for_params(params, cfg.lr, cfg.weight_decay),
                            extra={"lambdas": [model.lam]})
    st = resume
    lambdas = st.extra.setdefault("lambdas", [model.lam])
    for epoch in range(st.epoch, cfg.epochs):
        totals = np.zeros(3)
        for idx in minibatches(len(x), cfg.batch, rng.child(epoch)):
            with Tape() as tape:
                loss, l_traj, l_res = model.objective(Tensor(x[idx]), Tensor(y[idx]))
            optimizer_step(loss, tape, params, st.adam, step=st.step)
            st.step += 1
            if st.step % cfg.n_iter == 0:
                model.lam = dual_ascent(model.lam, l_traj.item(), cfg.tau2)
                lambdas.append(model.lam)
            totals += len(idx) * np.array([loss.item(), l_traj.item(), l_res.item()])
        totals /= len(x)
        st.record.add(epoch=epoch, loss=totals[0], l_traj=totals[1], l_res=totals[2], lam=model.lam)
        st.epoch = epoch + 1
        if log is not None:
            log(st.record.epochs[-1])
        if on_epoch is not None:
            on_epoch(st)
    return TrainResult(model, st.record, lambdas, st)


def aph_predict(model: AphynityModel, x_o, y_o, x, n_obs: int, t0: float | None = None) -> Trajectory:
    return model.predict(x_o, y_o, x, n_obs, t0)
