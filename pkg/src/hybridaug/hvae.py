"""Hybrid variational autoencoder.

The z_a posterior reads the raw observations; a filter network then removes
the interaction effects conditioned on z_a, and the z_e posterior reads the
filtered sequence. The decoder integrates the expert field plus a learned
residual and scores observations under a Gaussian with one shared learned
variance. Training minimizes the negative ELBO plus three grounding penalties.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .dynamics import System, SystemSpec
from .hybrid import (HybridModel, LossRecord, ObservationEncoder, ResidualField, TrainState,
                     expert_rollout, hybrid_rollout, minibatches, mse, observation_sequence,
                     optimizer_step)
from .integrators import Trajectory
from .neural import LOG_2PI, Module, GaussianHead, gaussian_kl, gaussian_nll, gaussian_sample
from .optim import AdamState
from .rng import Rng
from .tensor import Parameter, Tape, Tensor, as_tensor


@dataclass
class HvaeNetConfig:
    d_a: int | None = None          # None -> 1 for pendulum/RLC, 10 for diffusion
    hidden: int = 128
    ze_hidden: tuple = (150, 150)
    za_hidden: tuple = (150,)
    filter_width: int = 64
    filter_depth: int = 2
    fa_width: int = 50
    fa_depth: int = 3
    grid_channels: tuple = (16, 32, 64, 64)
    logvar_init: float = math.log(1e-2)
    ze_scale: float | None = None   # None -> centre of the training support / ln 2

    def resolved(self, spec: SystemSpec) -> "HvaeNetConfig":
        d_a = self.d_a if self.d_a is not None else (10 if spec.system is System.DIFFUSION else 1)
        scale = self.ze_scale
        if scale is None:
            scale = float(np.mean([0.5 * (lo + hi) for lo, hi in spec.train_ze])) / math.log(2.0)
        kw = asdict(self)
        kw.update(d_a=d_a, ze_scale=scale, ze_hidden=tuple(self.ze_hidden),
                  za_hidden=tuple(self.za_hidden), grid_channels=tuple(self.grid_channels))
        return HvaeNetConfig(**kw)


@dataclass
class HvaeConfig:
    alpha: float = 0.01
    beta: float = 0.01
    gamma: float = 1.0
    epochs: int = 1000
    lr: float = 5e-4
    weight_decay: float = 1e-6
    batch: int = 200
    prior_support: tuple | None = None   # None -> the system's augmented support

    @classmethod
    def for_system(cls, system, **overrides) -> "HvaeConfig":
        system = System(system)
        kw = {}
        if system is not System.PENDULUM:
            kw["batch"] = 100
        if system is System.DIFFUSION:
            kw["weight_decay"] = 1e-5
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("regularizer weights must be non-negative")
        if min(self.epochs, self.batch) <= 0 or self.lr <= 0:
            raise ValueError(f"invalid HVAE config: {self}")


class Posterior(NamedTuple):
    z_a: Tensor
    za_mu: Tensor
    za_logvar: Tensor
    z_e: Tensor
    ze_mu: Tensor
    ze_logvar: Tensor
    y_filt: Tensor      # filtered observations, same shape as y_o


def box_prior(box) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian (mean, log-variance) with the first two moments of U(box)."""
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    return 0.5 * (lo + hi), np.log((hi - lo) ** 2 / 12.0)


class ObservationNoise(Module):
    """One log-variance shared by every observed coordinate."""

    def __init__(self, logvar: float):
        self.logvar = Parameter(np.array([float(logvar)]))


class HvaeModel(HybridModel):
    flavor = "hvae"

    def __init__(self, spec: SystemSpec, rng: Rng, config: HvaeNetConfig | None = None,
                 prior_support=None):
        self.spec = spec
        self.config = (config or HvaeNetConfig()).resolved(spec)
        c = self.config
        self.n_obs = spec.n_obs_train
        self.prior_support = tuple(tuple(b) for b in (prior_support or spec.augmented_ze))
        self.za_encoder = ObservationEncoder(spec, self.n_obs + 1, rng, c.hidden, c.grid_channels)
        self.za_head = GaussianHead(self.za_encoder.out_dim, c.d_a, rng, c.za_hidden)
        self.filter = ResidualField(spec, c.d_a, rng, c.filter_width, c.filter_depth,
                                    zero_last=True)
        self.ze_encoder = ObservationEncoder(spec, self.n_obs + 1, rng, c.hidden, c.grid_channels)
        self.ze_head = GaussianHead(self.ze_encoder.out_dim, spec.d_e, rng, c.ze_hidden,
                                    positive=True, scale=c.ze_scale)
        self.residual = ResidualField(spec, c.d_a, rng, c.fa_width, c.fa_depth, "selu")
        self.noise = ObservationNoise(c.logvar_init)

    def encoder_modules(self):
        return [self.za_encoder, self.za_head, self.filter, self.ze_encoder, self.ze_head]

    def decoder_modules(self):
        return [self.residual, self.noise]

    def manifest(self) -> dict:
        return {"flavor": self.flavor, "system": self.spec.system.value, "grid": self.spec.grid,
                "config": asdict(self.config),
                "prior_support": [list(b) for b in self.prior_support]}

    @property
    def ze_prior(self) -> tuple[np.ndarray, np.ndarray]:
        return box_prior(self.prior_support)

    # -- encoder -------------------------------------------------------------
    def filter_sequence(self, x_o, y_o, z_a) -> Tensor:
        """Filtered sequence [B, T + 1, *S] (initial state included)."""
        seq = observation_sequence(x_o, y_o)
        return seq + self.filter(seq, z_a)

    def ze_posterior(self, seq) -> tuple[Tensor, Tensor]:
        return self.ze_head(self.ze_encoder(seq))

    def encode(self, x_o, y_o, rng: Rng | None = None, sample: bool = True) -> Posterior:
        self.check_observation_length(y_o)
        x_o, y_o = as_tensor(x_o), as_tensor(y_o)
        za_mu, za_lv = self.za_head(self.za_encoder(observation_sequence(x_o, y_o)))
        z_a = gaussian_sample(za_mu, za_lv, rng.child(0)) if sample else za_mu
        seq = self.filter_sequence(x_o, y_o, z_a)
        ze_mu, ze_lv = self.ze_posterior(seq)
        z_e = gaussian_sample(ze_mu, ze_lv, rng.child(1)) if sample else ze_mu
        return Posterior(z_a, za_mu, za_lv, z_e, ze_mu, ze_lv, seq[:, 1:])

    # -- decoder -------------------------------------------------------------
    def rollout(self, x, z_e, z_a, n_obs: int, t0: float = 0.0, check_finite: bool = True) -> Trajectory:
        return hybrid_rollout(self.spec, self.residual, x, z_e, z_a, n_obs, t0,
                              check_finite=check_finite)

    def log_likelihood(self, pred, y) -> Tensor:
        """Per-sample Gaussian log-likelihood (summed over time and coordinates, mean over batch)."""
        pred, y = as_tensor(pred), as_tensor(y)
        d = pred - y
        n = d.size / d.shape[0]
        lv = self.noise.logvar.sum()
        sq = (d * d).sum() * (1.0 / d.shape[0])
        return -0.5 * (sq * T.exp(-lv) + n * lv + n * LOG_2PI)

    def elbo_terms(self, x, y, post: Posterior) -> tuple[Tensor, Tensor, Tensor, Trajectory]:
        B = as_tensor(x).shape[0]
        pred = self.rollout(x, post.z_e, post.z_a, self.n_obs)
        ll = self.log_likelihood(pred.ys, y)
        kl_a = gaussian_kl(post.za_mu, post.za_logvar) * (1.0 / B)
        pm, plv = self.ze_prior
        kl_e = gaussian_kl(post.ze_mu, post.ze_logvar, pm, plv) * (1.0 / B)
        return ll, kl_a, kl_e, pred

    def regularizers(self, x, y, post: Posterior, pred: Trajectory, rng: Rng) -> tuple[Tensor, Tensor, Tensor]:
        x = as_tensor(x)
        expert = expert_rollout(self.spec, x, post.z_e, self.n_obs)
        r_ppc = mse(pred.ys, expert.ys)
        r_da1 = mse(post.y_filt, expert.ys)
        lo = np.array([b[0] for b in self.prior_support])
        hi = np.array([b[1] for b in self.prior_support])
        z_fresh = rng.uniform_array(lo, hi, (x.shape[0], len(lo)))
        with T.no_grad():
            y_fresh = expert_rollout(self.spec, x.detach(), z_fresh, self.n_obs).ys.data
        mu, lv = self.ze_posterior(observation_sequence(x.detach(), y_fresh))
        r_da2 = gaussian_nll(mu, lv, z_fresh) * (1.0 / x.shape[0])
        return r_ppc, r_da1, r_da2

    def objective(self, x, y, cfg: HvaeConfig, rng: Rng) -> tuple[Tensor, dict]:
        post = self.encode(x, y, rng.child(0))
        ll, kl_a, kl_e, pred = self.elbo_terms(x, y, post)
        elbo = ll - kl_a - kl_e
        loss = -elbo
        parts = {"elbo": elbo, "loglik": ll, "kl_a": kl_a, "kl_e": kl_e}
        if cfg.alpha or cfg.beta or cfg.gamma:
            r_ppc, r_da1, r_da2 = self.regularizers(x, y, post, pred, rng.child(1))
            loss = loss + cfg.alpha * r_ppc + cfg.beta * r_da1 + cfg.gamma * r_da2
            parts.update(r_ppc=r_ppc, r_da1=r_da1, r_da2=r_da2)
        return loss, parts

    # -- prediction ------------------------------------------------------------
    def predict(self, x_o, y_o, x, n_obs: int, t0: float | None = None, n_mc: int = 8,
                rng: Rng | None = None) -> Trajectory:
        """Average of ``n_mc`` posterior rollouts; ``rng=None`` uses posterior means."""
        if n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if t0 is None:
            t0 = self.spec.horizon[1]
        if rng is None:
            post = self.encode(x_o, y_o, sample=False)
            return self.rollout(x, post.z_e, post.z_a, n_obs, t0)
        total = None
        for k in range(n_mc):
            post = self.encode(x_o, y_o, rng.child(k))
            traj = self.rollout(x, post.z_e, post.z_a, n_obs, t0)
            total = traj.ys if total is None else total + traj.ys
        return Trajectory(as_tensor(x), total * (1.0 / n_mc), self.spec.dt_obs,
                          self.spec.model_substeps)

    def expert_estimate(self, x_o, y_o) -> np.ndarray:
        return self.encode(x_o, y_o, sample=False).ze_mu.data

    # -- augmentation hooks ------------------------------------------------------
    def augmentation_za(self, x_all, y_all, idx, rng: Rng) -> np.ndarray:
        """Sample z_a from the posterior of each selected training pair."""
        out = []
        for k, s in enumerate(range(0, len(idx), 250)):
            sel = idx[s:s + 250]
            mu, lv = self.za_head(self.za_encoder(observation_sequence(x_all[sel], y_all[sel])))
            out.append(gaussian_sample(mu, lv, rng.child(k)).data)
        return np.concatenate(out)

    def decode(self, x, z_e, z_a, n_obs: int) -> np.ndarray:
        with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
            return self.rollout(x, z_e, z_a, n_obs, check_finite=False).ys.data

    def finetune_losses(self, x, y, z_e, rng: Rng, unit=None, cfg: HvaeConfig | None = None):
        """(training objective, -log q(z_e | x, y)) on augmented data."""
        cfg = cfg or self.train_config
        post = self.encode(x, y, rng.child(0))
        ll, kl_a, kl_e, pred = self.elbo_terms(x, y, post)
        base = kl_a + kl_e - ll
        if cfg.alpha or cfg.beta or cfg.gamma:
            r_ppc, r_da1, r_da2 = self.regularizers(x, y, post, pred, rng.child(1))
            base = base + cfg.alpha * r_ppc + cfg.beta * r_da1 + cfg.gamma * r_da2
        mu, lv = post.ze_mu, post.ze_logvar
        if unit is not None:
            u = 1.0 / np.asarray(unit, dtype=float)
            mu, z_e, lv = mu * u, as_tensor(z_e) * u, lv + 2.0 * np.log(u)
        sup = gaussian_nll(mu, lv, z_e) * (1.0 / as_tensor(x).shape[0])
        return base, sup

    train_config = HvaeConfig()


def hvae_encode(model: HvaeModel, x_o, y_o, rng: Rng | None = None, sample: bool = True) -> Posterior:
    return model.encode(x_o, y_o, rng, sample)


def hvae_elbo(model: HvaeModel, x, y, rng: Rng) -> tuple[Tensor, dict]:
    """ELBO averaged over the batch, with its log-likelihood and KL parts."""
    post = model.encode(x, y, rng.child(0))
    ll, kl_a, kl_e, _ = model.elbo_terms(x, y, post)
    return ll - kl_a - kl_e, {"loglik": ll, "kl_a": kl_a, "kl_e": kl_e}


def hvae_regularizers(model: HvaeModel, x, y, post: Posterior, rng: Rng) -> tuple[Tensor, Tensor, Tensor]:
    pred = model.rollout(x, post.z_e, post.z_a, model.n_obs)
    return model.regularizers(x, y, post, pred, rng)


@dataclass
class HvaeTrainResult:
    model: HvaeModel
    record: LossRecord = field(default_factory=LossRecord)
    state: TrainState | None = None


def hvae_train(model: HvaeModel, x: np.ndarray, y: np.ndarray, cfg: HvaeConfig, rng: Rng,
               log=None, resume: TrainState | None = None, on_epoch=None) -> HvaeTrainResult:
    """Adam on the negative ELBO plus weighted penalties; resumable like ``aph_train``."""
    cfg.validate()
    if len(x) == 0:
        raise ValueError("hvae_train needs a non-empty dataset")
    model.train_config = cfg
    y = y[:, :model.n_obs]
    params = model.parameters()
    st = resume or TrainState(AdamState.for_params(params, cfg.lr, cfg.weight_decay))
    keys = ("loss", "elbo", "r_ppc", "r_da1", "r_da2")
    for epoch in range(st.epoch, cfg.epochs):
        totals = dict.fromkeys(keys, 0.0)
        erng = rng.child(epoch)
        for b, idx in enumerate(minibatches(len(x), cfg.batch, erng.child(0))):
            with Tape() as tape:
                loss, parts = model.objective(Tensor(x[idx]), Tensor(y[idx]), cfg, erng.child(1, b))
            optimizer_step(loss, tape, params, st.adam, step=st.step)
            st.step += 1
            parts["loss"] = loss
            for k in keys:
                if k in parts:
                    totals[k] += len(idx) * parts[k].item()
        st.record.add(epoch=epoch, **{k: v / len(x) for k, v in totals.items()})
        st.epoch = epoch + 1
        if log is not None:
            log(st.record.epochs[-1])
        if on_epoch is not None:
            on_epoch(st)
    return HvaeTrainResult(model, st.record, st)


def hvae_predict(model: HvaeModel, x_o, y_o, x, n_obs: int, n_mc: int = 8, rng: Rng | None = None,
                 t0: float | None = None) -> Trajectory:
    return model.predict(x_o, y_o, x, n_obs, t0, n_mc, rng)
