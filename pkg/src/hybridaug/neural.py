"""Small function approximators built on the tape engine.

Modules keep their weights as ``Parameter`` attributes (or lists of them);
``named_parameters`` walks attributes in insertion order, which fixes the
parameter order used by the optimizer and by checkpoints.
"""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Parameter, Tensor, as_tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2.0 * math.pi)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{key}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def _uniform_init(rng: Rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform_array(-bound, bound, shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, zero: bool = False):
        self.weight = (Parameter(np.zeros((n_in, n_out))) if zero
                       else _uniform_init(rng, n_in, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Mlp(Module):
    """Affine/activation chain with no activation after the last layer."""

    def __init__(self, widths: Sequence[int], rng: Rng, activation: str = "relu",
                 zero_last: bool = False):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        n = len(widths) - 1
        self.layers = [Linear(widths[i], widths[i + 1], rng, zero=zero_last and i == n - 1)
                       for i in range(n)]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.widths[0]:
            raise T.ShapeError("mlp_forward", [x.shape], f"expected last dim {self.widths[0]}")
        act = T.ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 and act is not None:
                x = act(x)
        return x


def mlp_forward(mlp: Mlp, x) -> Tensor:
    return mlp(x)


class SeqEncoder(Module):
    """Single-layer GRU; the feature is the final hidden state."""

    def __init__(self, n_in: int, hidden: int, rng: Rng):
        self.hidden = hidden
        # input and recurrent weights for the (update, reset, candidate) gates
        self.w_in = _uniform_init(rng, n_in, (n_in, 3 * hidden))
        self.w_rec = _uniform_init(rng, hidden, (hidden, 3 * hidden))
        self.b_in = Parameter(np.zeros(3 * hidden))
        self.b_rec = Parameter(np.zeros(3 * hidden))

    def __call__(self, seq) -> Tensor:
        """``seq`` is [B, L, n_in] with L >= 1."""
        seq = as_tensor(seq)
        if seq.ndim != 3 or seq.shape[1] < 1:
            raise ValueError(f"encode_sequence needs a non-empty [B, L, D] sequence, got {seq.shape}")
        H = self.hidden
        B, L, _ = seq.shape
        gx = T.linear(seq, self.w_in, self.b_in)  # all input projections in one op
        h = Tensor(np.zeros((B, H)))
        for t in range(L):
            gt = gx[:, t]
            gh = T.linear(h, self.w_rec, self.b_rec)
            z = T.sigmoid(gt[:, :H] + gh[:, :H])
            r = T.sigmoid(gt[:, H:2 * H] + gh[:, H:2 * H])
            n = T.tanh(gt[:, 2 * H:] + r * gh[:, 2 * H:])
            h = n + z * (h - n)
        return h


def encode_sequence(enc: SeqEncoder, seq) -> Tensor:
    return enc(seq)


class ConvStack(Module):
    """3x3 stride-1 convolutions with ReLU between layers."""

    def __init__(self, channels: Sequence[int], rng: Rng, zero_last: bool = False):
        self.channels = tuple(channels)
        self.weights = []
        self.biases = []
        n = len(channels) - 1
        for i in range(n):
            cin, cout = channels[i], channels[i + 1]
            if zero_last and i == n - 1:
                w = Parameter(np.zeros((cout, cin, 3, 3)))
            else:
                w = _uniform_init(rng, cin * 9, (cout, cin, 3, 3))
            self.weights.append(w)
            self.biases.append(Parameter(np.zeros(cout)))

    def __call__(self, x) -> Tensor:
        n = len(self.weights)
        for i in range(n):
            x = T.conv2d(x, self.weights[i], self.biases[i])
            if i < n - 1:
                x = T.relu(x)
        return x


class GridEncoder(Module):
    """Stride-2 3x3 conv blocks with ReLU, flattened to a feature vector."""

    def __init__(self, in_channels: int, grid: int, rng: Rng,
                 channels: Sequence[int] = (16, 32, 64, 64)):
        self.channels = (in_channels,) + tuple(channels)
        self.weights = []
        self.biases = []
        size = grid
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            self.weights.append(_uniform_init(rng, cin * 9, (cout, cin, 3, 3)))
            self.biases.append(Parameter(np.zeros(cout)))
            size = (size - 1) // 2 + 1
        self.out_dim = self.channels[-1] * size * size

    def __call__(self, x) -> Tensor:
        for w, b in zip(self.weights, self.biases):
            x = T.relu(T.conv2d(x, w, b, stride=2))
        return x.reshape((x.shape[0], -1))


class GaussianHead(Module):
    """Features -> (mean, log-variance) of a diagonal Gaussian.

    With ``positive=True`` the mean is ``scale * softplus(raw)``.
    """

    def __init__(self, n_in: int, n_out: int, rng: Rng, hidden: Sequence[int] = (),
                 activation: str = "relu", positive: bool = False, scale: float = 1.0):
        self.positive = positive
        self.scale = float(scale)
        self.trunk = Mlp([n_in, *hidden], rng, activation) if hidden else None
        self.activation = activation
        width = hidden[-1] if hidden else n_in
        self.mean = Linear(width, n_out, rng)
        self.logvar = Linear(width, n_out, rng)

    def features(self, h) -> Tensor:
        if self.trunk is None:
            return as_tensor(h)
        return T.ACTIVATIONS[self.activation](self.trunk(h))

    def __call__(self, h) -> tuple[Tensor, Tensor]:
        f = self.features(h)
        mu = self.mean(f)
        if self.positive:
            mu = T.softplus(mu) * self.scale
        logvar = T.clip(self.logvar(f), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


def gaussian_head_forward(head: GaussianHead, features) -> tuple[Tensor, Tensor]:
    return head(features)


def gaussian_nll(mu, logvar, target) -> Tensor:
    """Summed negative log-density of ``target`` under N(mu, exp(logvar))."""
    mu, logvar, target = as_tensor(mu), as_tensor(logvar), as_tensor(target)
    d = target - mu
    return 0.5 * (d * d * T.exp(-logvar) + logvar + LOG_2PI).sum()


def gaussian_sample(mu, logvar, rng: Rng | None = None, eps=None) -> Tensor:
    """Reparameterized draw ``mu + sigma * eps``; pass ``eps`` to fix the noise."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if eps is None:
        if rng is None:
            raise ValueError("gaussian_sample needs an rng or explicit eps")
        eps = rng.normal_array(0.0, 1.0, mu.shape)
    return mu + T.exp(0.5 * logvar) * eps


def gaussian_kl(mu, logvar, prior_mu=0.0, prior_logvar=0.0) -> Tensor:
    """Summed KL(N(mu, e^logvar) || N(prior_mu, e^prior_logvar))."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    d = mu - prior_mu
    var_ratio = T.exp(logvar - prior_logvar)
    return 0.5 * (var_ratio + d * d * np.exp(-np.asarray(prior_logvar)) - 1.0
                  - logvar + prior_logvar).sum()
