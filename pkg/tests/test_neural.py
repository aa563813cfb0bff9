import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hybridaug import tensor as T
from hybridaug.checks import gradcheck
from hybridaug.neural import (GaussianHead, GridEncoder, Mlp, SeqEncoder, encode_sequence,
                              gaussian_head_forward, gaussian_kl, gaussian_nll, gaussian_sample,
                              mlp_forward)
from hybridaug.rng import Rng
from hybridaug.tensor import Parameter, Tape, Tensor

# frozen at build time
MLP_GOLDEN = 0.11554121725205146
GRU_GOLDEN = [-0.0048183385828925035, 0.020934627826633488, -0.3599119896401297]


def test_mlp_golden():
    out = mlp_forward(Mlp([2, 4, 1], Rng(0), "tanh"), np.array([[0.5, -1.0]]))
    assert out.data[0, 0] == MLP_GOLDEN


def test_mlp_zero_last_layer():
    mlp = Mlp([3, 8, 2], Rng(1), zero_last=True)
    x = Rng(2).uniform_array(-5, 5, (4, 3))
    np.testing.assert_array_equal(mlp(x).data, np.zeros((4, 2)))


def test_mlp_identity_layer():
    mlp = Mlp([3, 3], Rng(0))
    mlp.layers[0].weight.data = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(mlp(x).data, x)


def test_mlp_widths_chain():
    mlp = Mlp([5, 7, 3, 2], Rng(0))
    shapes = [l.weight.shape for l in mlp.layers]
    assert shapes == [(5, 7), (7, 3), (3, 2)]
    assert all(np.all(np.isfinite(p.data)) for p in mlp.parameters())


def test_mlp_shape_mismatch():
    with pytest.raises(T.ShapeError):
        Mlp([3, 2], Rng(0))(np.ones((1, 4)))


def test_mlp_init_bounds():
    mlp = Mlp([16, 4], Rng(0))
    assert np.all(np.abs(mlp.layers[0].weight.data) <= 0.25)
    assert np.all(mlp.layers[0].bias.data == 0)


def test_gru_golden():
    seq = np.linspace(-1, 1, 10).reshape(1, 5, 2)
    np.testing.assert_array_equal(encode_sequence(SeqEncoder(2, 3, Rng(0)), seq).data[0], GRU_GOLDEN)


def test_gru_zero_weights():
    enc = SeqEncoder(2, 4, Rng(0))
    for p in enc.parameters():
        p.data = np.zeros_like(p.data)
    np.testing.assert_array_equal(enc(np.ones((2, 6, 2))).data, np.zeros((2, 4)))


def test_gru_consumes_every_step():
    enc = SeqEncoder(2, 4, Rng(0))
    state = np.array([[[0.7, -0.3]]])
    once = enc(state).data
    twice = enc(np.repeat(state, 2, axis=1)).data
    assert not np.allclose(once, twice)


@pytest.mark.parametrize("length", [1, 3, 17])
def test_gru_width_independent_of_length(length):
    assert SeqEncoder(2, 5, Rng(0))(np.ones((3, length, 2))).shape == (3, 5)


def test_gru_rejects_empty_sequence():
    with pytest.raises(ValueError):
        SeqEncoder(2, 5, Rng(0))(np.ones((1, 0, 2)))


@pytest.mark.parametrize("batch", [1, 3])
def test_grid_encoder_width(batch):
    enc = GridEncoder(4, 8, Rng(0), (3, 5))
    assert enc(np.ones((batch, 4, 8, 8))).shape == (batch, enc.out_dim)


def test_gaussian_nll_standard():
    v = gaussian_nll(Tensor([1.0]), Tensor([0.0]), Tensor([1.0])).item()
    assert v == pytest.approx(0.5 * math.log(2 * math.pi))
    assert v == pytest.approx(0.9189, abs=1e-4)


def test_gaussian_nll_gradient():
    mu = Parameter([0.0])
    with Tape() as tape:
        loss = gaussian_nll(mu, Tensor([0.0]), Tensor([1.0]))
    (g,) = tape.gradient(loss, [mu])
    assert g[0] == pytest.approx(-1.0)


def test_sample_with_zero_noise_is_mean():
    mu = Tensor([0.3, -2.0])
    np.testing.assert_array_equal(gaussian_sample(mu, Tensor([1.0, -3.0]), eps=np.zeros(2)).data, mu.data)


def test_sample_is_reparameterized():
    mu, lv = Parameter([0.5]), Parameter([0.2])
    eps = np.array([1.3])
    with Tape() as tape:
        s = gaussian_sample(mu, lv, eps=eps).sum()
    gm, gl = tape.gradient(s, [mu, lv])
    assert gm[0] == 1.0
    assert gl[0] == pytest.approx(0.5 * math.exp(0.1) * 1.3)


def test_sample_needs_noise_source():
    with pytest.raises(ValueError):
        gaussian_sample(Tensor([0.0]), Tensor([0.0]))


def test_kl_zero_at_prior():
    assert gaussian_kl(Tensor(np.zeros(3)), Tensor(np.zeros(3))).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-5, 5)),
       arrays(np.float64, (4,), elements=st.floats(-5, 5)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_kl_nonnegative(mu, lv, pm, plv):
    assert gaussian_kl(Tensor(mu), Tensor(lv), pm, plv).item() >= -1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-1e3, 1e3)))
def test_positive_head_means(h):
    head = GaussianHead(6, 2, Rng(0), hidden=(4,), positive=True, scale=2.0)
    mu, lv = gaussian_head_forward(head, h)
    assert np.all(mu.data > 0)
    assert np.all(lv.data >= -10) and np.all(lv.data <= 10)


def test_zero_head_softplus_mean():
    head = GaussianHead(3, 2, Rng(0), positive=True)
    for p in head.parameters():
        p.data = np.zeros_like(p.data)
    mu, lv = head(np.ones((1, 3)))
    np.testing.assert_allclose(mu.data, np.full((1, 2), math.log(2)))


def test_deterministic_forward():
    enc = SeqEncoder(2, 6, Rng(9))
    seq = Rng(1).uniform_array(-1, 1, (2, 4, 2))
    assert np.array_equal(enc(seq).data, enc(seq).data)


def test_encoder_and_head_gradients():
    rng = Rng(3)
    enc = SeqEncoder(2, 4, rng)
    head = GaussianHead(4, 2, rng, hidden=(3,), activation="selu", positive=True)
    seq = Tensor(rng.uniform_array(-1, 1, (3, 5, 2)))
    target = Tensor(rng.uniform_array(0.5, 2, (3, 2)))
    params = enc.parameters() + head.parameters()
    assert sum(p.size for p in params) < 1000

    def loss():
        mu, lv = head(enc(seq))
        return gaussian_nll(mu, lv, target)

    assert gradcheck(loss, params) < 1e-4


def test_grid_encoder_gradients():
    rng = Rng(4)
    enc = GridEncoder(2, 6, rng, (2, 3))
    for b in enc.biases:  # keep ReLU inputs off exact zeros
        b.data = rng.uniform_array(0.1, 0.3, b.shape)
    x = Tensor(rng.uniform_array(-1, 1, (2, 2, 6, 6)))
    assert gradcheck(lambda: T.square(enc(x)).sum(), enc.parameters()) < 1e-4
