import math

import numpy as np
import pytest

from hybridaug import datasets, dynamics
from hybridaug.aphynity import (AphynityConfig, AphynityModel, LagrangianConfig, aph_encode,
                                aph_predict, aph_rollout, aph_train, dual_ascent, residual_norm)
from hybridaug.checks import _toy_batch, gradcheck, model_cases, toy_aphynity, toy_spec
from hybridaug.hybrid import expert_rollout
from hybridaug.rng import Rng
from hybridaug.tensor import Tensor, no_grad

# frozen at build time: toy_aphynity(0) on the toy batch, along its own rollout
RESIDUAL_NORM_GOLDEN = 0.002067423198527835

SPEC = toy_spec()


def zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


@pytest.fixture(scope="module")
def toy_set():
    return datasets.generate_split(datasets.SplitSpec(
        "pendulum", "toy", 10, SPEC.train_ze, SPEC.train_za, horizon=SPEC.horizon, seed=0))


def test_zero_heads_give_softplus_zero():
    m = AphynityModel(SPEC, Rng(0), AphynityConfig(hidden=4, ze_hidden=(3,), ze_scale=1.0))
    zero(m.ze_head)
    x, y = _toy_batch(SPEC)
    z_e, _ = aph_encode(m, x, y)
    np.testing.assert_allclose(z_e.data, math.log(2.0))


def test_encode_is_deterministic():
    m = toy_aphynity(0)
    x, y = _toy_batch(SPEC)
    a, b = aph_encode(m, x, y), aph_encode(m, x, y)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_encoded_expert_parameters_positive():
    m = toy_aphynity(3)
    x = np.array([[1.0, 0.0], [-1.5, 0.0]])
    y = np.random.default_rng(0).normal(0, 100, (2, 10, 2))
    assert np.all(m.encode(x, y)[0].data > 0)


def test_observation_length_checked():
    m = toy_aphynity(0)
    x, y = _toy_batch(SPEC)
    with pytest.raises(ValueError, match="observ"):
        m.encode(x, y[:, :5])


def test_zero_residual_equals_expert_rollout():
    m = toy_aphynity(0)
    zero(m.residual)
    x, y = _toy_batch(SPEC)
    z_e, z_a = m.encode(x, y)
    a = aph_rollout(m, x, z_e, z_a, 30).ys.data
    b = expert_rollout(SPEC, x, z_e, 30).ys.data
    assert np.array_equal(a, b)


def oracle_model(spec):
    """APHYNITY model whose residual is the true damping and whose encoder is bypassed."""
    m = AphynityModel(spec, Rng(0), AphynityConfig(hidden=2, ze_hidden=(), za_hidden=()))
    m.residual = lambda y, z_a: dynamics.true_interaction_field(spec, 0.0, y, z_a)
    return m


def test_oracle_rollout_matches_ground_truth():
    spec = dynamics.pendulum_spec()
    sp = datasets.SplitSpec("pendulum", "o", 5, spec.train_ze, spec.train_za, seed=3,
                            substeps=spec.model_substeps)
    ds = datasets.generate_split(sp)
    m = oracle_model(spec)
    pred = aph_rollout(m, ds.x, ds.z_e, ds.z_a_true, 200).ys.data
    assert np.max(np.abs(pred - ds.y)) < 1e-10


def test_oracle_prediction():
    spec = dynamics.pendulum_spec()
    ds = datasets.generate_split(datasets.standard_splits("pendulum", seed=4, n_test=8)["test"])
    m = oracle_model(spec)
    m.encode = lambda x_o, y_o: (Tensor(ds.z_e), Tensor(ds.z_a_true))
    x_o, y_o, x, fut = datasets.observed_window(ds, 50)
    pred = aph_predict(m, x_o, y_o, x, 150).ys.data
    assert np.mean((pred - fut) ** 2) < 1e-6


def test_residual_norm_zero_network():
    m = toy_aphynity(0)
    zero(m.residual)
    states = np.random.default_rng(0).normal(size=(3, 4, 2))
    assert residual_norm(m, states, np.ones((3, 1))).item() == 0.0


def test_residual_norm_constant_field():
    m = toy_aphynity(0)
    zero(m.residual)
    m.residual.net.layers[-1].bias.data = np.array([0.7, 0.7])
    states = np.random.default_rng(0).normal(size=(3, 4, 2))
    assert residual_norm(m, states, np.ones((3, 1))).item() == pytest.approx(0.49)


def test_residual_norm_golden():
    m = toy_aphynity(0)
    x, y = _toy_batch(SPEC)
    z_e, z_a = m.encode(x, y)
    pred = m.rollout(x, z_e, z_a, 10)
    assert residual_norm(m, pred.ys, z_a).item() == RESIDUAL_NORM_GOLDEN


def test_residual_norm_empty_batch():
    with pytest.raises(ValueError):
        residual_norm(toy_aphynity(0), np.zeros((0, 3, 2)), np.zeros((0, 1)))


def test_toy_loss_gradient():
    fn, params = model_cases()["aphynity_loss"]
    assert sum(p.size for p in params) <= 100
    assert gradcheck(fn, params) < 1e-4


def test_dual_ascent():
    assert dual_ascent(10.0, 0.0, 5.0) == 10.0
    assert dual_ascent(10.0, 0.2, 5.0) == 11.0


def test_default_configs():
    c = LagrangianConfig.for_system("pendulum")
    assert (c.n_iter, c.lambda0, c.tau2, c.epochs, c.lr, c.batch) == (5, 10.0, 5.0, 50, 5e-4, 100)
    d = LagrangianConfig.for_system("diffusion")
    assert (d.n_iter, d.epochs) == (1, 500)
    assert AphynityConfig().resolved(dynamics.diffusion_spec()).d_a == 10
    assert AphynityConfig().resolved(dynamics.rlc_spec()).d_a == 1


def test_invalid_config():
    with pytest.raises(ValueError):
        LagrangianConfig(batch=0).validate()
    with pytest.raises(ValueError):
        aph_train(toy_aphynity(0), np.zeros((0, 2)), np.zeros((0, 10, 2)), LagrangianConfig(), Rng(0))


def test_toy_training_reduces_trajectory_loss(toy_set):
    m = AphynityModel(SPEC, Rng(0))
    x, y = Tensor(toy_set.x), Tensor(toy_set.y[:, :10])
    with no_grad():
        before = m.losses(x, y)[0].item()
    res = aph_train(m, toy_set.x, toy_set.y, LagrangianConfig(epochs=5, batch=2), Rng(0))
    with no_grad():
        after = m.losses(x, y)[0].item()
    assert after < before / 10
    lam = res.lambdas
    assert lam[0] == 10.0 and all(b >= a for a, b in zip(lam, lam[1:])) and lam[-1] > lam[0]
    assert len(res.record.epochs) == 5


def test_training_is_deterministic(toy_set):
    runs = []
    for _ in range(2):
        m = toy_aphynity(1)
        r = aph_train(m, toy_set.x, toy_set.y, LagrangianConfig(epochs=3, batch=4), Rng(7))
        runs.append((r.record.epochs, m.state_dict(), m.lam))
    assert runs[0][0] == runs[1][0] and runs[0][2] == runs[1][2]
    assert all(np.array_equal(v, runs[1][1][k]) for k, v in runs[0][1].items())


def test_resume_matches_uninterrupted(toy_set):
    cfg = LagrangianConfig(epochs=4, batch=3)
    full = toy_aphynity(2)
    aph_train(full, toy_set.x, toy_set.y, cfg, Rng(5))
    part = toy_aphynity(2)
    r = aph_train(part, toy_set.x, toy_set.y, LagrangianConfig(epochs=2, batch=3), Rng(5))
    aph_train(part, toy_set.x, toy_set.y, cfg, Rng(5), resume=r.state)
    assert part.lam == full.lam
    assert all(np.array_equal(v, full.state_dict()[k]) for k, v in part.state_dict().items())
