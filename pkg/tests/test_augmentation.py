import numpy as np
import pytest

from hybridaug import datasets, dynamics
from hybridaug.aphynity import AphynityConfig, AphynityModel
from hybridaug.augmentation import (AugmentationError, AugmentConfig, AugmentedData,
                                    augment_pipeline, build_augmented_dataset, finetune_encoder,
                                    load_augmented, save_augmented)
from hybridaug.checks import _toy_batch, toy_aphynity, toy_hvae, toy_spec
from hybridaug.evaluation import relative_param_error
from hybridaug.hybrid import _repeat_rows, expert_rollout, optimizer_step
from hybridaug.optim import AdamState, FrozenParameterError
from hybridaug.rng import Rng
from hybridaug.tensor import Tape, Tensor, as_tensor, no_grad

SPEC = toy_spec()


@pytest.fixture(scope="module")
def train():
    return datasets.generate_split(datasets.SplitSpec(
        "pendulum", "toy", 40, SPEC.train_ze, SPEC.train_za, horizon=SPEC.horizon, seed=0))


def zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def test_default_supports():
    assert dynamics.pendulum_spec().augmented_ze == ((0.5, 3.5),)
    assert dynamics.rlc_spec().augmented_ze == ((1.0, 5.0), (0.5, 2.5))
    assert dynamics.diffusion_spec().augmented_ze == ((0.001, 0.004), (0.001, 0.01))


def test_empty_support_rejected():
    with pytest.raises(ValueError):
        AugmentConfig(support=((2.0, 2.0),)).resolved_support(toy_aphynity(0))


def test_zero_samples(train):
    data = build_augmented_dataset(toy_aphynity(0), train.x, train.y, AugmentConfig(n_aug=0), Rng(0))
    assert len(data) == 0


def test_default_count_is_training_size(train):
    data = build_augmented_dataset(toy_aphynity(0), train.x, train.y, AugmentConfig(), Rng(0))
    assert len(data) == len(train) and data.skipped == 0
    assert data.y.shape == (len(train), SPEC.n_obs_train, 2)


def test_zero_residual_gives_expert_rollouts(train):
    m = toy_aphynity(0)
    zero(m.residual)
    data = build_augmented_dataset(m, train.x, train.y, AugmentConfig(n_aug=12), Rng(1))
    ref = expert_rollout(SPEC, data.x, data.z_e, SPEC.n_obs_train).ys.data
    assert np.array_equal(data.y, ref)


def test_sampler_statistics(train):
    m = toy_aphynity(0)
    data = build_augmented_dataset(m, train.x, train.y, AugmentConfig(n_aug=1000), Rng(0))
    z = data.z_e[:, 0]
    assert z.min() >= 0.5 and z.max() <= 3.5
    assert abs(z.mean() - 2.0) < 0.05


@pytest.mark.parametrize("make", [toy_aphynity, toy_hvae])
def test_support_invariant(make, train):
    box = ((0.7, 0.9),)
    data = build_augmented_dataset(make(0), train.x, train.y, AugmentConfig(support=box, n_aug=30), Rng(2))
    assert np.all((data.z_e >= 0.7) & (data.z_e <= 0.9))


def test_aphynity_za_pool_is_empirical(train):
    m = toy_aphynity(0)
    data = build_augmented_dataset(m, train.x, train.y, AugmentConfig(n_aug=25), Rng(3))
    with no_grad():
        pool = m.encode(train.x, train.y[:, :SPEC.n_obs_train])[1].data[:, 0]
    assert np.all(np.isin(data.z_a[:, 0], pool))


def test_divergence_skips_and_aborts(train):
    m = toy_aphynity(0)
    m.residual.net.layers[-1].bias.data = np.array([0.0, 1.0])
    # wide support with huge frequencies: a share of rollouts blows up
    bad = AugmentConfig(support=((0.5, 1e160),), n_aug=20)
    with pytest.raises(AugmentationError, match="diverged"):
        build_augmented_dataset(m, train.x, train.y, bad, Rng(0))
    lenient = AugmentConfig(support=((0.5, 1e160),), n_aug=20, max_skip_fraction=1.0)
    data = build_augmented_dataset(m, train.x, train.y, lenient, Rng(0))
    assert data.skipped > 0 and len(data) == 20 - data.skipped
    assert np.all(np.isfinite(data.y))


def test_augmentation_is_deterministic(train):
    a = build_augmented_dataset(toy_hvae(0), train.x, train.y, AugmentConfig(n_aug=10), Rng(4))
    b = build_augmented_dataset(toy_hvae(0), train.x, train.y, AugmentConfig(n_aug=10), Rng(4))
    for k in ("x", "y", "z_e", "z_a"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_augmented_roundtrip(tmp_path, train):
    data = build_augmented_dataset(toy_aphynity(0), train.x, train.y, AugmentConfig(n_aug=7), Rng(0))
    save_augmented(data, tmp_path / "a.hyad")
    back = load_augmented(tmp_path / "a.hyad")
    assert back.support == data.support and back.requested == 7
    for k in ("x", "y", "z_e", "z_a"):
        assert np.array_equal(getattr(back, k), getattr(data, k))


@pytest.mark.parametrize("make", [toy_aphynity, toy_hvae])
def test_finetune_freezes_decoder(make, train):
    m = make(0)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    dec = {id(p) for p in m.decoder_parameters()}
    res = augment_pipeline(m, train.x, train.y, AugmentConfig(n_aug=20, epochs=2, batch=5), Rng(0))
    names = dict(m.named_parameters())
    changed = [k for k, v in m.state_dict().items() if not np.array_equal(v, before[k])]
    assert changed and all(id(names[k]) not in dec for k in changed)
    assert res.decoder_hash == m.decoder_hash()
    assert not m.decoder_frozen()


def test_gradient_into_frozen_parameter_is_an_error():
    m = toy_aphynity(0)
    x, y = _toy_batch(SPEC)
    params = m.encoder_parameters()
    with Tape() as tape:
        loss = m.objective(Tensor(x), Tensor(y))[0]
    with pytest.raises(FrozenParameterError):
        optimizer_step(loss, tape, params, AdamState.for_params(params),
                       frozen=m.decoder_parameters())


def test_finetune_needs_data():
    empty = AugmentedData(np.zeros((0, 2)), np.zeros((0, 10, 2)), np.zeros((0, 1)),
                          np.zeros((0, 1)), ((0.5, 3.5),))
    with pytest.raises(ValueError):
        finetune_encoder(toy_aphynity(0), empty, AugmentConfig(), Rng(0))


def test_finetune_improves_estimates_on_augmented_set(train):
    m = AphynityModel(SPEC, Rng(0), AphynityConfig(hidden=16, ze_hidden=(16,), za_hidden=(16,)))
    data = build_augmented_dataset(m, train.x, train.y, AugmentConfig(n_aug=60), Rng(0))
    with no_grad():
        before = np.mean((m.expert_estimate(data.x, data.y) - data.z_e) ** 2)
    finetune_encoder(m, data, AugmentConfig(epochs=5, batch=10, lr=2e-3), Rng(1))
    with no_grad():
        after = np.mean((m.expert_estimate(data.x, data.y) - data.z_e) ** 2)
    assert after < before


@pytest.mark.slow
def test_finetune_recovers_parameters_with_oracle_decoder():
    """With the true residual as decoder, fine-tuning alone must learn to read z_e off the data."""
    horizon = (0.0, 2.0, 3.0)
    spec = dynamics.pendulum_spec(horizon=horizon)

    def split(name, n, seed):
        return datasets.generate_split(datasets.SplitSpec(
            "pendulum", name, n, spec.augmented_ze, ((0.0, 0.6),), horizon=horizon, seed=seed,
            substeps=spec.model_substeps))

    def true_residual(y, z_a):
        y = as_tensor(y)
        if y.ndim == 3:
            B, L = y.shape[:2]
            flat = dynamics.true_interaction_field(spec, 0.0, y.reshape((B * L, 2)), _repeat_rows(z_a, L))
            return flat.reshape((B, L, 2))
        return dynamics.true_interaction_field(spec, 0.0, y, z_a)

    aug, held = split("aug", 400, 0), split("held", 200, 1)
    m = AphynityModel(spec, Rng(0), AphynityConfig(hidden=32, ze_hidden=(32,), za_hidden=(32,)))
    m.residual = true_residual
    m.decoder_modules = lambda: []
    n_obs = spec.n_obs_train
    data = AugmentedData(aug.x, aug.y[:, :n_obs], aug.z_e, aug.z_a_true, spec.augmented_ze)
    finetune_encoder(m, data, AugmentConfig(epochs=40, lr=3e-3, batch=20), Rng(1))
    with no_grad():
        est = m.expert_estimate(held.x, held.y[:, :n_obs])
    assert relative_param_error(held.z_e, est) < 5.0
