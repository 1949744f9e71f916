import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from offrl_lab.datasets import sample_batch
from offrl_lab.diffnet import Activation, MlpParams, MlpSpec, Rng, finite_diff_oracle
from offrl_lab.divergences import (
    LOG_STD_MIN,
    BehaviorConfig,
    BehaviorModel,
    Kernel,
    KernelKind,
    batched_mmd_squared,
    behavior_fit,
    behavior_sample,
    kernel_eval,
    mmd_squared,
)
from offrl_lab.exceptions import ConfigurationError, ContractError, ShapeError

from .conftest import make_dataset

GAUSSIAN = Kernel(KernelKind.GAUSSIAN, 1.0)
LAPLACIAN = Kernel(KernelKind.LAPLACIAN, 1.0)


def fixed_model(mean, log_std, state_dim=4):
    """Behavior model whose Gaussian ignores the state"""
    action_dim = len(mean)
    spec = MlpSpec(state_dim, (4,), 2 * action_dim, Activation.RELU)
    params = MlpParams(
        spec=spec,
        weights=[np.zeros((4, state_dim)), np.zeros((2 * action_dim, 4))],
        biases=[np.zeros(4), np.concatenate([np.arctanh(mean), log_std])],
    )
    return BehaviorModel(params=params, action_dim=action_dim)


def test_kernel_values():
    assert kernel_eval(GAUSSIAN, [0.0], [1.0]) == pytest.approx(math.exp(-0.5))
    assert kernel_eval(LAPLACIAN, [0.0, 0.0], [1.0, -1.0]) == pytest.approx(math.exp(-2.0))
    assert kernel_eval(Kernel(KernelKind.GAUSSIAN, 2.0), [0.0], [2.0]) == pytest.approx(math.exp(-0.5))
    with pytest.raises(ShapeError):
        kernel_eval(GAUSSIAN, [0.0], [0.0, 1.0])
    with pytest.raises(ContractError):
        Kernel(bandwidth=0.0)


def test_mmd_of_two_points():
    assert mmd_squared(np.array([[0.0]]), np.array([[1.0]]), GAUSSIAN) == pytest.approx(2.0 - 2.0 * math.exp(-0.5))


def test_mmd_of_identical_sets_is_zero():
    xs = np.random.default_rng(0).normal(size=(20, 2))
    assert mmd_squared(xs, xs, LAPLACIAN) == pytest.approx(0.0, abs=1e-12)
    assert mmd_squared(xs, xs.copy(), GAUSSIAN) >= 0.0


def test_mmd_rejects_bad_sets():
    with pytest.raises(ShapeError):
        mmd_squared(np.zeros((0, 2)), np.zeros((3, 2)), GAUSSIAN)
    with pytest.raises(ShapeError):
        mmd_squared(np.zeros((3, 2)), np.zeros((3, 1)), GAUSSIAN)


@pytest.mark.parametrize("kernel", [GAUSSIAN, LAPLACIAN])
def test_mmd_separates_distributions(kernel):
    gen = np.random.default_rng(1)
    a = gen.normal(size=(200, 2))
    b = gen.normal(size=(200, 2))
    far = gen.normal(loc=3.0, size=(200, 2))
    assert mmd_squared(a, far, kernel) > 10 * mmd_squared(a, b, kernel)


@pytest.mark.parametrize("kernel", [GAUSSIAN, LAPLACIAN])
def test_batched_mmd_matches_single_and_finite_differences(kernel):
    gen = np.random.default_rng(2)
    xs = gen.normal(size=(3, 5, 2))
    ys = gen.normal(loc=1.0, size=(3, 4, 2))
    values, grad = batched_mmd_squared(xs, ys, kernel)
    for b in range(3):
        assert values[b] == pytest.approx(mmd_squared(xs[b], ys[b], kernel))

    def total(flat):
        return float(batched_mmd_squared(xs, flat.reshape(ys.shape), kernel)[0].sum())

    numeric = finite_diff_oracle(total, ys.reshape(-1), h=1e-6).reshape(ys.shape)
    assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


def test_behavior_fit_recovers_a_simple_policy():
    gen = np.random.default_rng(3)
    actions = np.clip(np.array([0.5, -0.2]) + 0.1 * gen.standard_normal((2000, 2)), -1, 1)
    ds = make_dataset(np.zeros(2000), actions=actions)
    config = BehaviorConfig(hidden_dims=[16], steps=600, batch_size=128, lr=1e-2)
    model = behavior_fit(ds, config, Rng(0))

    head = model.head(ds.states[:200])
    assert_allclose(head.mean.mean(axis=0), [0.5, -0.2], atol=0.05)
    assert np.all((head.std.mean(axis=0) > 0.05) & (head.std.mean(axis=0) < 0.2))
    assert np.mean(model.nll_history[-50:]) < np.mean(model.nll_history[:50])


def test_behavior_fit_needs_data():
    with pytest.raises(ConfigurationError):
        behavior_fit(make_dataset([]), BehaviorConfig(steps=1), Rng(0))


def test_samples_stay_in_the_box_and_reproduce():
    model = fixed_model(mean=[0.0, 0.9], log_std=[2.0, 2.0])
    states = np.zeros((3, 4))
    samples = behavior_sample(model, states, 50, np.random.default_rng(0))
    assert samples.shape == (3, 50, 2)
    assert np.all(np.abs(samples) <= 1.0)
    assert_allclose(samples, behavior_sample(model, states, 50, np.random.default_rng(0)))
    with pytest.raises(ContractError):
        behavior_sample(model, states, 0, np.random.default_rng(0))


def test_log_std_is_floored_and_mean_is_recovered():
    model = fixed_model(mean=[0.3, -0.4], log_std=[-20.0, -20.0])
    head = model.head(np.zeros((1, 4)))
    assert_allclose(head.log_std, LOG_STD_MIN)
    samples = behavior_sample(model, np.zeros((1, 4)), 10_000, np.random.default_rng(1))
    assert_allclose(samples[0].mean(axis=0), [0.3, -0.4], atol=1e-3)
    assert_allclose(samples[0].std(axis=0), math.exp(LOG_STD_MIN), rtol=0.05)


def test_sample_batch_draws_valid_indices():
    idx = sample_batch(10, 1000, np.random.default_rng(0))
    assert idx.min() >= 0 and idx.max() <= 9
    assert len(np.unique(idx)) == 10
