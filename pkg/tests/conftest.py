from typing import Optional

import numpy as np
import pytest

from offrl_lab.agents.config import AgentConfig
from offrl_lab.datasets import Dataset, MixKind, build_mixture
from offrl_lab.diffnet import Activation, MlpParams, MlpSpec
from offrl_lab.divergences import BehaviorConfig
from offrl_lab.envs import EnvKind, ReferenceReturns, reference_returns
from offrl_lab.evaluation import EvalConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_dataset(
    rewards,
    provenance=None,
    kind: EnvKind = EnvKind.POINTMASS2D,
    states: Optional[np.ndarray] = None,
    actions: Optional[np.ndarray] = None,
    seed: int = 0,
) -> Dataset:
    """Hand-built dataset with random states and actions unless given"""
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(rewards)
    gen = np.random.default_rng(seed)
    state_dim, action_dim = (4, 2) if kind is EnvKind.POINTMASS2D else (3, 1)
    if states is None:
        states = gen.normal(size=(n, state_dim))
    if actions is None:
        actions = gen.uniform(-1.0, 1.0, size=(n, action_dim))
    if provenance is None:
        provenance = np.zeros(n, dtype=np.int8)
    return Dataset(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=states + 0.1,
        dones=np.zeros(n, dtype=bool),
        provenance=provenance,
        env_kind=kind,
        seed=seed,
    )


def linear_critic(c, state_dim: int, shift: float = 10.0) -> MlpParams:
    """Q(s, a) = c . a exactly on |a_i| < shift: a relu layer kept in its linear region"""
    c = np.asarray(c, dtype=np.float64)
    action_dim = len(c)
    spec = MlpSpec(state_dim + action_dim, (action_dim,), 1, Activation.RELU)
    w1 = np.hstack([np.zeros((action_dim, state_dim)), np.eye(action_dim)])
    b1 = np.full(action_dim, shift)
    w2 = c[None, :].copy()
    b2 = np.array([-shift * c.sum()])
    return MlpParams(spec=spec, weights=[w1, w2], biases=[b1, b2])


def constant_critic(value: float, state_dim: int, action_dim: int, hidden: int = 4) -> MlpParams:
    """Q(s, a) = value everywhere"""
    spec = MlpSpec(state_dim + action_dim, (hidden,), 1, Activation.RELU)
    return MlpParams(
        spec=spec,
        weights=[np.zeros((hidden, state_dim + action_dim)), np.zeros((1, hidden))],
        biases=[np.zeros(hidden), np.array([value])],
    )


@pytest.fixture(scope="session")
def pointmass_reference() -> ReferenceReturns:
    return reference_returns(EnvKind.POINTMASS2D, seed=0, episodes=5)


@pytest.fixture(scope="session")
def er50(pointmass_reference) -> Dataset:
    return build_mixture(EnvKind.POINTMASS2D, MixKind.EXPERT_RANDOM, 0.5, 600, seed=0, reference=pointmass_reference)


@pytest.fixture
def tiny_agent() -> AgentConfig:
    return AgentConfig(
        hidden_dims=[16, 16],
        batch_size=32,
        total_steps=20,
        eval_interval=10,
        log_interval=5,
        behavior=BehaviorConfig(hidden_dims=[16], steps=20, batch_size=32),
    )


@pytest.fixture
def tiny_eval() -> EvalConfig:
    return EvalConfig(episodes=2, reference_episodes=5, separability_samples=50, grad_norm_samples=64)
