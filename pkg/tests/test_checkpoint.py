import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from offrl_lab.agents.checkpoint import load_checkpoint, save_checkpoint, state_from_dict, state_to_dict
from offrl_lab.agents.config import AgentConfig, Algorithm
from offrl_lab.agents.state import init_agent_state
from offrl_lab.datasets import fit_normalizer
from offrl_lab.diffnet import Rng
from offrl_lab.divergences import BehaviorConfig, behavior_fit
from offrl_lab.envs import POINTMASS_SPEC
from offrl_lab.exceptions import CheckpointFormatError


def assert_same_state(restored, state):
    assert restored.algorithm is state.algorithm
    assert restored.env_spec == state.env_spec
    assert restored.step == state.step
    assert restored.log_eta == state.log_eta
    for name in ("actor", "actor_target", "critic1", "critic2", "critic1_target", "critic2_target"):
        ours, theirs = getattr(restored, name), getattr(state, name)
        assert (ours is None and theirs is None) or ours.equals(theirs)
    assert restored.actor_opt.step == state.actor_opt.step
    assert restored.normalizer == state.normalizer


def test_td3bc_state_survives_a_file(tmp_path, er50):
    cfg = AgentConfig(hidden_dims=[8])
    state = init_agent_state(cfg, POINTMASS_SPEC, Rng(0), normalizer=fit_normalizer(er50)).evolve(step=42)
    path = save_checkpoint(state, tmp_path / "ckpt" / "state.json")
    restored = load_checkpoint(path)
    assert_same_state(restored, state)
    states = er50.states[:10]
    assert_array_equal(restored.act(states), state.act(states))


def test_bear_state_keeps_its_behavior_model(er50):
    cfg = AgentConfig(algorithm=Algorithm.BEAR, hidden_dims=[8], initial_log_eta=-2.0)
    normalizer = fit_normalizer(er50)
    behavior = behavior_fit(er50, BehaviorConfig(hidden_dims=[8], steps=5, batch_size=16), Rng(1), normalizer)
    state = init_agent_state(cfg, POINTMASS_SPEC, Rng(0), normalizer, behavior)
    restored = state_from_dict(json.loads(json.dumps(state_to_dict(state))))
    assert_same_state(restored, state)
    assert restored.behavior.params.equals(behavior.params)
    assert restored.behavior.normalizer == normalizer
    head, expected = restored.behavior.head(er50.states[:4]), behavior.head(er50.states[:4])
    assert np.array_equal(head.mean, expected.mean)


def test_behavior_cloning_state_has_no_critics():
    state = init_agent_state(AgentConfig(algorithm=Algorithm.BC, hidden_dims=[8]), POINTMASS_SPEC, Rng(0))
    raw = state_to_dict(state)
    assert set(raw["networks"]) == {"actor", "actor_target"}
    assert not state_from_dict(raw).has_critics


def test_foreign_containers_are_rejected():
    with pytest.raises(CheckpointFormatError):
        state_from_dict({"format": "something else", "version": 1})
    state = init_agent_state(AgentConfig(hidden_dims=[8]), POINTMASS_SPEC, Rng(0))
    raw = state_to_dict(state)
    with pytest.raises(CheckpointFormatError):
        state_from_dict(dict(raw, version=99))
    del raw["networks"]["actor"]["weights"]
    with pytest.raises(CheckpointFormatError):
        state_from_dict(raw)
