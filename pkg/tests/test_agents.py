import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from offrl_lab.agents.config import AgentConfig, Algorithm, CRMode
from offrl_lab.agents.state import init_agent_state
from offrl_lab.agents.trainer import train, train_step
from offrl_lab.agents.updates import (
    Batch,
    UpdateStreams,
    actor_update_bear,
    actor_update_td3bc,
    bc_update,
    critic_targets,
    cr_weights,
    critic_update,
    gp_active,
    make_batch,
    minmax_weights,
    relaxation_weights,
    td3bc_lambda,
)
from offrl_lab.datasets import fit_normalizer, sample_batch
from offrl_lab.diffnet import Rng, params_to_vector
from offrl_lab.divergences import BehaviorModel
from offrl_lab.envs import POINTMASS_SPEC, EnvKind
from offrl_lab.evaluation import action_gradient_norms
from offrl_lab.exceptions import ConfigurationError

from .conftest import constant_critic, linear_critic, make_dataset


def small_cfg(**overrides) -> AgentConfig:
    settings = dict(hidden_dims=[16, 16], batch_size=32, total_steps=20, eval_interval=10, log_interval=5)
    settings.update(overrides)
    return AgentConfig(**settings)


def random_batch(n=32, seed=0, dones=0.0) -> Batch:
    gen = np.random.default_rng(seed)
    states = gen.normal(size=(n, 4))
    return Batch(
        states=states,
        actions=gen.uniform(-1, 1, size=(n, 2)),
        rewards=gen.normal(size=n),
        next_states=gen.normal(size=(n, 4)),
        dones=np.full(n, dones),
        raw_states=states,
    )


def with_constant_critics(state, value):
    critic = constant_critic(value, state_dim=4, action_dim=2)
    return state.evolve(
        critic1=critic,
        critic2=critic.copy(),
        critic1_target=critic.copy(),
        critic2_target=critic.copy(),
    )


def test_terminal_and_undiscounted_targets_are_the_reward():
    cfg = small_cfg()
    state = init_agent_state(cfg, POINTMASS_SPEC, Rng(0))
    batch = random_batch(dones=1.0)
    assert_array_equal(critic_targets(batch, state, cfg, np.random.default_rng(0)), batch.rewards)
    batch = random_batch()
    assert_array_equal(critic_targets(batch, state, small_cfg(gamma=0.0), np.random.default_rng(0)), batch.rewards)


def test_targets_bootstrap_from_the_target_critics():
    cfg = small_cfg(gamma=0.9)
    state = with_constant_critics(init_agent_state(cfg, POINTMASS_SPEC, Rng(0)), 2.0)
    batch = random_batch()
    assert_allclose(critic_targets(batch, state, cfg, np.random.default_rng(0)), batch.rewards + 1.8)


def test_penalty_schedule():
    assert gp_active(small_cfg(use_gp=True), 5)
    assert not gp_active(small_cfg(use_gp=True), 4)
    assert not gp_active(small_cfg(use_gp=True, lambda_gp=0.0), 5)
    assert not gp_active(small_cfg(use_gp=False), 5)


def test_penalty_stream_is_untouched_off_schedule():
    cfg = small_cfg(use_gp=True)
    state = init_agent_state(cfg, POINTMASS_SPEC, Rng(0)).evolve(step=3)
    streams = UpdateStreams.from_rng(Rng(1))
    before = streams.gp.bit_generator.state
    _, metrics = critic_update(random_batch(), state, cfg, streams)
    assert metrics.gp_penalty == 0.0
    assert streams.gp.bit_generator.state == before

    _, metrics = critic_update(random_batch(), state.evolve(step=5), cfg, streams)
    assert streams.gp.bit_generator.state != before
    assert metrics.gp_penalty >= 0.0


def test_critic_update_moves_both_critics_and_targets():
    cfg = small_cfg()
    state = init_agent_state(cfg, POINTMASS_SPEC, Rng(0))
    new_state, metrics = critic_update(random_batch(), state, cfg, UpdateStreams.from_rng(Rng(1)))
    assert not new_state.critic1.equals(state.critic1)
    assert not new_state.critic2_target.equals(state.critic2_target)
    assert new_state.actor.equals(state.actor)
    assert metrics.critic_loss > 0.0


def test_penalty_flattens_critics_fit_to_steep_targets():
    # rewards c . a with |c| = 3 pull the action gradient above the threshold of 1
    batch = random_batch(n=64, seed=4)
    batch.rewards[:] = batch.actions @ np.array([2.4, 1.8])
    eval_actions = np.random.default_rng(9).uniform(-1, 1, size=(64, 2))

    def excess_after(use_gp):
        cfg = small_cfg(
            gamma=0.0, critic_lr=1e-2, use_gp=use_gp, lambda_gp=10.0, gp_interval=1, gp_threshold=1.0, gp_expansion=4
        )
        state = init_agent_state(cfg, POINTMASS_SPEC, Rng(0))
        streams = UpdateStreams.from_rng(Rng(1))
        for step in range(1, 301):
            state, _ = critic_update(batch, state.evolve(step=step), cfg, streams)
        norms = action_gradient_norms(state.critics, batch.states, eval_actions)
        return float(np.mean(np.maximum(norms - 1.0, 0.0) ** 2))

    plain, penalized = excess_after(False), excess_after(True)
    assert penalized < 0.25 * plain


def test_minmax_weight_examples():
    assert_allclose(relaxation_weights(np.array([1.0, 2.0, 3.0])), [0.0, 0.5, 1.0])
    assert_array_equal(relaxation_weights(np.array([4.0, 4.0])), [1.0, 1.0])
    assert_array_equal(relaxation_weights(np.array([-1.0, 2.0]), CRMode.RAW), [-1.0, 2.0])


def test_minmax_weights_are_affine_invariant():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        q = gen.normal(scale=10.0, size=32)
        scale, shift = gen.uniform(0.1, 10.0), gen.normal(scale=100.0)
        weights = minmax_weights(q)
        assert weights.min() == 0.0 and weights.max() == 1.0
        assert_allclose(minmax_weights(scale * q + shift), weights, atol=1e-9)


def test_relaxation_weights_average_the_twin_critics():
    state = init_agent_state(small_cfg(), POINTMASS_SPEC, Rng(0))
    critics = linear_critic([3.0, 4.0], state_dim=4), linear_critic([1.0, 0.0], state_dim=4)
    state = state.evolve(
        critic1=critics[0],
        critic2=critics[1],
        critic1_target=critics[0].copy(),
        critic2_target=critics[1].copy(),
    )
    batch = random_batch()
    mean_q = 2.0 * batch.actions[:, 0] + 2.0 * batch.actions[:, 1]
    assert_allclose(cr_weights(state, batch, CRMode.RAW), mean_q, atol=1e-12)
    expected = (mean_q - mean_q.min()) / (mean_q.max() - mean_q.min())
    assert_allclose(cr_weights(state, batch), expected, atol=1e-12)


def test_lambda_scaling():
    assert td3bc_lambda(2.5, np.array([1.0, -3.0])) == pytest.approx(1.25)
    assert td3bc_lambda(2.5, np.zeros(4)) == pytest.approx(2.5e6)


def test_vanishing_alpha_reduces_to_behavior_cloning():
    cfg = small_cfg(alpha=1e-12)
    state = init_agent_state(cfg, POINTMASS_SPEC, Rng(0))
    batch = random_batch()
    td3bc_state, _ = actor_update_td3bc(batch, state, cfg)
    bc_state, _ = bc_update(batch, state)
    assert_allclose(params_to_vector(td3bc_state.actor), params_to_vector(bc_state.actor), atol=1e-8)


def test_zero_weights_silence_the_cloning_term():
    cfg = small_cfg(use_cr=True, cr_mode=CRMode.RAW)
    state = with_constant_critics(init_agent_state(cfg, POINTMASS_SPEC, Rng(0)), 0.0)
    new_state, metrics = actor_update_td3bc(random_batch(), state, cfg)
    assert new_state.actor.equals(state.actor)
    assert metrics.mean_weight == 0.0


def test_constant_critic_weights_keep_plain_cloning():
    batch = random_batch()
    plain = small_cfg()
    relaxed = small_cfg(use_cr=True)
    state = with_constant_critics(init_agent_state(plain, POINTMASS_SPEC, Rng(0)), 1.5)
    plain_state, _ = actor_update_td3bc(batch, state, plain)
    relaxed_state, metrics = actor_update_td3bc(batch, state, relaxed)
    assert relaxed_state.actor.equals(plain_state.actor)
    assert metrics.mean_weight == 1.0


def bear_state(cfg, log_std=-10.0):
    """BEAR agent whose behavior model is its own actor with a collapsed std"""
    state = init_agent_state(
        cfg, POINTMASS_SPEC, Rng(0), behavior=BehaviorModel(params=None, action_dim=2)  # type: ignore[arg-type]
    )
    actor = state.actor.copy()
    actor.weights[-1][2:, :] = 0.0
    actor.biases[-1][2:] = log_std
    return state.evolve(
        actor=actor, actor_target=actor.copy(), behavior=BehaviorModel(params=actor.copy(), action_dim=2)
    )


def test_bear_needs_a_behavior_model():
    cfg = small_cfg(algorithm=Algorithm.BEAR)
    with pytest.raises(ConfigurationError):
        init_agent_state(cfg, POINTMASS_SPEC, Rng(0))
    state = bear_state(cfg).evolve(behavior=None)
    with pytest.raises(ConfigurationError):
        actor_update_bear(random_batch(), state, cfg, np.random.default_rng(0))


def test_multiplier_decays_when_policy_matches_behavior():
    cfg = small_cfg(algorithm=Algorithm.BEAR, dual_lr=0.1)
    state = bear_state(cfg)
    new_state, metrics = actor_update_bear(random_batch(), state, cfg, np.random.default_rng(0))
    assert metrics.mmd < cfg.epsilon
    assert new_state.log_eta < state.log_eta
    assert metrics.eta == pytest.approx(new_state.eta)


def test_zero_relaxation_weights_make_the_constraint_inert():
    cfg = small_cfg(algorithm=Algorithm.BEAR, use_cr=True, cr_mode=CRMode.RAW)
    state = with_constant_critics(bear_state(cfg, log_std=0.0), 0.0)
    new_state, metrics = actor_update_bear(random_batch(), state, cfg, np.random.default_rng(0))
    # zero Q and zero weights leave nothing to follow
    assert new_state.actor.equals(state.actor)
    assert new_state.log_eta == pytest.approx(-cfg.dual_lr * cfg.epsilon)
    assert metrics.actor_loss == pytest.approx(0.0)


def test_td3bc_actor_follows_the_policy_delay():
    cfg = small_cfg()
    ds = make_dataset(np.zeros(64))
    state = init_agent_state(cfg, POINTMASS_SPEC, Rng(0))
    streams = UpdateStreams.from_rng(Rng(1))
    state, metrics = train_step(state, ds, cfg, streams)
    assert state.step == 1 and metrics.actor_loss is None
    state, metrics = train_step(state, ds, cfg, streams)
    assert state.step == 2 and metrics.actor_loss is not None


def test_make_batch_normalizes_states_only():
    ds = make_dataset(np.arange(10.0))
    normalizer = fit_normalizer(ds)
    idx = sample_batch(len(ds), 8, np.random.default_rng(0))
    batch = make_batch(ds, idx, normalizer)
    assert_allclose(batch.states, normalizer.apply(ds.states[idx]))
    assert_array_equal(batch.raw_states, ds.states[idx])
    assert_array_equal(batch.actions, ds.actions[idx])


def test_behavior_cloning_fits_a_single_transition(pointmass_reference, tiny_eval):
    ds = make_dataset([0.0], actions=np.array([[0.3, -0.6]]))
    cfg = small_cfg(algorithm=Algorithm.BC, total_steps=400, eval_interval=400, log_interval=100, actor_lr=1e-2)
    result = train(cfg, ds, tiny_eval, reference=pointmass_reference)
    assert result.state.critic1 is None
    assert_allclose(result.state.act(ds.states[0]), [0.3, -0.6], atol=0.02)
    assert result.reports[0].q_separability_auc is None
    assert result.reports[0].divergence_nonexpert_p75 is None


def test_plain_training_is_deterministic(er50, pointmass_reference, tiny_agent, tiny_eval):
    first = train(tiny_agent, er50, tiny_eval, reference=pointmass_reference)
    second = train(tiny_agent, er50, tiny_eval, reference=pointmass_reference)
    assert first.final_checkpoint == second.final_checkpoint
    assert [r.as_row() for r in first.reports] == [r.as_row() for r in second.reports]
    assert len(first.reports) == 2
    assert len(first.step_metrics) == 4
    assert not first.failed


def test_zero_penalty_weight_is_bitwise_plain(er50, pointmass_reference, tiny_agent, tiny_eval):
    plain = train(tiny_agent, er50, tiny_eval, reference=pointmass_reference)
    zero = tiny_agent.copy(update={"use_gp": True, "lambda_gp": 0.0})
    gp_off = train(zero, er50, tiny_eval, reference=pointmass_reference)
    assert gp_off.final_checkpoint == plain.final_checkpoint
    assert [m.as_row() for m in gp_off.step_metrics] == [m.as_row() for m in plain.step_metrics]

    penalized = tiny_agent.copy(update={"use_gp": True, "gp_threshold": 1e-3})
    active = train(penalized, er50, tiny_eval, reference=pointmass_reference)
    assert active.final_checkpoint != plain.final_checkpoint


def test_bear_training_runs(er50, pointmass_reference, tiny_agent, tiny_eval):
    cfg = tiny_agent.copy(update={"algorithm": Algorithm.BEAR, "use_gp": True, "use_cr": True})
    result = train(cfg, er50, tiny_eval, reference=pointmass_reference)
    assert not result.failed
    assert result.state.behavior is not None
    assert all(m.eta is not None and m.mmd is not None for m in result.step_metrics)
    assert result.reports[-1].q_separability_auc is not None


def test_non_finite_values_end_the_run(pointmass_reference, tiny_agent, tiny_eval):
    ds = make_dataset(np.full(64, 1e200))
    result = train(tiny_agent, ds, tiny_eval, reference=pointmass_reference)
    assert result.failed
    assert result.failure_step == 1
    assert result.reports == []
    assert result.failure_reason


def test_environment_mismatch_is_rejected(er50, tiny_agent):
    with pytest.raises(ConfigurationError):
        train(tiny_agent, er50, env_kind=EnvKind.PENDULUM)
