"""One gradient step of each learner: critic regression with the optional gradient
penalty, the TD3+BC and BEAR actor steps with the optional constraint relaxation, and
plain behavior cloning.

Every update takes an `AgentState` and returns a new one together with its metrics;
nothing is mutated in place.
"""
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from offrl_lab.agents.config import LOG_ETA_MAX, LOG_ETA_MIN, AgentConfig, CRMode, GPSampling
from offrl_lab.agents.state import AgentState
from offrl_lab.datasets import Dataset, Normalizer
from offrl_lab.diffnet import (
    ParamGrads,
    Rng,
    adam_step,
    backward_params,
    forward,
    gp_value_and_param_grad,
    polyak_update,
    value_and_input_gradient,
)
from offrl_lab.divergences import Kernel, batched_mmd_squared, behavior_sample
from offrl_lab.exceptions import ConfigurationError, NumericalError

LAMBDA_FLOOR = 1e-6


@dataclass(frozen=True)
class Batch:
    """Minibatch with states already normalized; `raw_states` keeps the originals"""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    raw_states: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


def make_batch(ds: Dataset, indices: np.ndarray, normalizer: Optional[Normalizer] = None) -> Batch:
    """Gather rows of a dataset into a batch"""
    raw = ds.states[indices]
    next_raw = ds.next_states[indices]
    if normalizer is not None:
        states, next_states = normalizer.apply(raw), normalizer.apply(next_raw)
    else:
        states, next_states = raw, next_raw
    return Batch(
        states=states,
        actions=ds.actions[indices],
        rewards=ds.rewards[indices],
        next_states=next_states,
        dones=ds.dones[indices].astype(np.float64),
        raw_states=raw,
    )


@dataclass
class StepMetrics:
    """What one training step measured; fields an algorithm does not produce stay None"""

    step: int = 0
    critic_loss: Optional[float] = None
    actor_loss: Optional[float] = None
    gp_penalty: Optional[float] = None
    mean_abs_q: Optional[float] = None
    mean_weight: Optional[float] = None
    mmd: Optional[float] = None
    eta: Optional[float] = None
    grad_norm_p99: Optional[float] = None

    def merge(self, other: "StepMetrics") -> "StepMetrics":
        """Fields of `other` that are set win"""
        merged = asdict(self)
        merged.update({k: v for k, v in asdict(other).items() if v is not None and k != "step"})
        return StepMetrics(**merged)

    def as_row(self) -> Dict[str, Optional[float]]:
        return asdict(self)

    def check_finite(self) -> None:
        """Raise NumericalError naming the first non-finite field"""
        for key, value in asdict(self).items():
            if value is not None and not np.isfinite(value):
                raise NumericalError(f"{key} is not finite", step=self.step)


@dataclass
class UpdateStreams:
    """Separate random streams, so enabling one consumer never shifts another"""

    batches: np.random.Generator
    target_noise: np.random.Generator
    gp: np.random.Generator
    policy: np.random.Generator

    @classmethod
    def from_rng(cls, rng: Rng) -> "UpdateStreams":
        return cls(
            batches=rng.child("batches").generator,
            target_noise=rng.child("target_noise").generator,
            gp=rng.child("gp").generator,
            policy=rng.child("policy").generator,
        )


def critic_targets(
    batch: Batch, state: AgentState, cfg: AgentConfig, noise_gen: np.random.Generator
) -> np.ndarray:
    """Clipped double-Q targets with target-policy smoothing

    y = r + gamma * (1 - done) * min(Q1', Q2')(s', clip(pi'(s') + clip(noise)))

    Raises
    ------
    NumericalError
        if a target is not finite, naming the first offending row
    """
    spec = state.env_spec
    next_actions = state.policy_actions(batch.next_states, target=True)
    noise = noise_gen.normal(0.0, cfg.policy_noise, size=next_actions.shape)
    noise = np.clip(noise, -cfg.noise_clip, cfg.noise_clip)
    next_actions = np.clip(next_actions + noise, spec.action_low, spec.action_high)
    q1, q2 = state.q_values(batch.next_states, next_actions, target=True)
    targets = batch.rewards + cfg.gamma * (1.0 - batch.dones) * np.minimum(q1, q2)
    bad = np.flatnonzero(~np.isfinite(targets))
    if bad.size:
        raise NumericalError("non-finite critic target", row=int(bad[0]), step=state.step)
    return targets


def _gp_actions(
    batch: Batch, state: AgentState, cfg: AgentConfig, gen: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    reps = cfg.gp_expansion
    states = np.tile(batch.states, (reps, 1))
    spec = state.env_spec
    if cfg.gp_sampling is GPSampling.RANDOM:
        actions = gen.uniform(spec.action_low, spec.action_high, size=(len(states), spec.action_dim))
    elif cfg.gp_sampling is GPSampling.DATASET:
        actions = np.tile(batch.actions, (reps, 1))
    else:
        actions = np.tile(state.policy_actions(batch.states), (reps, 1))
    return states, actions


def gp_active(cfg: AgentConfig, step: int) -> bool:
    """True on the steps that carry the gradient penalty"""
    return cfg.use_gp and cfg.lambda_gp > 0.0 and step % cfg.gp_interval == 0


def critic_update(
    batch: Batch, state: AgentState, cfg: AgentConfig, streams: UpdateStreams
) -> Tuple[AgentState, StepMetrics]:
    """Twin-critic regression plus, on penalty steps, the weighted action-gradient penalty

    Both critics take one optimizer step; both critic targets are then Polyak-averaged.
    """
    targets = critic_targets(batch, state, cfg, streams.target_noise)
    inputs = np.hstack([batch.states, batch.actions])
    batch_size = len(batch)

    use_penalty = gp_active(cfg, state.step)
    if use_penalty:
        gp_states, gp_actions = _gp_actions(batch, state, cfg, streams.gp)

    losses, penalties, q1_values = [], [], None
    new_critics, new_opts = [], []
    for critic, opt in ((state.critic1, state.critic1_opt), (state.critic2, state.critic2_opt)):
        outputs, tape = forward(critic, inputs)
        q = outputs[:, 0]
        if q1_values is None:
            q1_values = q
        residual = q - targets
        losses.append(float(np.mean(residual * residual)))
        grads = backward_params(critic, tape, (2.0 / batch_size) * residual[:, None])
        if use_penalty:
            penalty, gp_grads = gp_value_and_param_grad(critic, gp_states, gp_actions, cfg.gp_threshold)
            penalties.append(penalty)
            grads = grads + gp_grads.scale(cfg.lambda_gp)
        critic, opt = adam_step(opt, critic, grads)
        new_critics.append(critic)
        new_opts.append(opt)

    critic1, critic2 = new_critics
    new_state = state.evolve(
        critic1=critic1,
        critic2=critic2,
        critic1_opt=new_opts[0],
        critic2_opt=new_opts[1],
        critic1_target=polyak_update(state.critic1_target, critic1, cfg.tau),
        critic2_target=polyak_update(state.critic2_target, critic2, cfg.tau),
    )
    metrics = StepMetrics(
        step=state.step,
        critic_loss=losses[0] + losses[1],
        gp_penalty=sum(penalties) if use_penalty else 0.0,
        mean_abs_q=float(np.mean(np.abs(q1_values))),
    )
    return new_state, metrics


def minmax_weights(q: np.ndarray) -> np.ndarray:
    """(q - min q) / (max q - min q); all ones when q is constant"""
    q = np.asarray(q, dtype=np.float64)
    low, high = q.min(), q.max()
    if high == low:
        return np.ones_like(q)
    return (q - low) / (high - low)


def relaxation_weights(q: np.ndarray, mode: CRMode = CRMode.MINMAX) -> np.ndarray:
    """Per-row constraint weights from mean twin-Q values"""
    if CRMode(mode) is CRMode.RAW:
        return np.asarray(q, dtype=np.float64).copy()
    return minmax_weights(q)


def cr_weights(state: AgentState, batch: Batch, mode: CRMode = CRMode.MINMAX) -> np.ndarray:
    """Relaxation weights of the batch's dataset actions

    W is a constant of the actor step: no gradient is taken through it.
    """
    q1, q2 = state.q_values(batch.states, batch.actions)
    return relaxation_weights(0.5 * (q1 + q2), mode)


def td3bc_lambda(alpha: float, q_data: np.ndarray) -> float:
    """alpha / mean |Q1(s, a)| over dataset actions, the denominator floored"""
    return alpha / max(float(np.mean(np.abs(q_data))), LAMBDA_FLOOR)


def _p99(norms: np.ndarray) -> float:
    ordered = np.sort(norms)
    rank = max(int(np.ceil(0.99 * len(ordered))), 1)
    return float(ordered[rank - 1])


def actor_update_td3bc(
    batch: Batch, state: AgentState, cfg: AgentConfig
) -> Tuple[AgentState, StepMetrics]:
    """Maximize lambda * Q1(s, pi(s)) - mean_i w_i |pi(s_i) - a_i|^2

    lambda = alpha / mean |Q1(s, a)| over the batch's dataset actions; w is 1 or the
    relaxation weight.
    """
    batch_size = len(batch)
    state_dim = state.env_spec.state_dim
    scale = state.env_spec.action_high
    outputs, tape = state.actor_forward(batch.states)
    actions = scale * outputs

    q_pi, grad_inputs = value_and_input_gradient(state.critic1, np.hstack([batch.states, actions]))
    grad_q = grad_inputs[:, state_dim:]
    q_data, _ = forward(state.critic1, np.hstack([batch.states, batch.actions]))
    lam = td3bc_lambda(cfg.alpha, q_data)

    weights = cr_weights(state, batch, cfg.cr_mode) if cfg.use_cr else np.ones(batch_size)
    diff = actions - batch.actions
    bc_terms = np.sum(diff * diff, axis=1)
    loss = -lam * float(np.mean(q_pi)) + float(np.mean(weights * bc_terms))

    grad_actions = (-lam * grad_q + 2.0 * weights[:, None] * diff) / batch_size
    grads = backward_params(state.actor, tape, scale * grad_actions)
    actor, actor_opt = adam_step(state.actor_opt, state.actor, grads)
    new_state = state.evolve(
        actor=actor,
        actor_opt=actor_opt,
        actor_target=polyak_update(state.actor_target, actor, cfg.tau),
    )
    metrics = StepMetrics(
        step=state.step,
        actor_loss=loss,
        mean_weight=float(np.mean(weights)),
        grad_norm_p99=_p99(np.linalg.norm(grad_q, axis=1)),
    )
    return new_state, metrics


def actor_update_bear(
    batch: Batch, state: AgentState, cfg: AgentConfig, gen: np.random.Generator
) -> Tuple[AgentState, StepMetrics]:
    """Lagrangian step of the MMD-constrained Gaussian actor, then dual ascent on log eta

    The actor minimizes -mean Q1(s, a~pi) + eta * mean_i (MMD^2_i - epsilon) * v_i, where
    v_i is 1 or the relaxation weight of the behavior samples at s_i. The multiplier then
    moves by dual_lr * (mean_i MMD^2_i v_i - epsilon) in log space.

    Raises
    ------
    ConfigurationError
        if the state carries no behavior model
    """
    if state.behavior is None:
        raise ConfigurationError("the BEAR actor step needs a fitted behavior model")
    spec = state.env_spec
    batch_size, m, dim = len(batch), cfg.mmd_samples, spec.action_dim

    outputs, tape = state.actor_forward(batch.states)
    head = state.policy_head(outputs)
    noise = gen.standard_normal((batch_size, m, dim))
    unclipped = head.mean[:, None, :] + head.std[:, None, :] * noise
    samples = np.clip(unclipped, spec.action_low, spec.action_high)
    inside = (unclipped == samples).astype(np.float64)

    behavior_actions = behavior_sample(state.behavior, batch.raw_states, m, gen)
    kernel = Kernel(cfg.kernel, cfg.kernel_bandwidth)
    mmd, grad_mmd = batched_mmd_squared(behavior_actions, samples, kernel)

    repeated_states = np.repeat(batch.states, m, axis=0)
    if cfg.use_cr:
        q1, q2 = state.q_values(repeated_states, behavior_actions.reshape(-1, dim))
        q_behavior = (0.5 * (q1 + q2)).reshape(batch_size, m).mean(axis=1)
        weights = relaxation_weights(q_behavior, cfg.cr_mode)
    else:
        weights = np.ones(batch_size)

    q_pi, grad_inputs = value_and_input_gradient(
        state.critic1, np.hstack([repeated_states, samples.reshape(-1, dim)])
    )
    grad_q = grad_inputs[:, spec.state_dim:].reshape(batch_size, m, dim)
    eta = state.eta
    loss = -float(np.mean(q_pi)) + eta * float(np.mean((mmd - cfg.epsilon) * weights))

    grad_samples = -grad_q / (batch_size * m) + (eta / batch_size) * weights[:, None, None] * grad_mmd
    grad_samples = grad_samples * inside
    grad_mean = grad_samples.sum(axis=1)
    grad_log_std = (grad_samples * head.std[:, None, :] * noise).sum(axis=1)
    grads = backward_params(state.actor, tape, head.raw_grad(grad_mean, grad_log_std))
    actor, actor_opt = adam_step(state.actor_opt, state.actor, grads)

    slack = float(np.mean(mmd * weights)) - cfg.epsilon
    log_eta = float(np.clip(state.log_eta + cfg.dual_lr * slack, LOG_ETA_MIN, LOG_ETA_MAX))
    new_state = state.evolve(
        actor=actor,
        actor_opt=actor_opt,
        actor_target=polyak_update(state.actor_target, actor, cfg.tau),
        log_eta=log_eta,
    )
    metrics = StepMetrics(
        step=state.step,
        actor_loss=loss,
        mean_weight=float(np.mean(weights)),
        mmd=float(np.mean(mmd)),
        eta=float(np.exp(log_eta)),
        grad_norm_p99=_p99(np.linalg.norm(grad_q.reshape(-1, dim), axis=1)),
    )
    return new_state, metrics


def bc_update(batch: Batch, state: AgentState) -> Tuple[AgentState, StepMetrics]:
    """Minimize mean |pi(s) - a|^2"""
    batch_size = len(batch)
    scale = state.env_spec.action_high
    outputs, tape = state.actor_forward(batch.states)
    diff = scale * outputs - batch.actions
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads: ParamGrads = backward_params(state.actor, tape, scale * (2.0 / batch_size) * diff)
    actor, actor_opt = adam_step(state.actor_opt, state.actor, grads)
    return state.evolve(actor=actor, actor_opt=actor_opt), StepMetrics(step=state.step, actor_loss=loss)
