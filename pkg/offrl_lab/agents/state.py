"""Networks, optimizer states and counters of one agent"""
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from offrl_lab.agents.config import LOG_ETA_MAX, LOG_ETA_MIN, AgentConfig, Algorithm
from offrl_lab.datasets import Normalizer
from offrl_lab.diffnet import Activation, MlpParams, MlpSpec, OptimState, Rng, Tape, forward, mlp_init
from offrl_lab.divergences import BehaviorModel, GaussianHead, gaussian_head
from offrl_lab.envs import EnvSpec
from offrl_lab.exceptions import ConfigurationError, ShapeError


@dataclass
class AgentState:
    """Actor, twin critics, their targets and optimizers

    Critic fields are None for pure behavior cloning. The BEAR actor outputs a diagonal
    Gaussian (`2 * action_dim` raw outputs); the other actors output tanh-squashed actions.
    The Lagrange multiplier is kept as its log so it can never turn negative.
    """

    algorithm: Algorithm
    env_spec: EnvSpec
    actor: MlpParams
    actor_target: MlpParams
    actor_opt: OptimState
    critic1: Optional[MlpParams] = None
    critic2: Optional[MlpParams] = None
    critic1_target: Optional[MlpParams] = None
    critic2_target: Optional[MlpParams] = None
    critic1_opt: Optional[OptimState] = None
    critic2_opt: Optional[OptimState] = None
    normalizer: Optional[Normalizer] = None
    behavior: Optional[BehaviorModel] = None
    log_eta: float = 0.0
    step: int = 0

    def __post_init__(self) -> None:
        for online, target in (
            (self.actor, self.actor_target),
            (self.critic1, self.critic1_target),
            (self.critic2, self.critic2_target),
        ):
            if (online is None) != (target is None) or (online is not None and online.spec != target.spec):
                raise ShapeError("target networks must mirror their online networks")
        self.log_eta = float(np.clip(self.log_eta, LOG_ETA_MIN, LOG_ETA_MAX))

    @property
    def eta(self) -> float:
        """Lagrange multiplier of the BEAR constraint"""
        return math.exp(self.log_eta)

    @property
    def has_critics(self) -> bool:
        return self.critic1 is not None

    @property
    def critics(self) -> Tuple[MlpParams, MlpParams]:
        """Online twin critics"""
        if self.critic1 is None or self.critic2 is None:
            raise ConfigurationError(f"{self.algorithm.value} agents have no critics")
        return self.critic1, self.critic2

    def normalize(self, states: np.ndarray) -> np.ndarray:
        """Map raw states into the networks' input space"""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return states if self.normalizer is None else self.normalizer.apply(states)

    def actor_forward(self, states: np.ndarray, target: bool = False) -> Tuple[np.ndarray, Tape]:
        """Raw actor outputs on normalized states"""
        return forward(self.actor_target if target else self.actor, states)

    def policy_head(self, outputs: np.ndarray) -> GaussianHead:
        """Gaussian read of BEAR actor outputs"""
        return gaussian_head(outputs, self.env_spec.action_dim)

    def policy_actions(self, states: np.ndarray, target: bool = False) -> np.ndarray:
        """Deterministic actions at normalized states (the Gaussian mean for BEAR)"""
        outputs, _ = self.actor_forward(states, target=target)
        if self.algorithm is Algorithm.BEAR:
            outputs = self.policy_head(outputs).mean
        return self.env_spec.action_high * outputs

    def act(self, states: np.ndarray) -> np.ndarray:
        """Deterministic actions at raw states; a single state gives a single action"""
        single = np.ndim(states) == 1
        actions = self.policy_actions(self.normalize(states))
        return actions[0] if single else actions

    def q_values(
        self, states: np.ndarray, actions: np.ndarray, target: bool = False
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Twin critic values `(B,)` at normalized states"""
        if target:
            q1, q2 = self.critic1_target, self.critic2_target
        else:
            q1, q2 = self.critics
        inputs = np.hstack([states, actions])
        return forward(q1, inputs)[0][:, 0], forward(q2, inputs)[0][:, 0]

    def evolve(self, **changes) -> "AgentState":
        """Copy with some fields replaced"""
        return replace(self, **changes)


def actor_spec(cfg: AgentConfig, env_spec: EnvSpec) -> MlpSpec:
    """Architecture of the actor for the configured algorithm"""
    if cfg.algorithm is Algorithm.BEAR:
        return MlpSpec(
            input_dim=env_spec.state_dim,
            hidden_dims=tuple(cfg.hidden_dims),
            output_dim=2 * env_spec.action_dim,
            hidden_activation=cfg.activation,
        )
    return MlpSpec(
        input_dim=env_spec.state_dim,
        hidden_dims=tuple(cfg.hidden_dims),
        output_dim=env_spec.action_dim,
        hidden_activation=cfg.activation,
        output_activation=Activation.TANH,
    )


def critic_spec(cfg: AgentConfig, env_spec: EnvSpec) -> MlpSpec:
    """Scalar critic over concatenated `(s, a)`"""
    return MlpSpec(
        input_dim=env_spec.state_dim + env_spec.action_dim,
        hidden_dims=tuple(cfg.hidden_dims),
        output_dim=1,
        hidden_activation=cfg.activation,
    )


def init_agent_state(
    cfg: AgentConfig,
    env_spec: EnvSpec,
    rng: Rng,
    normalizer: Optional[Normalizer] = None,
    behavior: Optional[BehaviorModel] = None,
) -> AgentState:
    """Fresh networks for `cfg`; targets start as copies of the online networks

    Raises
    ------
    ConfigurationError
        if a BEAR agent is created without a behavior model
    """
    if cfg.algorithm is Algorithm.BEAR and behavior is None:
        raise ConfigurationError("BEAR needs a fitted behavior model")
    actor = mlp_init(actor_spec(cfg, env_spec), rng.child("actor"))
    state = AgentState(
        algorithm=cfg.algorithm,
        env_spec=env_spec,
        actor=actor,
        actor_target=actor.copy(),
        actor_opt=OptimState.create(actor, lr=cfg.actor_lr),
        normalizer=normalizer,
        behavior=behavior,
        log_eta=cfg.initial_log_eta,
    )
    if cfg.uses_critics:
        critic1 = mlp_init(critic_spec(cfg, env_spec), rng.child("critic1"))
        critic2 = mlp_init(critic_spec(cfg, env_spec), rng.child("critic2"))
        state = state.evolve(
            critic1=critic1,
            critic2=critic2,
            critic1_target=critic1.copy(),
            critic2_target=critic2.copy(),
            critic1_opt=OptimState.create(critic1, lr=cfg.critic_lr),
            critic2_opt=OptimState.create(critic2, lr=cfg.critic_lr),
        )
    return state
