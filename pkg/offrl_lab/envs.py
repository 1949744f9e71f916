"""Deterministic continuous-control environments and scripted behavior policies

Two tasks stand in for the MuJoCo suite:

- `pointmass2d`: a unit mass on a plane, state `(px, py, vx, vy)`, action is the
  acceleration, goal at the origin.
- `pendulum`: an inverted pendulum, state `(cos theta, sin theta, omega)`, theta = 0 is
  upright, action is the torque.

Both use `dt = 0.05` and an action box of `[-1, 1]^action_dim`; episodes only end at the
horizon.
"""
import logging
from argparse import ArgumentParser
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional

import numpy as np
from pydantic import BaseModel

from offrl_lab.diffnet import Rng
from offrl_lab.exceptions import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

Actor = Callable[[np.ndarray], np.ndarray]


class EnvKind(str, Enum):
    """Available environments"""

    POINTMASS2D = "pointmass2d"
    PENDULUM = "pendulum"


class PolicyLevel(str, Enum):
    """Quality levels of the scripted behavior policies"""

    EXPERT = "expert"
    MEDIUM = "medium"
    RANDOM = "random"


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment"""

    kind: EnvKind
    state_dim: int
    action_dim: int
    episode_horizon: int
    reward_lipschitz: float
    """Exact sup over the action box of ||dr/da||"""
    dt: float = 0.05
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self) -> None:
        if self.episode_horizon < 1:
            raise ContractError("episode horizon must be at least 1")
        if self.reward_lipschitz <= 0:
            raise ContractError("reward Lipschitz constant must be positive")


# r = -||p||^2 - 0.01 ||a||^2  =>  ||dr/da|| = 0.02 ||a|| <= 0.02 sqrt(2) on [-1, 1]^2
POINTMASS_SPEC = EnvSpec(
    kind=EnvKind.POINTMASS2D,
    state_dim=4,
    action_dim=2,
    episode_horizon=100,
    reward_lipschitz=0.02 * float(np.sqrt(2.0)),
)
# r = -(theta^2 + 0.1 omega^2 + 0.001 a^2)  =>  ||dr/da|| = 0.002 |a| <= 0.002
PENDULUM_SPEC = EnvSpec(
    kind=EnvKind.PENDULUM,
    state_dim=3,
    action_dim=1,
    episode_horizon=200,
    reward_lipschitz=0.002,
)

ENV_SPECS = {EnvKind.POINTMASS2D: POINTMASS_SPEC, EnvKind.PENDULUM: PENDULUM_SPEC}

# (kp, kd) of the expert PD law; the medium level uses half of each
EXPERT_GAINS = {EnvKind.POINTMASS2D: (4.0, 4.0), EnvKind.PENDULUM: (4.0, 2.5)}
MEDIUM_NOISE = 0.3


@dataclass(frozen=True)
class StepResult:
    """Outcome of one environment step"""

    next_state: np.ndarray
    reward: float
    done: bool


class Env:
    """Seeded single-owner environment; subclasses define dynamics and reward"""

    spec: EnvSpec

    def __init__(self, seed: int = 0) -> None:
        """Create the environment, no episode is running until `reset`

        Parameters
        ----------
        seed : int, optional
            seed of the initial-state stream, by default 0
        """
        self.seed(seed)

    def seed(self, seed: int) -> None:
        """Restart the initial-state stream"""
        self._reset_gen = Rng(seed).child("reset").generator
        self._state: Optional[np.ndarray] = None
        self._t = 0
        self._done = True

    @property
    def state(self) -> Optional[np.ndarray]:
        """Current state, None before the first reset"""
        return None if self._state is None else self._state.copy()

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        """Project an action onto the box"""
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        return np.clip(action, self.spec.action_low, self.spec.action_high)

    def reset(self) -> np.ndarray:
        """Start a new episode from the initial-state distribution"""
        self._state = self._sample_initial(self._reset_gen)
        self._t = 0
        self._done = False
        return self._state.copy()

    def step(self, action: np.ndarray) -> StepResult:
        """Advance one step with the clipped action

        Raises
        ------
        ContractError
            if no episode is running (never reset, or horizon reached)
        """
        if self._done or self._state is None:
            raise ContractError("step called on a finished episode, call reset first")
        action = self.clip_action(action)
        reward = self.reward(self._state, action)
        self._state = self.transition(self._state, action)
        self._t += 1
        self._done = self._t >= self.spec.episode_horizon
        return StepResult(next_state=self._state.copy(), reward=reward, done=self._done)

    def _sample_initial(self, gen: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def transition(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Deterministic next state for an already clipped action"""
        raise NotImplementedError

    def reward(self, state: np.ndarray, action: np.ndarray) -> float:
        """Reward of taking `action` in `state`"""
        raise NotImplementedError


class PointMass2D(Env):
    """Point mass driven to the origin"""

    spec = POINTMASS_SPEC

    def _sample_initial(self, gen: np.random.Generator) -> np.ndarray:
        position = gen.uniform(-1.0, 1.0, size=2)
        return np.concatenate([position, np.zeros(2)])

    def transition(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        dt = self.spec.dt
        velocity = state[2:] + dt * action
        position = state[:2] + dt * velocity
        return np.concatenate([position, velocity])

    def reward(self, state: np.ndarray, action: np.ndarray) -> float:
        return float(-np.sum(state[:2] ** 2) - 0.01 * np.sum(action**2))


class Pendulum(Env):
    """Torque-limited inverted pendulum with g = l = m = 1"""

    spec = PENDULUM_SPEC
    gravity = 1.0
    length = 1.0
    mass = 1.0
    max_speed = 8.0

    @staticmethod
    def angle(state: np.ndarray) -> np.ndarray:
        """Angle in [-pi, pi] recovered from the (cos, sin) encoding"""
        return np.arctan2(state[..., 1], state[..., 0])

    def _sample_initial(self, gen: np.random.Generator) -> np.ndarray:
        theta = gen.uniform(-np.pi / 4, np.pi / 4)
        return np.array([np.cos(theta), np.sin(theta), 0.0])

    def transition(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        dt = self.spec.dt
        theta = self.angle(state)
        torque = float(action[0])
        acceleration = (self.gravity / self.length) * np.sin(theta) + torque / (
            self.mass * self.length**2
        )
        omega = np.clip(state[2] + dt * acceleration, -self.max_speed, self.max_speed)
        theta = theta + dt * omega
        return np.array([np.cos(theta), np.sin(theta), omega])

    def reward(self, state: np.ndarray, action: np.ndarray) -> float:
        theta = float(self.angle(state))
        return float(-(theta**2 + 0.1 * state[2] ** 2 + 0.001 * np.sum(action**2)))


def make_env(kind: EnvKind, seed: int = 0) -> Env:
    """Build an environment by kind

    Raises
    ------
    ConfigurationError
        for an unknown kind
    """
    try:
        kind = EnvKind(kind)
    except ValueError:
        raise ConfigurationError(f"unknown environment kind '{kind}'") from None
    if kind is EnvKind.POINTMASS2D:
        return PointMass2D(seed)
    return Pendulum(seed)


class ScriptedPolicy:
    """Hand-written behavior policy of a given quality level

    expert: clipped PD law toward the goal; medium: half the expert gains plus Gaussian
    noise (sigma 0.3), clipped; random: uniform over the action box.
    """

    def __init__(self, level: PolicyLevel, kind: EnvKind, seed: int = 0) -> None:
        """Create a policy for an environment kind

        Parameters
        ----------
        level : PolicyLevel
            expert, medium or random
        kind : EnvKind
            which environment the PD law is written for
        seed : int, optional
            seed of the noise stream (medium and random levels), by default 0
        """
        self.level = PolicyLevel(level)
        self.kind = EnvKind(kind)
        self.spec = ENV_SPECS[self.kind]
        kp, kd = EXPERT_GAINS[self.kind]
        if self.level is PolicyLevel.MEDIUM:
            kp, kd = kp / 2.0, kd / 2.0
        self.gains = (kp, kd)
        self.seed(seed)

    def seed(self, seed: int) -> None:
        """Restart the noise stream"""
        self._gen = Rng(seed).child("policy", self.level.value).generator

    def _pd(self, states: np.ndarray) -> np.ndarray:
        kp, kd = self.gains
        if self.kind is EnvKind.POINTMASS2D:
            return -kp * states[:, :2] - kd * states[:, 2:]
        theta = Pendulum.angle(states)
        return (-kp * theta - kd * states[:, 2])[:, None]

    def __call__(self, states: np.ndarray) -> np.ndarray:
        """Actions for a single state (1-D) or a batch of states (2-D)"""
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 1
        batch = np.atleast_2d(states)
        shape = (batch.shape[0], self.spec.action_dim)
        if self.level is PolicyLevel.RANDOM:
            actions = self._gen.uniform(self.spec.action_low, self.spec.action_high, size=shape)
        else:
            actions = self._pd(batch)
            if self.level is PolicyLevel.MEDIUM:
                actions = actions + self._gen.normal(0.0, MEDIUM_NOISE, size=shape)
            actions = np.clip(actions, self.spec.action_low, self.spec.action_high)
        return actions[0] if single else actions


def scripted_policy(level: PolicyLevel, kind: EnvKind, seed: int = 0) -> ScriptedPolicy:
    """Scripted behavior policy for `kind` at the given level"""
    return ScriptedPolicy(level, kind, seed)


def episode_returns(env: Env, actor: Actor, episodes: int) -> List[float]:
    """Undiscounted return of `episodes` consecutive episodes

    Parameters
    ----------
    env : Env
        environment, reset before every episode
    actor : Actor
        maps a single state to an action
    episodes : int
        number of episodes

    Returns
    -------
    List[float]
        one return per episode
    """
    returns = []
    for _ in range(episodes):
        state = env.reset()
        total, done = 0.0, False
        while not done:
            result = env.step(actor(state))
            total += result.reward
            state, done = result.next_state, result.done
        returns.append(total)
    return returns


class ReferenceReturns(BaseModel):
    """Normalization anchors of the score: average returns of random and expert play"""

    random_avg: float
    expert_avg: float
    episodes: int = 100
    seed: int = 0

    def normalize(self, raw_return: float) -> float:
        """100 * (return - random) / (expert - random)"""
        return 100.0 * (raw_return - self.random_avg) / (self.expert_avg - self.random_avg)


def reference_returns(kind: EnvKind, seed: int = 0, episodes: int = 100) -> ReferenceReturns:
    """Monte-Carlo averages of the random and expert scripted policies

    Both rollouts use `make_env(kind, seed)`, the same initial states an evaluation with
    the same seed sees.
    """
    expert = ScriptedPolicy(PolicyLevel.EXPERT, kind, seed)
    expert_avg = float(np.mean(episode_returns(make_env(kind, seed), expert, episodes)))
    random = ScriptedPolicy(PolicyLevel.RANDOM, kind, seed)
    random_avg = float(np.mean(episode_returns(make_env(kind, seed), random, episodes)))
    logger.info(f"{kind}: reference returns random={random_avg:.3f} expert={expert_avg:.3f}")
    return ReferenceReturns(
        random_avg=random_avg, expert_avg=expert_avg, episodes=episodes, seed=seed
    )


def main(args):  # noqa: D103
    refs = reference_returns(EnvKind(args.env), seed=args.seed, episodes=args.episodes)
    for level in PolicyLevel:
        policy = ScriptedPolicy(level, args.env, args.seed)
        returns = episode_returns(make_env(args.env, args.seed), policy, args.episodes)
        print(
            f"{level.value:>7}: return {np.mean(returns):9.3f}  "
            f"normalized {refs.normalize(float(np.mean(returns))):7.2f}"
        )


if __name__ == "__main__":
    parser = ArgumentParser(description="Print scripted-policy returns for an environment")
    parser.add_argument(
        "-e", "--env", choices=[k.value for k in EnvKind], default=EnvKind.POINTMASS2D.value
    )
    parser.add_argument("-s", "--seed", type=int, default=0)
    parser.add_argument("-n", "--episodes", type=int, default=100)

    args = parser.parse_args()
    main(args)
