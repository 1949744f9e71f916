"""Hyperparameters of every agent the lab trains"""
import math
from enum import Enum
from typing import List

from pydantic import Field, validator

from offrl_lab.config import BaseSettings
from offrl_lab.diffnet import Activation
from offrl_lab.divergences import BehaviorConfig, KernelKind


class Algorithm(str, Enum):
    """Backbone learner"""

    BC = "bc"
    TD3BC = "td3bc"
    BEAR = "bear"


class GPSampling(str, Enum):
    """Where the actions of the gradient penalty come from"""

    DATASET = "dataset"
    POLICY = "policy"
    RANDOM = "random"


class CRMode(str, Enum):
    """How the critic weight of the relaxed constraint is formed

    minmax: batch min-max normalized mean twin-Q; raw: the detached mean twin-Q itself.
    """

    MINMAX = "minmax"
    RAW = "raw"


class AgentConfig(BaseSettings):
    """Everything a training run of one agent needs besides the data"""

    algorithm: Algorithm = Algorithm.TD3BC
    """Backbone: bc, td3bc or bear"""
    use_gp: bool = False
    """Add the one-sided action-gradient penalty to the critic loss"""
    use_cr: bool = False
    """Weight the policy constraint per transition by the critic"""
    cr_mode: CRMode = CRMode.MINMAX
    """Form of the relaxation weight"""

    gamma: float = Field(0.99, ge=0.0, lt=1.0)
    """Discount factor"""
    alpha: float = Field(2.5, gt=0.0)
    """TD3+BC strength of the Q term relative to the behavior-cloning term"""
    lambda_gp: float = Field(1.0, ge=0.0)
    """Weight of the gradient penalty"""
    gp_interval: int = Field(5, ge=1)
    """The penalty is added on steps divisible by this interval"""
    gp_threshold: float = Field(1.0, gt=0.0)
    """Hinge threshold on the action-gradient norm"""
    gp_sampling: GPSampling = GPSampling.RANDOM
    """Action source for the penalty"""
    gp_expansion: int = Field(16, ge=1)
    """Each batch state is repeated this many times for the penalty"""

    epsilon: float = Field(0.05, gt=0.0)
    """MMD threshold of the BEAR constraint"""
    kernel: KernelKind = KernelKind.LAPLACIAN
    """MMD kernel"""
    kernel_bandwidth: float = Field(1.0, gt=0.0)
    """MMD kernel bandwidth"""
    mmd_samples: int = Field(4, ge=1)
    """Policy and behavior samples per state in the MMD estimate"""
    dual_lr: float = Field(1e-3, gt=0.0)
    """Step size of the log-multiplier ascent"""
    initial_log_eta: float = 0.0
    """Starting value of the log Lagrange multiplier"""
    behavior: BehaviorConfig = BehaviorConfig()
    """Behavior-model fit used by BEAR"""

    tau: float = Field(0.005, gt=0.0, le=1.0)
    """Polyak rate of the target networks"""
    policy_noise: float = Field(0.2, ge=0.0)
    """Std of the target-policy smoothing noise"""
    noise_clip: float = Field(0.5, ge=0.0)
    """Clip of the target-policy smoothing noise"""
    policy_delay: int = Field(2, ge=1)
    """The TD3+BC actor is updated on steps divisible by this delay"""

    batch_size: int = Field(256, ge=1)
    """Minibatch size"""
    total_steps: int = Field(50000, ge=1)
    """Number of gradient steps"""
    eval_interval: int = Field(5000, ge=1)
    """Evaluate every this many steps"""
    log_interval: int = Field(100, ge=1)
    """Per-step metrics are kept every this many steps"""
    seed: int = 0
    """Seed of initialization, minibatches and noise"""

    hidden_dims: List[int] = [64, 64]
    """Hidden widths of actor and critics"""
    activation: Activation = Activation.RELU
    """Hidden activation of actor and critics"""
    actor_lr: float = Field(3e-4, gt=0.0)
    """Actor learning rate"""
    critic_lr: float = Field(3e-4, gt=0.0)
    """Critic learning rate"""

    @validator("hidden_dims")
    def _non_empty(cls, value: List[int]) -> List[int]:  # noqa: N805
        if not value or min(value) < 1:
            raise ValueError("hidden_dims needs at least one positive width")
        return value

    @validator("activation")
    def _hidden_activation(cls, value: Activation) -> Activation:  # noqa: N805
        if value is Activation.IDENTITY:
            raise ValueError("hidden layers need a non-linear activation")
        return value

    @property
    def uses_critics(self) -> bool:
        """False for pure behavior cloning"""
        return self.algorithm is not Algorithm.BC

    @property
    def variant(self) -> str:
        """Short label: plain, gp, cr or gp_cr"""
        if self.use_gp and self.use_cr:
            return "gp_cr"
        if self.use_gp:
            return "gp"
        if self.use_cr:
            return "cr"
        return "plain"


# log-space bounds of the Lagrange multiplier
LOG_ETA_MIN = math.log(1e-6)
LOG_ETA_MAX = math.log(1e6)
