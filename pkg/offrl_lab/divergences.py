"""Kernel MMD between action sample sets and a Gaussian model of the behavior policy"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import Field
from scipy.spatial.distance import cdist
from tqdm import tqdm

from offrl_lab.config import BaseSettings
from offrl_lab.datasets import Dataset, Normalizer, sample_batch
from offrl_lab.diffnet import (
    Activation,
    MlpParams,
    MlpSpec,
    OptimState,
    Rng,
    adam_step,
    backward_params,
    forward,
    mlp_init,
)
from offrl_lab.exceptions import ConfigurationError, ContractError, ShapeError

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class KernelKind(str, Enum):
    """Shape of the MMD kernel"""

    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class Kernel:
    """gaussian: exp(-|x - y|_2^2 / (2 sigma^2)); laplacian: exp(-|x - y|_1 / sigma)"""

    kind: KernelKind = KernelKind.LAPLACIAN
    bandwidth: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not self.bandwidth > 0:
            raise ContractError(f"kernel bandwidth must be positive, got {self.bandwidth}")


def kernel_eval(k: Kernel, x: np.ndarray, y: np.ndarray) -> float:
    """Kernel value of a single pair of vectors"""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ShapeError(f"kernel arguments have shapes {x.shape} and {y.shape}")
    if k.kind is KernelKind.GAUSSIAN:
        return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * k.bandwidth**2)))
    return float(np.exp(-np.sum(np.abs(x - y)) / k.bandwidth))


def kernel_matrix(k: Kernel, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """All pairwise kernel values between the rows of `xs` and `ys`"""
    if k.kind is KernelKind.GAUSSIAN:
        return np.exp(-cdist(xs, ys, "sqeuclidean") / (2.0 * k.bandwidth**2))
    return np.exp(-cdist(xs, ys, "cityblock") / k.bandwidth)


def _as_sample_set(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ShapeError(f"a sample set must be a non-empty n x d array, got shape {samples.shape}")
    return samples


def mmd_squared(xs: np.ndarray, ys: np.ndarray, k: Kernel) -> float:
    """Biased (V-statistic) squared MMD between two sample sets

    Parameters
    ----------
    xs : np.ndarray
        `n x d` samples (a 1-D array is read as `n` scalar samples)
    ys : np.ndarray
        `m x d` samples
    k : Kernel
        kernel

    Returns
    -------
    float
        mean k(x, x') + mean k(y, y') - 2 mean k(x, y), never negative

    Raises
    ------
    ShapeError
        if either set is empty or the dimensions differ
    """
    xs, ys = _as_sample_set(xs), _as_sample_set(ys)
    if xs.shape[1] != ys.shape[1]:
        raise ShapeError(f"sample dimensions differ: {xs.shape[1]} vs {ys.shape[1]}")
    value = (
        kernel_matrix(k, xs, xs).mean()
        + kernel_matrix(k, ys, ys).mean()
        - 2.0 * kernel_matrix(k, xs, ys).mean()
    )
    return max(float(value), 0.0)


def _batched_kernel(k: Kernel, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Kernel values `(B, n, m)` and d k(a_i, b_j) / d b_j as `(B, n, m, d)`"""
    diff = a[:, :, None, :] - b[:, None, :, :]
    if k.kind is KernelKind.GAUSSIAN:
        values = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * k.bandwidth**2))
        grad = values[..., None] * diff / k.bandwidth**2
    else:
        values = np.exp(-np.sum(np.abs(diff), axis=-1) / k.bandwidth)
        grad = values[..., None] * np.sign(diff) / k.bandwidth
    return values, grad


def batched_mmd_squared(
    xs: np.ndarray, ys: np.ndarray, k: Kernel
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-state squared MMD and its gradient with respect to the second sample set

    Parameters
    ----------
    xs : np.ndarray
        `B x n x d` reference samples (behavior actions)
    ys : np.ndarray
        `B x m x d` samples the gradient is taken for (policy actions)
    k : Kernel
        kernel

    Returns
    -------
    Tuple[np.ndarray, np.ndarray]
        values `(B,)`, clamped at 0, and gradients `(B, m, d)` of the unclamped values
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 3 or ys.ndim != 3 or xs.shape[0] != ys.shape[0] or xs.shape[2] != ys.shape[2]:
        raise ShapeError(f"cannot compare sample batches of shapes {xs.shape} and {ys.shape}")
    n, m = xs.shape[1], ys.shape[1]
    k_xx, _ = _batched_kernel(k, xs, xs)
    k_yy, dk_yy = _batched_kernel(k, ys, ys)
    k_xy, dk_xy = _batched_kernel(k, xs, ys)
    values = k_xx.mean(axis=(1, 2)) + k_yy.mean(axis=(1, 2)) - 2.0 * k_xy.mean(axis=(1, 2))
    grad = (2.0 / (m * m)) * dk_yy.sum(axis=1) - (2.0 / (n * m)) * dk_xy.sum(axis=1)
    return np.maximum(values, 0.0), grad


class BehaviorConfig(BaseSettings):
    """Settings of the behavior-model fit"""

    hidden_dims: List[int] = [64, 64]
    """Hidden layer widths of the behavior network"""
    steps: int = Field(2000, ge=1)
    """Optimizer steps of the maximum-likelihood fit"""
    batch_size: int = Field(256, ge=1)
    """Minibatch size, sampled uniformly with replacement"""
    lr: float = Field(1e-3, gt=0)
    """Learning rate of the fit"""


@dataclass(frozen=True)
class GaussianHead:
    """Diagonal Gaussian read off a network output of width `2 * action_dim`"""

    mean: np.ndarray
    log_std: np.ndarray
    mean_slope: np.ndarray
    """d mean / d raw mean output (tanh derivative)"""
    log_std_mask: np.ndarray
    """1 where the log-std clamp is inactive"""

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def raw_grad(self, grad_mean: np.ndarray, grad_log_std: np.ndarray) -> np.ndarray:
        """Chain gradients on (mean, log-std) back to the raw network output"""
        return np.hstack([grad_mean * self.mean_slope, grad_log_std * self.log_std_mask])


def gaussian_head(outputs: np.ndarray, action_dim: int) -> GaussianHead:
    """Split raw outputs into a tanh-squashed mean and a clamped log-std"""
    if outputs.shape[1] != 2 * action_dim:
        raise ShapeError(f"expected {2 * action_dim} outputs, got {outputs.shape[1]}")
    mean = np.tanh(outputs[:, :action_dim])
    raw_log_std = outputs[:, action_dim:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    mask = ((raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)).astype(np.float64)
    return GaussianHead(mean=mean, log_std=log_std, mean_slope=1.0 - mean * mean, log_std_mask=mask)


def behavior_nll(head: GaussianHead, actions: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean negative log-likelihood of `actions` and its gradients on mean and log-std"""
    batch_size = actions.shape[0]
    z = (actions - head.mean) / head.std
    nll = float(np.mean(np.sum(0.5 * z * z + head.log_std + _HALF_LOG_2PI, axis=1)))
    grad_mean = -z / head.std / batch_size
    grad_log_std = (1.0 - z * z) / batch_size
    return nll, grad_mean, grad_log_std


@dataclass
class BehaviorModel:
    """Fitted Gaussian behavior policy; frozen once returned by `behavior_fit`"""

    params: MlpParams
    action_dim: int
    action_low: float = -1.0
    action_high: float = 1.0
    normalizer: Optional[Normalizer] = None
    nll_history: List[float] = field(default_factory=list)

    def head(self, states: np.ndarray) -> GaussianHead:
        """Gaussian parameters at raw (unnormalized) states"""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.normalizer is not None:
            states = self.normalizer.apply(states)
        outputs, _ = forward(self.params, states)
        return gaussian_head(outputs, self.action_dim)


def behavior_fit(
    ds: Dataset,
    config: BehaviorConfig,
    rng: Rng,
    normalizer: Optional[Normalizer] = None,
    progress: bool = False,
) -> BehaviorModel:
    """Maximum-likelihood fit of a Gaussian policy to the dataset's (s, a) pairs

    Parameters
    ----------
    ds : Dataset
        training data
    config : BehaviorConfig
        network and optimizer settings
    rng : Rng
        stream for initialization and minibatches
    normalizer : Optional[Normalizer], optional
        applied to states before the network, by default None
    progress : bool, optional
        show a progress bar, by default False

    Returns
    -------
    BehaviorModel
        fitted model with the per-step training NLL in `nll_history`

    Raises
    ------
    ConfigurationError
        if the dataset is empty
    """
    if len(ds) == 0:
        raise ConfigurationError("cannot fit a behavior model on an empty dataset")
    env_spec = ds.env_spec
    spec = MlpSpec(
        input_dim=env_spec.state_dim,
        hidden_dims=tuple(config.hidden_dims),
        output_dim=2 * env_spec.action_dim,
        hidden_activation=Activation.RELU,
    )
    params = mlp_init(spec, rng.child("init"))
    opt = OptimState.create(params, lr=config.lr)
    batches = rng.child("batches").generator
    states = ds.states if normalizer is None else normalizer.apply(ds.states)

    history = []
    for _ in tqdm(range(config.steps), desc="behavior fit", disable=not progress):
        idx = sample_batch(len(ds), config.batch_size, batches)
        outputs, tape = forward(params, states[idx])
        head = gaussian_head(outputs, env_spec.action_dim)
        nll, grad_mean, grad_log_std = behavior_nll(head, ds.actions[idx])
        history.append(nll)
        grads = backward_params(params, tape, head.raw_grad(grad_mean, grad_log_std))
        params, opt = adam_step(opt, params, grads)
    logger.info(f"Behavior model fitted: NLL {history[0]:.3f} -> {history[-1]:.3f}")
    return BehaviorModel(
        params=params,
        action_dim=env_spec.action_dim,
        action_low=env_spec.action_low,
        action_high=env_spec.action_high,
        normalizer=normalizer,
        nll_history=history,
    )


def behavior_sample(
    model: BehaviorModel, states: np.ndarray, m: int, gen: np.random.Generator
) -> np.ndarray:
    """Reparameterized draws `mean + std * eps`, clipped to the action box

    Returns
    -------
    np.ndarray
        `B x m x action_dim`
    """
    if m < 1:
        raise ContractError(f"need at least one sample per state, got {m}")
    head = model.head(states)
    noise = gen.standard_normal((head.mean.shape[0], m, model.action_dim))
    samples = head.mean[:, None, :] + head.std[:, None, :] * noise
    return np.clip(samples, model.action_low, model.action_high)
