"""Training loop shared by every algorithm"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from offrl_lab.agents.checkpoint import state_to_dict
from offrl_lab.agents.config import AgentConfig, Algorithm
from offrl_lab.agents.state import AgentState, init_agent_state
from offrl_lab.agents.updates import (
    StepMetrics,
    UpdateStreams,
    actor_update_bear,
    actor_update_td3bc,
    bc_update,
    critic_update,
    make_batch,
)
from offrl_lab.datasets import Dataset, fit_normalizer, sample_batch
from offrl_lab.diffnet import Rng
from offrl_lab.divergences import behavior_fit
from offrl_lab.envs import EnvKind, ReferenceReturns, reference_returns
from offrl_lab.evaluation import EvalConfig, EvalReport, FailureVerdict, evaluate_checkpoint, failure_detector
from offrl_lab.exceptions import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    """What a run leaves behind, including how it failed if it did"""

    state: AgentState
    step_metrics: List[StepMetrics] = field(default_factory=list)
    reports: List[EvalReport] = field(default_factory=list)
    final_checkpoint: Optional[Dict[str, Any]] = None
    best_checkpoint: Optional[Dict[str, Any]] = None
    failed: bool = False
    failure_reason: Optional[str] = None
    failure_step: Optional[int] = None
    verdict: FailureVerdict = field(default_factory=lambda: FailureVerdict(failed=False))


def train_step(
    state: AgentState, dataset: Dataset, cfg: AgentConfig, streams: UpdateStreams
) -> Tuple[AgentState, StepMetrics]:
    """Sample one minibatch and run the updates scheduled for the next step

    The counter is advanced first, so the penalty runs on steps divisible by
    `gp_interval` and the TD3+BC actor on steps divisible by `policy_delay`.
    """
    state = state.evolve(step=state.step + 1)
    batch = make_batch(dataset, sample_batch(len(dataset), cfg.batch_size, streams.batches), state.normalizer)
    if cfg.algorithm is Algorithm.BC:
        state, metrics = bc_update(batch, state)
    else:
        state, metrics = critic_update(batch, state, cfg, streams)
        if cfg.algorithm is Algorithm.BEAR:
            state, actor_metrics = actor_update_bear(batch, state, cfg, streams.policy)
            metrics = metrics.merge(actor_metrics)
        elif state.step % cfg.policy_delay == 0:
            state, actor_metrics = actor_update_td3bc(batch, state, cfg)
            metrics = metrics.merge(actor_metrics)
    metrics.check_finite()
    return state, metrics


def train(
    cfg: AgentConfig,
    dataset: Dataset,
    eval_cfg: Optional[EvalConfig] = None,
    env_kind: Optional[EnvKind] = None,
    reference: Optional[ReferenceReturns] = None,
    on_step: Optional[Callable[[StepMetrics], None]] = None,
    on_eval: Optional[Callable[[EvalReport, AgentState], None]] = None,
    progress: bool = False,
) -> TrainResult:
    """Train one agent on a fixed dataset

    Parameters
    ----------
    cfg : AgentConfig
        algorithm and hyperparameters
    dataset : Dataset
        training data, sampled uniformly with replacement
    eval_cfg : Optional[EvalConfig], optional
        evaluation settings, by default EvalConfig()
    env_kind : Optional[EnvKind], optional
        expected environment, checked against the dataset, by default unchecked
    reference : Optional[ReferenceReturns], optional
        score anchors; falls back to the dataset's, then to fresh rollouts
    on_step : Optional[Callable[[StepMetrics], None]], optional
        receives the kept per-step metrics (every `log_interval` steps)
    on_eval : Optional[Callable[[EvalReport, AgentState], None]], optional
        receives every evaluation report with the evaluated state
    progress : bool, optional
        show a progress bar, by default False

    Returns
    -------
    TrainResult
        final state, metric logs, checkpoints and failure record. A non-finite value
        ends the run early with `failed=True`; it is not raised.

    Raises
    ------
    ConfigurationError
        if the dataset comes from another environment than `env_kind`
    """
    eval_cfg = eval_cfg or EvalConfig()
    kind = dataset.metadata.env_kind
    if env_kind is not None and EnvKind(env_kind) is not kind:
        raise ConfigurationError(f"dataset is from {kind.value}, config asks for {EnvKind(env_kind).value}")
    reference = reference or dataset.metadata.reference_returns
    if reference is None:
        reference = reference_returns(kind, seed=eval_cfg.seed, episodes=eval_cfg.reference_episodes)

    rng = Rng(cfg.seed)
    normalizer = fit_normalizer(dataset)
    behavior = None
    if cfg.algorithm is Algorithm.BEAR:
        behavior = behavior_fit(dataset, cfg.behavior, rng.child("behavior"), normalizer, progress=progress)
    state = init_agent_state(cfg, dataset.env_spec, rng.child("networks"), normalizer, behavior)
    streams = UpdateStreams.from_rng(rng.child("updates"))
    eval_gen = rng.child("evaluation").generator

    result = TrainResult(state=state)
    best_score = -np.inf
    for _ in tqdm(range(cfg.total_steps), desc=f"{cfg.algorithm.value}/{cfg.variant}", disable=not progress):
        try:
            new_state, metrics = train_step(state, dataset, cfg, streams)
        except NumericalError as err:
            result.failed = True
            result.failure_reason = str(err)
            result.failure_step = state.step + 1
            logger.warning(f"Run aborted at step {state.step + 1}: {err}")
            break
        state = new_state
        if state.step % cfg.log_interval == 0:
            result.step_metrics.append(metrics)
            if on_step is not None:
                on_step(metrics)
        if state.step % cfg.eval_interval == 0:
            report = evaluate_checkpoint(state, dataset, eval_cfg, reference, eval_gen, cfg.gamma)
            result.reports.append(report)
            logger.info(f"step {state.step}: normalized score {report.normalized_score:.2f}")
            if report.normalized_score > best_score:
                best_score = report.normalized_score
                result.best_checkpoint = state_to_dict(state)
            if on_eval is not None:
                on_eval(report, state)

    result.state = state
    result.final_checkpoint = state_to_dict(state)
    result.verdict = failure_detector(result.reports, eval_cfg)
    return result
