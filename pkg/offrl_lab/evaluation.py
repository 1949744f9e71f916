"""Evaluation and diagnostics of trained agents

Normalized rollout scores, per-provenance divergence from the dataset actions, how well
the critics separate expert from non-expert actions, action-gradient norm profiles, the
Lipschitz bound on the critic's action gradient and the catastrophic-failure detector.
"""
import logging
import math
from argparse import ArgumentParser
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field
from scipy.stats import rankdata

from offrl_lab.config import BaseSettings
from offrl_lab.datasets import Dataset, Normalizer
from offrl_lab.diffnet import MlpParams, forward, value_and_input_gradient
from offrl_lab.envs import EnvKind, EnvSpec, ReferenceReturns, episode_returns, make_env
from offrl_lab.exceptions import ConfigurationError, ContractError, DomainError

if TYPE_CHECKING:
    from offrl_lab.agents.state import AgentState

logger = logging.getLogger(__name__)

Actor = Callable[[np.ndarray], np.ndarray]
CriticPair = Tuple[MlpParams, MlpParams]

HISTOGRAM_BINS = 50


class EvalConfig(BaseSettings):
    """How checkpoints are evaluated and when a run counts as failed"""

    episodes: int = Field(10, ge=1)
    """Rollouts per checkpoint"""
    seed: int = 0
    """Seed of the evaluation initial states"""
    reference_episodes: int = Field(100, ge=1)
    """Rollouts behind the random and expert reference returns"""
    separability_samples: int = Field(500, ge=1)
    """Rows per class in the Q-separability check"""
    grad_norm_samples: int = Field(1000, ge=1)
    """(s, a) pairs in the action-gradient norm profile"""
    grad_norm_sampler: str = Field("random", regex="^(dataset|policy|random)$")
    """Action source of the gradient-norm profile"""
    lipschitz_composite: Optional[float] = Field(None, ge=0.0)
    """Composite Lipschitz constant of policy and dynamics; enables the bound column"""
    score_fraction: float = Field(0.25, gt=0.0, lt=1.0)
    """A checkpoint is 'collapsed' below this fraction of the running best score"""
    patience: int = Field(3, ge=1)
    """Consecutive collapsed checkpoints that flag a failure"""
    grad_factor: float = Field(10.0, gt=1.0)
    """Growth of the p99 gradient norm over the first checkpoint that flags a failure"""
    final_window: int = Field(10, ge=1)
    """Trailing checkpoints averaged into the final score"""


@dataclass
class EvalReport:
    """Everything measured at one evaluation checkpoint"""

    step: int
    mean_return: float
    normalized_score: float
    divergence_expert_p75: Optional[float] = None
    divergence_nonexpert_p75: Optional[float] = None
    q_separability_auc: Optional[float] = None
    grad_norm_p50: Optional[float] = None
    grad_norm_p75: Optional[float] = None
    grad_norm_p99: Optional[float] = None
    grad_norm_max: Optional[float] = None
    q_gradient_bound: Optional[float] = None
    separability: Optional["Separability"] = field(default=None, repr=False, compare=False)
    """Histograms behind `q_separability_auc`; not a metrics.csv column"""

    def as_row(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in EVAL_COLUMNS}


# column order of metrics.csv
EVAL_COLUMNS = [f.name for f in fields(EvalReport) if f.name != "separability"]


def nearest_rank(values: Sequence[float], percent: float) -> Optional[float]:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value, None when empty"""
    if not 0.0 < percent <= 100.0:
        raise ContractError(f"percentile must lie in (0, 100], got {percent}")
    ordered = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if ordered.size == 0:
        return None
    rank = max(int(math.ceil(round(percent / 100.0 * ordered.size, 9))), 1)
    return float(ordered[rank - 1])


def rollout_score(
    actor: Actor,
    env_kind: EnvKind,
    episodes: int,
    seed: int,
    reference: Optional[ReferenceReturns],
) -> Tuple[float, float]:
    """Mean undiscounted return of deterministic rollouts and its normalized score

    Raises
    ------
    ContractError
        if no reference returns are available
    """
    if reference is None:
        raise ContractError("normalized scores need reference returns")
    returns = episode_returns(make_env(env_kind, seed), actor, episodes)
    mean_return = float(np.mean(returns))
    return mean_return, reference.normalize(mean_return)


def divergence_diagnostic(actor: Actor, dataset: Dataset) -> Tuple[Optional[float], Optional[float]]:
    """75th percentile of |pi(s_i) - a_i|^2 over expert rows and over non-expert rows

    Parameters
    ----------
    actor : Actor
        maps a batch of raw states to actions
    dataset : Dataset
        every row is used

    Returns
    -------
    Tuple[Optional[float], Optional[float]]
        expert and non-expert values; None for a class the dataset lacks
    """
    diff = actor(dataset.states) - dataset.actions
    errors = np.sum(diff * diff, axis=1)
    expert = dataset.expert_mask()
    return nearest_rank(errors[expert], 75), nearest_rank(errors[~expert], 75)


@dataclass(frozen=True)
class Separability:
    """AUC of expert vs non-expert Q values and their shared-range histograms"""

    auc: float
    bin_edges: np.ndarray
    expert_counts: np.ndarray
    nonexpert_counts: np.ndarray


def rank_auc(positive: np.ndarray, negative: np.ndarray) -> float:
    """P(positive > negative) with ties counted one half, from the rank-sum statistic"""
    n_pos, n_neg = len(positive), len(negative)
    ranks = rankdata(np.concatenate([positive, negative]))
    rank_sum = float(np.sum(ranks[:n_pos]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mean_twin_q(critics: CriticPair, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """0.5 * (Q1 + Q2) at critic-space states"""
    inputs = np.hstack([states, actions])
    return 0.5 * (forward(critics[0], inputs)[0][:, 0] + forward(critics[1], inputs)[0][:, 0])


def q_separability(
    critics: CriticPair,
    dataset: Dataset,
    sample_n: int,
    gen: np.random.Generator,
    normalizer: Optional[Normalizer] = None,
) -> Separability:
    """Compare mean twin-Q on expert rows against non-expert rows

    Up to `sample_n` rows of each class are drawn without replacement.

    Raises
    ------
    ConfigurationError
        if one class is absent from the dataset
    """
    expert_rows = np.flatnonzero(dataset.expert_mask())
    other_rows = np.flatnonzero(~dataset.expert_mask())
    if expert_rows.size == 0 or other_rows.size == 0:
        raise ConfigurationError("separability needs both expert and non-expert rows")
    expert_rows = np.sort(gen.choice(expert_rows, min(sample_n, expert_rows.size), replace=False))
    other_rows = np.sort(gen.choice(other_rows, min(sample_n, other_rows.size), replace=False))

    states = dataset.states if normalizer is None else normalizer.apply(dataset.states)
    q_expert = mean_twin_q(critics, states[expert_rows], dataset.actions[expert_rows])
    q_other = mean_twin_q(critics, states[other_rows], dataset.actions[other_rows])

    low = float(min(q_expert.min(), q_other.min()))
    high = float(max(q_expert.max(), q_other.max()))
    if high == low:
        low, high = low - 0.5, high + 0.5
    edges = np.linspace(low, high, HISTOGRAM_BINS + 1)
    return Separability(
        auc=rank_auc(q_expert, q_other),
        bin_edges=edges,
        expert_counts=np.histogram(q_expert, bins=edges)[0],
        nonexpert_counts=np.histogram(q_other, bins=edges)[0],
    )


@dataclass(frozen=True)
class GradNormProfile:
    """Nearest-rank percentiles of |grad_a Q|"""

    p50: float
    p75: float
    p99: float
    max: float


def action_gradient_norms(critics: CriticPair, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per-row max over the two critics of |grad_a Q(s, a)|_2"""
    state_dim = states.shape[1]
    inputs = np.hstack([states, actions])
    norms = [
        np.linalg.norm(value_and_input_gradient(critic, inputs)[1][:, state_dim:], axis=1)
        for critic in critics
    ]
    return np.maximum(norms[0], norms[1])


def grad_norm_profile(
    critics: CriticPair,
    states: np.ndarray,
    sampler: str,
    n: int,
    gen: np.random.Generator,
    env_spec: EnvSpec,
    actions: Optional[np.ndarray] = None,
    actor: Optional[Actor] = None,
) -> GradNormProfile:
    """Percentiles of the action-gradient norm over `n` sampled (s, a) pairs

    Parameters
    ----------
    critics : CriticPair
        twin critics
    states : np.ndarray
        candidate states in the critics' input space; `n` rows are drawn with replacement
    sampler : str
        `dataset` (the row's own action), `policy` (actor output) or `random` (uniform)
    n : int
        number of pairs
    gen : np.random.Generator
        stream for the draws
    env_spec : EnvSpec
        action box of the random sampler
    actions : Optional[np.ndarray], optional
        dataset actions row-aligned with `states`, required by `dataset`
    actor : Optional[Actor], optional
        policy over critic-space states, required by `policy`

    Returns
    -------
    GradNormProfile
        p50, p75, p99 and max
    """
    rows = gen.integers(0, len(states), size=n)
    picked = states[rows]
    if sampler == "dataset":
        if actions is None:
            raise ContractError("the dataset sampler needs dataset actions")
        picked_actions = actions[rows]
    elif sampler == "policy":
        if actor is None:
            raise ContractError("the policy sampler needs an actor")
        picked_actions = actor(picked)
    elif sampler == "random":
        picked_actions = gen.uniform(env_spec.action_low, env_spec.action_high, size=(n, env_spec.action_dim))
    else:
        raise ContractError(f"unknown action sampler '{sampler}'")
    norms = action_gradient_norms(critics, picked, picked_actions)
    return GradNormProfile(
        p50=nearest_rank(norms, 50),
        p75=nearest_rank(norms, 75),
        p99=nearest_rank(norms, 99),
        max=float(norms.max()),
    )


@dataclass(frozen=True)
class LipschitzSpec:
    """Constants of the action-gradient bound"""

    action_dim: int
    reward_lipschitz: float
    gamma: float
    composite: float
    """Lipschitz constant of policy and dynamics composed"""

    @classmethod
    def for_env(cls, env_spec: EnvSpec, gamma: float, composite: float) -> "LipschitzSpec":
        return cls(env_spec.action_dim, env_spec.reward_lipschitz, gamma, composite)


def q_gradient_bound(spec: LipschitzSpec) -> float:
    """sqrt(N) * L_r / (1 - gamma * L_composite)

    Raises
    ------
    DomainError
        unless gamma * L_composite < 1 and the constants are non-negative
    """
    if spec.action_dim < 1 or spec.reward_lipschitz < 0 or spec.gamma < 0 or spec.composite < 0:
        raise DomainError(f"constants out of range: {spec}")
    coupling = spec.gamma * spec.composite
    if coupling >= 1.0:
        raise DomainError(f"gamma * L_composite = {coupling} must be below 1")
    return math.sqrt(spec.action_dim) * spec.reward_lipschitz / (1.0 - coupling)


@dataclass(frozen=True)
class FailureVerdict:
    """Outcome of the catastrophic-failure detector"""

    failed: bool
    reason: Optional[str] = None
    onset_step: Optional[int] = None
    onset_index: Optional[int] = None


def _score_onset(scores: Sequence[float], fraction: float, patience: int) -> Optional[int]:
    best = -math.inf
    streak_start, streak = None, 0
    for i, score in enumerate(scores):
        best = max(best, score)
        if best > 0 and score < fraction * best:
            if streak == 0:
                streak_start = i
            streak += 1
            if streak >= patience:
                return streak_start
        else:
            streak = 0
    return None


def _grad_onset(p99s: Sequence[Optional[float]], factor: float) -> Optional[int]:
    if not p99s or p99s[0] is None or p99s[0] <= 0:
        return None
    for i, value in enumerate(p99s):
        if value is not None and value > factor * p99s[0]:
            return i
    return None


def failure_detector(reports: Sequence[EvalReport], cfg: Optional[EvalConfig] = None) -> FailureVerdict:
    """Flag a collapse of the score or an explosion of the action gradients

    A run fails when its normalized score stays below `score_fraction` of its running
    best for `patience` consecutive checkpoints (onset at the first of them), or when
    the p99 gradient norm exceeds `grad_factor` times its value at the first checkpoint.
    """
    cfg = cfg or EvalConfig()
    score_onset = _score_onset([r.normalized_score for r in reports], cfg.score_fraction, cfg.patience)
    grad_onset = _grad_onset([r.grad_norm_p99 for r in reports], cfg.grad_factor)
    onsets = ((score_onset, "score collapse"), (grad_onset, "gradient explosion"))
    candidates = [(i, why) for i, why in onsets if i is not None]
    if not candidates:
        return FailureVerdict(failed=False)
    index, reason = min(candidates, key=lambda c: c[0])
    return FailureVerdict(failed=True, reason=reason, onset_step=reports[index].step, onset_index=index)


def evaluate_checkpoint(
    state: "AgentState",
    dataset: Dataset,
    cfg: EvalConfig,
    reference: Optional[ReferenceReturns],
    gen: np.random.Generator,
    gamma: float = 0.99,
) -> EvalReport:
    """Assemble the full report of one checkpoint

    Critic-based fields stay None for agents without critics.
    """
    env_kind = dataset.metadata.env_kind
    mean_return, score = rollout_score(state.act, env_kind, cfg.episodes, cfg.seed, reference)
    expert_p75, other_p75 = divergence_diagnostic(state.act, dataset)
    report = EvalReport(
        step=state.step,
        mean_return=mean_return,
        normalized_score=score,
        divergence_expert_p75=expert_p75,
        divergence_nonexpert_p75=other_p75,
    )
    if cfg.lipschitz_composite is not None:
        report.q_gradient_bound = q_gradient_bound(
            LipschitzSpec.for_env(dataset.env_spec, gamma, cfg.lipschitz_composite)
        )
    if not state.has_critics:
        return report

    expert = dataset.expert_mask()
    if expert.any() and not expert.all():
        report.separability = q_separability(
            state.critics, dataset, cfg.separability_samples, gen, state.normalizer
        )
        report.q_separability_auc = report.separability.auc
    profile = grad_norm_profile(
        state.critics,
        state.normalize(dataset.states),
        cfg.grad_norm_sampler,
        cfg.grad_norm_samples,
        gen,
        dataset.env_spec,
        actions=dataset.actions,
        actor=state.policy_actions,
    )
    report.grad_norm_p50, report.grad_norm_p75 = profile.p50, profile.p75
    report.grad_norm_p99, report.grad_norm_max = profile.p99, profile.max
    return report


def main(args):  # noqa: D103
    spec = LipschitzSpec(args.action_dim, args.reward_lipschitz, args.gamma, args.composite)
    print(f"bound on |grad_a Q|: {q_gradient_bound(spec):.12g}")


if __name__ == "__main__":
    parser = ArgumentParser(description="Evaluate the Lipschitz bound on the critic's action gradient")
    parser.add_argument("-n", "--action-dim", type=int, default=1)
    parser.add_argument("-r", "--reward-lipschitz", type=float, default=1.0)
    parser.add_argument("-g", "--gamma", type=float, default=0.99)
    parser.add_argument("-c", "--composite", type=float, default=0.5)

    args = parser.parse_args()
    main(args)
