"""Offline datasets: collection, contamination, statistics, normalization, filtering, files

A dataset keeps its transitions as column arrays (states, actions, rewards, next states,
done flags and provenance codes) plus a metadata record that is always recomputed from
the columns, so counts and average reward cannot drift from the data.
"""
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, validator
from tqdm import tqdm

from offrl_lab.config import PathLike
from offrl_lab.diffnet import Rng
from offrl_lab.envs import (
    ENV_SPECS,
    Env,
    EnvKind,
    EnvSpec,
    PolicyLevel,
    ReferenceReturns,
    ScriptedPolicy,
    make_env,
)
from offrl_lab.exceptions import (
    ConfigurationError,
    ContractError,
    DatasetFormatError,
    DatasetIntegrityError,
    ShapeError,
)

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-3


class Provenance(str, Enum):
    """Which behavior level generated a transition"""

    EXPERT = "expert"
    MEDIUM = "medium"
    RANDOM = "random"


# provenance codes stored in the column array
PROVENANCES = (Provenance.EXPERT, Provenance.MEDIUM, Provenance.RANDOM)
_CODES = {p: i for i, p in enumerate(PROVENANCES)}


class Normalizer(BaseModel):
    """Per-dimension state standardization"""

    mean: List[float]
    std: List[float]

    @validator("std")
    def _floored(cls, value: List[float]) -> List[float]:  # noqa: N805
        if any(s < STD_FLOOR for s in value):
            raise ValueError(f"std entries must be >= {STD_FLOOR}")
        return value

    def apply(self, states: np.ndarray) -> np.ndarray:
        """(s - mean) / std"""
        return (np.asarray(states, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)


class DatasetMetadata(BaseModel):
    """Facts about a dataset, recomputed whenever the transitions change"""

    env_kind: EnvKind
    seed: int
    name: str = ""
    counts: Dict[Provenance, int]
    """Transitions per provenance, all three levels always present"""
    average_reward: float
    reference_returns: Optional[ReferenceReturns] = None
    normalizer: Optional[Normalizer] = None

    @property
    def size(self) -> int:
        """Total number of transitions"""
        return sum(self.counts.values())


@dataclass(frozen=True)
class Transition:
    """One `(s, a, r, s', done)` record with its provenance"""

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    provenance: Provenance


@dataclass(frozen=True)
class DatasetStats:
    """The columns of a contamination statistics table"""

    name: str
    total: int
    expert: int
    medium: int
    random: int
    nonexpert: int
    average_reward: float

    def as_row(self) -> Dict[str, object]:
        """Row for the stats CSV"""
        return dict(self.__dict__)


class Dataset:
    """Immutable ordered collection of transitions"""

    def __init__(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        next_states: np.ndarray,
        dones: np.ndarray,
        provenance: np.ndarray,
        env_kind: EnvKind,
        seed: int,
        name: str = "",
        reference_returns: Optional[ReferenceReturns] = None,
        normalizer: Optional[Normalizer] = None,
    ) -> None:
        """Wrap column arrays; metadata is derived from them

        Parameters
        ----------
        states, actions, rewards, next_states, dones, provenance : np.ndarray
            columns, one row per transition; provenance holds codes into `PROVENANCES`
        env_kind : EnvKind
            environment the data came from
        seed : int
            seed the data was generated with
        name : str, optional
            short label such as `er50`, by default ""
        reference_returns : Optional[ReferenceReturns], optional
            score anchors carried along for evaluation, by default None
        normalizer : Optional[Normalizer], optional
            fitted state normalizer, by default None

        Raises
        ------
        ShapeError
            if the columns disagree with each other or with the environment
        """
        spec = ENV_SPECS[EnvKind(env_kind)]
        n = len(rewards)
        columns = {
            "states": (np.asarray(states, dtype=np.float64), (n, spec.state_dim)),
            "actions": (np.asarray(actions, dtype=np.float64), (n, spec.action_dim)),
            "rewards": (np.asarray(rewards, dtype=np.float64), (n,)),
            "next_states": (np.asarray(next_states, dtype=np.float64), (n, spec.state_dim)),
            "dones": (np.asarray(dones, dtype=bool), (n,)),
            "provenance": (np.asarray(provenance, dtype=np.int8), (n,)),
        }
        for key, (array, shape) in columns.items():
            if array.shape != shape:
                raise ShapeError(f"column '{key}' has shape {array.shape}, expected {shape}")
            array.setflags(write=False)
            setattr(self, key, array)
        if n and (np.abs(self.actions) > spec.action_high).any():
            raise ShapeError("actions must lie inside the action box")

        counts = {p: int(np.count_nonzero(self.provenance == _CODES[p])) for p in PROVENANCES}
        self.metadata = DatasetMetadata(
            env_kind=spec.kind,
            seed=seed,
            name=name,
            counts=counts,
            average_reward=float(np.mean(self.rewards)) if n else 0.0,
            reference_returns=reference_returns,
            normalizer=normalizer,
        )

    @property
    def env_spec(self) -> EnvSpec:
        """Spec of the source environment"""
        return ENV_SPECS[self.metadata.env_kind]

    def __len__(self) -> int:
        return len(self.rewards)

    def transition(self, index: int) -> Transition:
        """Record view of row `index`"""
        return Transition(
            s=self.states[index].copy(),
            a=self.actions[index].copy(),
            r=float(self.rewards[index]),
            s_next=self.next_states[index].copy(),
            done=bool(self.dones[index]),
            provenance=PROVENANCES[int(self.provenance[index])],
        )

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self.transition(i)

    def provenance_mask(self, provenance: Provenance) -> np.ndarray:
        """Boolean mask of rows with the given provenance"""
        return self.provenance == _CODES[Provenance(provenance)]

    def expert_mask(self) -> np.ndarray:
        """Rows generated by the expert level"""
        return self.provenance_mask(Provenance.EXPERT)

    def select(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        """New dataset made of the given rows, in the given order"""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            states=self.states[indices],
            actions=self.actions[indices],
            rewards=self.rewards[indices],
            next_states=self.next_states[indices],
            dones=self.dones[indices],
            provenance=self.provenance[indices],
            env_kind=self.metadata.env_kind,
            seed=self.metadata.seed,
            name=self.metadata.name if name is None else name,
            reference_returns=self.metadata.reference_returns,
        )

    def with_normalizer(self, normalizer: Optional[Normalizer]) -> "Dataset":
        """Same transitions, metadata carrying `normalizer`"""
        return Dataset(
            self.states,
            self.actions,
            self.rewards,
            self.next_states,
            self.dones,
            self.provenance,
            env_kind=self.metadata.env_kind,
            seed=self.metadata.seed,
            name=self.metadata.name,
            reference_returns=self.metadata.reference_returns,
            normalizer=normalizer,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.metadata == other.metadata and all(
            np.array_equal(getattr(self, key), getattr(other, key))
            for key in ("states", "actions", "rewards", "next_states", "dones", "provenance")
        )


def _provenance_of(policy: ScriptedPolicy) -> Provenance:
    return Provenance(policy.level.value)


def collect(
    env: Env,
    policy: ScriptedPolicy,
    n_transitions: int,
    seed: int,
    reference: Optional[ReferenceReturns] = None,
    name: str = "",
    progress: bool = False,
) -> Dataset:
    """Roll out a scripted policy for exactly `n_transitions` steps

    Whole episodes are collected back to back; the last one is cut at `n_transitions`.

    Parameters
    ----------
    env : Env
        environment, reseeded from `seed`
    policy : ScriptedPolicy
        behavior policy, reseeded from `seed`; its level becomes the provenance tag
    n_transitions : int
        number of transitions, >= 1
    seed : int
        seed of both the initial states and the policy noise
    reference : Optional[ReferenceReturns], optional
        score anchors stored in the metadata, by default None
    name : str, optional
        dataset label, by default ""
    progress : bool, optional
        show a progress bar, by default False

    Returns
    -------
    Dataset
        the collected data
    """
    if n_transitions < 1:
        raise ContractError("collect needs at least one transition")
    root = Rng(seed)
    env.seed(root.child("env").integer_seed())
    policy.seed(root.child("policy").integer_seed())

    spec = env.spec
    states = np.empty((n_transitions, spec.state_dim))
    actions = np.empty((n_transitions, spec.action_dim))
    rewards = np.empty(n_transitions)
    next_states = np.empty((n_transitions, spec.state_dim))
    dones = np.empty(n_transitions, dtype=bool)

    state, done = env.reset(), False
    for i in tqdm(range(n_transitions), desc=f"collect {policy.level.value}", disable=not progress):
        if done:
            state = env.reset()
        action = env.clip_action(policy(state))
        result = env.step(action)
        states[i], actions[i], rewards[i] = state, action, result.reward
        next_states[i], dones[i] = result.next_state, result.done
        state, done = result.next_state, result.done

    provenance = np.full(n_transitions, _CODES[_provenance_of(policy)], dtype=np.int8)
    return Dataset(
        states, actions, rewards, next_states, dones, provenance,
        env_kind=spec.kind, seed=seed, name=name or policy.level.value, reference_returns=reference,
    )


def _floor_fraction(fraction: float, n: int) -> int:
    # rounding first keeps 0.3 * 1000 from landing on 299.99...
    return int(math.floor(round(fraction * n, 9)))


def contaminate(
    expert_ds: Dataset, nonexpert_ds: Dataset, ratio: float, name: Optional[str] = None
) -> Dataset:
    """Replace the tail of an expert dataset with the head of a non-expert one

    Parameters
    ----------
    expert_ds : Dataset
        clean dataset of size N
    nonexpert_ds : Dataset
        source of replacement transitions, at least floor(ratio * N) of them
    ratio : float
        replaced fraction in [0, 1]
    name : Optional[str], optional
        label of the mixture, by default the expert dataset's

    Returns
    -------
    Dataset
        N transitions: the first N - floor(ratio * N) expert rows followed by the first
        floor(ratio * N) non-expert rows

    Raises
    ------
    ContractError
        if the ratio is outside [0, 1] or there is not enough non-expert data
    ConfigurationError
        if the two datasets come from different environments
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"contamination ratio must lie in [0, 1], got {ratio}")
    if expert_ds.metadata.env_kind != nonexpert_ds.metadata.env_kind:
        raise ConfigurationError(
            f"cannot mix {expert_ds.metadata.env_kind.value} and "
            f"{nonexpert_ds.metadata.env_kind.value} data"
        )
    n = len(expert_ds)
    replaced = _floor_fraction(ratio, n)
    if len(nonexpert_ds) < replaced:
        raise ContractError(
            f"need {replaced} non-expert transitions, only {len(nonexpert_ds)} available"
        )
    if replaced == 0 and name is None:
        return expert_ds
    kept = n - replaced

    def _join(key: str) -> np.ndarray:
        return np.concatenate([getattr(expert_ds, key)[:kept], getattr(nonexpert_ds, key)[:replaced]])

    return Dataset(
        _join("states"),
        _join("actions"),
        _join("rewards"),
        _join("next_states"),
        _join("dones"),
        _join("provenance"),
        env_kind=expert_ds.metadata.env_kind,
        seed=expert_ds.metadata.seed,
        name=expert_ds.metadata.name if name is None else name,
        reference_returns=expert_ds.metadata.reference_returns,
    )


def dataset_stats(ds: Dataset) -> DatasetStats:
    """Total, per-provenance and non-expert counts plus the average reward"""
    counts = ds.metadata.counts
    return DatasetStats(
        name=ds.metadata.name,
        total=len(ds),
        expert=counts[Provenance.EXPERT],
        medium=counts[Provenance.MEDIUM],
        random=counts[Provenance.RANDOM],
        nonexpert=counts[Provenance.MEDIUM] + counts[Provenance.RANDOM],
        average_reward=ds.metadata.average_reward,
    )


def fit_normalizer(ds: Dataset) -> Normalizer:
    """Mean and floored standard deviation of every state dimension"""
    if len(ds) == 0:
        raise ContractError("cannot fit a normalizer on an empty dataset")
    mean = ds.states.mean(axis=0)
    std = np.maximum(ds.states.std(axis=0), STD_FLOOR)
    return Normalizer(mean=mean.tolist(), std=std.tolist())


def percentile_filter(ds: Dataset, percent: float) -> Dataset:
    """Keep the ceil(percent / 100 * N) transitions with the highest reward

    Ties are broken by original index (earlier rows win); kept rows stay in their
    original order.
    """
    if not 0.0 < percent <= 100.0:
        raise ContractError(f"percentile must lie in (0, 100], got {percent}")
    n = len(ds)
    keep = int(math.ceil(round(percent * n / 100.0, 9)))
    order = np.argsort(-ds.rewards, kind="stable")
    chosen = np.sort(order[:keep])
    return ds.select(chosen, name=f"{ds.metadata.name}_top{percent:g}")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _record_line(ds: Dataset, i: int) -> str:
    return (
        '{"s": [' + ", ".join(_fmt(x) for x in ds.states[i]) + "], "
        '"a": [' + ", ".join(_fmt(x) for x in ds.actions[i]) + "], "
        '"r": ' + _fmt(ds.rewards[i]) + ", "
        '"s_next": [' + ", ".join(_fmt(x) for x in ds.next_states[i]) + "], "
        '"done": ' + ("true" if ds.dones[i] else "false") + ", "
        '"provenance": "' + PROVENANCES[int(ds.provenance[i])].value + '"}'
    )


def metadata_path(path: PathLike) -> Path:
    """Sidecar metadata file that belongs to a JSONL dataset file"""
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_dataset(ds: Dataset, path: PathLike) -> Path:
    """Write one JSON object per transition plus a metadata sidecar

    Floats are written with 17 significant digits, so loading gives back the exact
    values.

    Returns
    -------
    Path
        path of the JSONL file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fp:
        for i in range(len(ds)):
            fp.write(_record_line(ds, i) + "\n")
    with open(metadata_path(path), "w") as fp:
        fp.write(ds.metadata.json(indent=2))
    logger.info(f"Wrote {len(ds)} transitions to {path}")
    return path


def load_dataset(path: PathLike) -> Dataset:
    """Read a dataset written by `save_dataset`

    Raises
    ------
    DatasetFormatError
        for a line that is not a valid transition record, naming the line
    DatasetIntegrityError
        if the records disagree with the metadata counts
    """
    path = Path(path)
    metadata = DatasetMetadata.parse_file(metadata_path(path))
    spec = ENV_SPECS[metadata.env_kind]

    states, actions, rewards, next_states, dones, provenance = [], [], [], [], [], []
    with open(path) as fp:
        for line_number, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                s, a = record["s"], record["a"]
                s_next = record["s_next"]
                if len(s) != spec.state_dim or len(s_next) != spec.state_dim or len(a) != spec.action_dim:
                    raise ValueError("vector length does not match the environment")
                if any(not spec.action_low <= x <= spec.action_high for x in a):
                    raise ValueError("action outside the action box")
                states.append(s)
                actions.append(a)
                rewards.append(float(record["r"]))
                next_states.append(s_next)
                dones.append(bool(record["done"]))
                provenance.append(_CODES[Provenance(record["provenance"])])
            except (ValueError, KeyError, TypeError) as err:
                raise DatasetFormatError(f"malformed transition record ({err})", line_number)

    if len(rewards) != metadata.size:
        raise DatasetIntegrityError(f"{path} is inconsistent with its metadata", metadata.size, len(rewards))

    n = len(rewards)
    ds = Dataset(
        np.array(states, dtype=np.float64).reshape(n, spec.state_dim),
        np.array(actions, dtype=np.float64).reshape(n, spec.action_dim),
        np.array(rewards, dtype=np.float64),
        np.array(next_states, dtype=np.float64).reshape(n, spec.state_dim),
        np.array(dones, dtype=bool),
        np.array(provenance, dtype=np.int8),
        env_kind=metadata.env_kind,
        seed=metadata.seed,
        name=metadata.name,
        reference_returns=metadata.reference_returns,
        normalizer=metadata.normalizer,
    )
    if ds.metadata.counts != metadata.counts:
        raise DatasetIntegrityError(
            f"{path}: provenance counts differ from metadata", metadata.size, len(ds)
        )
    return ds


def sample_batch(n: int, batch_size: int, gen: np.random.Generator) -> np.ndarray:
    """Row indices of a minibatch drawn uniformly with replacement"""
    return gen.integers(0, n, size=batch_size)


class MixKind(str, Enum):
    """Which non-expert level contaminates the expert data"""

    EXPERT_RANDOM = "expert-random"
    EXPERT_MEDIUM = "expert-medium"


_MIX_PREFIX = {MixKind.EXPERT_RANDOM: "er", MixKind.EXPERT_MEDIUM: "em"}
_MIX_LEVEL = {MixKind.EXPERT_RANDOM: PolicyLevel.RANDOM, MixKind.EXPERT_MEDIUM: PolicyLevel.MEDIUM}

# name -> (mix, ratio) of the standard suite
DEFAULT_SUITE = {
    "er10": (MixKind.EXPERT_RANDOM, 0.1),
    "er30": (MixKind.EXPERT_RANDOM, 0.3),
    "er50": (MixKind.EXPERT_RANDOM, 0.5),
    "er70": (MixKind.EXPERT_RANDOM, 0.7),
    "em30": (MixKind.EXPERT_MEDIUM, 0.3),
}


def mixture_name(mix: MixKind, ratio: float) -> str:
    """`er50` for expert-random at ratio 0.5, `em30` for expert-medium at 0.3"""
    return f"{_MIX_PREFIX[MixKind(mix)]}{int(round(ratio * 100))}"


def build_mixture(
    kind: EnvKind,
    mix: MixKind,
    ratio: float,
    n_transitions: int,
    seed: int,
    reference: Optional[ReferenceReturns] = None,
    progress: bool = False,
) -> Dataset:
    """Collect an expert set and a non-expert set of size `n_transitions`, then contaminate

    Parameters
    ----------
    kind : EnvKind
        environment
    mix : MixKind
        expert-random or expert-medium
    ratio : float
        fraction of the expert tail that is replaced
    n_transitions : int
        size of the result
    seed : int
        root seed; the expert and non-expert collections use separate child streams
    reference : Optional[ReferenceReturns], optional
        score anchors stored in the metadata, by default None
    progress : bool, optional
        show progress bars, by default False

    Returns
    -------
    Dataset
        mixture named after the recipe
    """
    mix = MixKind(mix)
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"contamination ratio must lie in [0, 1], got {ratio}")
    expert = collect_level(kind, PolicyLevel.EXPERT, n_transitions, seed, reference, progress)
    replaced = _floor_fraction(ratio, n_transitions)
    if replaced == 0:
        return contaminate(expert, expert, 0.0, name=mixture_name(mix, ratio))
    nonexpert = collect_level(kind, _MIX_LEVEL[mix], replaced, seed, reference, progress)
    mixture = contaminate(expert, nonexpert, ratio, name=mixture_name(mix, ratio))
    logger.info(f"Built {mixture.metadata.name}: {dataset_stats(mixture)}")
    return mixture


def collect_level(
    kind: EnvKind,
    level: PolicyLevel,
    n_transitions: int,
    seed: int,
    reference: Optional[ReferenceReturns] = None,
    progress: bool = False,
) -> Dataset:
    """Collect from the scripted policy of `level` on a child stream of `seed`

    Collection is sequential, so a shorter request yields a prefix of a longer one.
    """
    return collect(
        make_env(kind),
        ScriptedPolicy(level, kind),
        n_transitions,
        seed=Rng(seed).child(PolicyLevel(level).value).integer_seed(),
        reference=reference,
        progress=progress,
    )


def build_suite(
    kind: EnvKind,
    n_transitions: int,
    seed: int,
    reference: Optional[ReferenceReturns] = None,
    progress: bool = False,
) -> Dict[str, Dataset]:
    """The three pure datasets plus every mixture of `DEFAULT_SUITE`, keyed by name"""
    pure = {
        level.value: collect_level(kind, level, n_transitions, seed, reference, progress) for level in PolicyLevel
    }
    suite = dict(pure)
    for name, (mix, ratio) in DEFAULT_SUITE.items():
        suite[name] = contaminate(pure["expert"], pure[_MIX_LEVEL[mix].value], ratio, name=name)
    return suite
