import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from offrl_lab.datasets import (
    DEFAULT_SUITE,
    MixKind,
    Provenance,
    build_mixture,
    build_suite,
    collect,
    collect_level,
    contaminate,
    dataset_stats,
    fit_normalizer,
    load_dataset,
    metadata_path,
    mixture_name,
    percentile_filter,
    save_dataset,
)
from offrl_lab.envs import EnvKind, PolicyLevel, make_env, scripted_policy
from offrl_lab.exceptions import (
    ConfigurationError,
    ContractError,
    DatasetFormatError,
    DatasetIntegrityError,
    ShapeError,
)

from .conftest import make_dataset


def pointmass(level, n, seed=0):
    return collect(make_env(EnvKind.POINTMASS2D), scripted_policy(level, EnvKind.POINTMASS2D), n, seed=seed)


def test_collect_cuts_episodes_at_the_horizon():
    ds = pointmass(PolicyLevel.EXPERT, 250)
    assert len(ds) == 250
    assert_array_equal(np.flatnonzero(ds.dones), [99, 199])
    assert ds.metadata.counts[Provenance.EXPERT] == 250
    # consecutive rows inside an episode chain together
    assert_allclose(ds.next_states[:99], ds.states[1:100])


def test_expert_data_earns_more_than_random_data():
    expert = pointmass(PolicyLevel.EXPERT, 500)
    random = pointmass(PolicyLevel.RANDOM, 500)
    assert expert.metadata.average_reward > random.metadata.average_reward


def test_collect_is_deterministic():
    assert pointmass(PolicyLevel.MEDIUM, 300, seed=4) == pointmass(PolicyLevel.MEDIUM, 300, seed=4)
    assert pointmass(PolicyLevel.MEDIUM, 300, seed=4) != pointmass(PolicyLevel.MEDIUM, 300, seed=5)


def test_collect_level_prefix_property():
    long = collect_level(EnvKind.PENDULUM, PolicyLevel.RANDOM, 300, seed=1)
    short = collect_level(EnvKind.PENDULUM, PolicyLevel.RANDOM, 120, seed=1)
    assert_array_equal(long.actions[:120], short.actions)


def test_contaminate_keeps_size_and_counts():
    expert = pointmass(PolicyLevel.EXPERT, 1000)
    random = pointmass(PolicyLevel.RANDOM, 1000)
    mixed = contaminate(expert, random, 0.3)
    assert len(mixed) == 1000
    assert mixed.metadata.counts[Provenance.EXPERT] == 700
    assert mixed.metadata.counts[Provenance.RANDOM] == 300
    assert_array_equal(mixed.states[:700], expert.states[:700])
    assert_array_equal(mixed.states[700:], random.states[:300])


def test_contaminate_edges():
    expert = pointmass(PolicyLevel.EXPERT, 100)
    random = pointmass(PolicyLevel.RANDOM, 100)
    assert contaminate(expert, random, 0.0) is expert
    assert contaminate(expert, random, 1.0).metadata.counts[Provenance.EXPERT] == 0
    with pytest.raises(ContractError):
        contaminate(expert, random, 1.5)
    with pytest.raises(ContractError):
        contaminate(expert, random.select(range(10)), 0.5)
    pendulum = collect_level(EnvKind.PENDULUM, PolicyLevel.RANDOM, 100, seed=0)
    with pytest.raises(ConfigurationError):
        contaminate(expert, pendulum, 0.5)


def test_dataset_rejects_bad_columns():
    with pytest.raises(ShapeError):
        make_dataset([0.0, 1.0], states=np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        make_dataset([0.0], actions=np.array([[2.0, 0.0]]))


def test_columns_are_read_only():
    ds = make_dataset([1.0, 2.0])
    with pytest.raises(ValueError):
        ds.rewards[0] = 5.0


def test_stats_count_every_provenance():
    ds = make_dataset([1.0, 2.0, 3.0, 6.0], provenance=[0, 1, 2, 2])
    stats = dataset_stats(ds)
    assert (stats.total, stats.expert, stats.medium, stats.random, stats.nonexpert) == (4, 1, 1, 2, 3)
    assert stats.average_reward == pytest.approx(3.0)


def test_normalizer_floors_constant_dimensions():
    states = np.column_stack([np.arange(5.0), np.full(5, 2.0), np.zeros(5), np.ones(5)])
    normalizer = fit_normalizer(make_dataset(np.zeros(5), states=states))
    assert normalizer.std[1] == pytest.approx(1e-3)
    normalized = normalizer.apply(states)
    assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(normalized[:, 0].std(), 1.0)
    with pytest.raises(ContractError):
        fit_normalizer(make_dataset([]))


@pytest.mark.parametrize(
    "percent, kept",
    [(40, [1, 3]), (50, [1, 2, 3]), (100, [0, 1, 2, 3, 4]), (1, [1])],
)
def test_percentile_filter_examples(percent, kept):
    ds = make_dataset([1.0, 5.0, 3.0, 5.0, 2.0])
    filtered = percentile_filter(ds, percent)
    assert_array_equal(filtered.rewards, ds.rewards[kept])
    assert filtered.metadata.name == f"_top{percent:g}"


def test_percentile_filter_breaks_ties_by_index():
    gen = np.random.default_rng(0)
    rewards = gen.integers(0, 10, size=10_000).astype(float)
    ds = make_dataset(rewards)
    filtered = percentile_filter(ds, 10)
    order = np.lexsort((np.arange(10_000), -rewards))[:1000]
    assert_array_equal(filtered.states, ds.states[np.sort(order)])


def test_percentile_filter_rejects_bad_percent():
    with pytest.raises(ContractError):
        percentile_filter(make_dataset([1.0]), 0.0)


def test_save_and_load_reproduce_the_dataset(tmp_path):
    ds = pointmass(PolicyLevel.MEDIUM, 150)
    ds = ds.with_normalizer(fit_normalizer(ds))
    path = save_dataset(ds, tmp_path / "medium.jsonl")
    assert metadata_path(path).exists()
    assert load_dataset(path) == ds


def test_truncated_file_fails_integrity(tmp_path):
    path = save_dataset(pointmass(PolicyLevel.EXPERT, 20), tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DatasetIntegrityError) as info:
        load_dataset(path)
    assert (info.value.expected, info.value.found) == (20, 19)


def test_malformed_record_names_the_line(tmp_path):
    path = save_dataset(pointmass(PolicyLevel.EXPERT, 5), tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    lines[2] = '{"s": [0, 0'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as info:
        load_dataset(path)
    assert info.value.line_number == 3


def test_out_of_box_action_names_the_line(tmp_path):
    path = save_dataset(pointmass(PolicyLevel.EXPERT, 5), tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    record = json.loads(lines[3])
    record["a"] = [1.5, 0.0]
    lines[3] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as info:
        load_dataset(path)
    assert info.value.line_number == 4


def test_wrong_provenance_counts_fail_integrity(tmp_path):
    path = save_dataset(pointmass(PolicyLevel.EXPERT, 5), tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    record = json.loads(lines[0])
    record["provenance"] = "random"
    lines[0] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetIntegrityError):
        load_dataset(path)


def test_mixture_names():
    assert mixture_name(MixKind.EXPERT_RANDOM, 0.5) == "er50"
    assert mixture_name(MixKind.EXPERT_MEDIUM, 0.3) == "em30"


def test_build_mixture(pointmass_reference):
    ds = build_mixture(EnvKind.POINTMASS2D, MixKind.EXPERT_MEDIUM, 0.3, 200, seed=2, reference=pointmass_reference)
    assert ds.metadata.name == "em30"
    assert ds.metadata.counts[Provenance.MEDIUM] == 60
    assert ds.metadata.reference_returns == pointmass_reference
    pure = build_mixture(EnvKind.POINTMASS2D, MixKind.EXPERT_RANDOM, 0.0, 200, seed=2)
    assert pure.metadata.counts[Provenance.EXPERT] == 200


def test_build_suite_names_and_sizes():
    suite = build_suite(EnvKind.PENDULUM, 100, seed=0)
    assert set(suite) == {"expert", "medium", "random"} | set(DEFAULT_SUITE)
    assert all(len(ds) == 100 for ds in suite.values())
    assert suite["er70"].metadata.counts[Provenance.RANDOM] == 70
