"""`offrl-lab` commands: dataset, train, ablate, sweep, evaluate and schema"""
import json
import logging
import os
import sys
from argparse import Namespace
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from pydantic import ValidationError
from tqdm.contrib.concurrent import process_map

from offrl_lab.agents.checkpoint import load_checkpoint
from offrl_lab.agents.config import AgentConfig, Algorithm
from offrl_lab.agents.trainer import train
from offrl_lab.cli.config import DatasetSource, RunConfig, parse_args
from offrl_lab.cli.writer import (
    BEST_CHECKPOINT,
    CONFIG_FILE,
    FINAL_CHECKPOINT,
    RunWriter,
    aggregate_summaries,
    final_window_score,
    write_json,
)
from offrl_lab.datasets import (
    Dataset,
    MixKind,
    build_mixture,
    build_suite,
    dataset_stats,
    load_dataset,
    percentile_filter,
    save_dataset,
)
from offrl_lab.diffnet import Rng
from offrl_lab.envs import EnvKind, reference_returns
from offrl_lab.evaluation import EvalConfig, evaluate_checkpoint
from offrl_lab.exceptions import (
    CheckpointFormatError,
    ConfigurationError,
    DatasetFormatError,
    DatasetIntegrityError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

STATS_COLUMNS = ["name", "total", "expert", "medium", "random", "nonexpert", "average_reward"]
COMPARISON_COLUMNS = [
    "dataset", "variant", "use_gp", "use_cr", "runs", "failures", "score_mean", "score_std", "score_median"
]
SWEEP_COLUMNS = ["value", "runs", "failures", "score_mean", "score_std", "score_median"]

# name -> (use_gp, use_cr)
VARIANTS = {"plain": (False, False), "gp": (True, False), "cr": (False, True), "gp_cr": (True, True)}


def _write_stats(datasets: List[Dataset], path: Path) -> pd.DataFrame:
    frame = pd.DataFrame([dataset_stats(ds).as_row() for ds in datasets], columns=STATS_COLUMNS)
    frame.to_csv(path, index=False)
    return frame


def cmd_dataset(args: Namespace) -> List[Path]:
    """Collect datasets, write them as JSONL and their statistics as `stats.csv`

    Without `--ratio` the pure expert, medium and random sets and the er10, er30, er50,
    er70 and em30 mixtures are written; with it, only the requested mixture.
    """
    kind = EnvKind(args.env)
    if args.ratio is not None and not 0.0 <= args.ratio <= 1.0:
        raise ConfigurationError(f"--ratio must lie in [0, 1], got {args.ratio}")
    if args.n < 1:
        raise ConfigurationError(f"--n must be positive, got {args.n}")
    reference = reference_returns(kind, seed=EvalConfig().seed, episodes=EvalConfig().reference_episodes)
    if args.ratio is None:
        datasets = list(build_suite(kind, args.n, args.seed, reference, progress=args.verbose).values())
    else:
        datasets = [build_mixture(kind, MixKind(args.mix), args.ratio, args.n, args.seed, reference, args.verbose)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [save_dataset(ds, out / f"{ds.metadata.name}.jsonl") for ds in datasets]
    stats = _write_stats(datasets, out / "stats.csv")
    logger.info(f"Dataset statistics:\n{stats.to_string(index=False)}")
    return paths


def resolve_dataset(source: DatasetSource, cfg: RunConfig) -> Path:
    """Path of the dataset file, generating it under `output_dir/datasets` for recipes"""
    if source.path is not None:
        return source.path
    recipe = source.recipe
    path = cfg.output_dir / "datasets" / f"{source.label}.jsonl"
    if not path.exists():
        reference = reference_returns(cfg.env, seed=cfg.evaluation.seed, episodes=cfg.evaluation.reference_episodes)
        ds = build_mixture(cfg.env, recipe.mix, recipe.ratio, recipe.n, recipe.seed, reference)
        save_dataset(ds, path)
    return path


@dataclass
class SeedJob:
    """One run: picklable so it can cross into a worker process"""

    agent: Dict[str, Any]
    evaluation: Dict[str, Any]
    env: str
    dataset_path: str
    percentile: Optional[float]
    run_dir: str
    config_snapshot: Dict[str, Any]
    progress: bool = False


def run_seed(job: SeedJob) -> Dict[str, Any]:
    """Train one seed and write its run directory; returns the summary"""
    agent = AgentConfig(**job.agent)
    eval_cfg = EvalConfig(**job.evaluation)
    dataset = load_dataset(job.dataset_path)
    if job.percentile is not None:
        dataset = percentile_filter(dataset, job.percentile)

    with RunWriter(job.run_dir) as writer:
        RunConfig(**job.config_snapshot).dump_yaml(writer.run_dir / CONFIG_FILE)
        result = train(
            agent,
            dataset,
            eval_cfg,
            env_kind=EnvKind(job.env),
            on_step=writer.append_step,
            on_eval=lambda report, _state: writer.append_eval(report),
            progress=job.progress,
        )
        writer.write_checkpoint(FINAL_CHECKPOINT, result.final_checkpoint)
        writer.write_checkpoint(BEST_CHECKPOINT, result.best_checkpoint)
        scores = [r.normalized_score for r in result.reports]
        summary = {
            "seed": agent.seed,
            "algorithm": agent.algorithm.value,
            "variant": agent.variant,
            "dataset": dataset.metadata.name,
            "steps_completed": result.state.step,
            "checkpoints": len(result.reports),
            **final_window_score(scores, eval_cfg.final_window),
            "best_score": max(scores) if scores else None,
            "failed": result.failed or result.verdict.failed,
            "aborted": result.failed,
            "failure_reason": result.failure_reason,
            "failure_step": result.failure_step,
            "verdict": asdict(result.verdict),
        }
        writer.write_summary(summary)
    return summary


def run_set(
    cfg: RunConfig, agent: AgentConfig, dataset_path: Path, out_dir: Path, workers: int, progress: bool
) -> Dict[str, Any]:
    """Run every seed of `cfg` with `agent` and write the aggregate summary to `out_dir`"""
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for seed in cfg.seeds:
        seed_agent = agent.copy(update={"seed": seed})
        snapshot = cfg.copy(update={"agent": seed_agent, "seeds": [seed]})
        jobs.append(
            SeedJob(
                agent=seed_agent.plain(),
                evaluation=cfg.evaluation.plain(),
                env=cfg.env.value,
                dataset_path=str(dataset_path),
                percentile=cfg.percentile,
                run_dir=str(out_dir / f"seed_{seed}"),
                config_snapshot=snapshot.plain(),
                progress=progress and workers == 1,
            )
        )
    if workers > 1 and len(jobs) > 1:
        summaries = process_map(run_seed, jobs, max_workers=workers, desc=str(out_dir), disable=not progress)
    else:
        summaries = [run_seed(job) for job in jobs]
    aggregate = aggregate_summaries(summaries)
    write_json(out_dir / "summary.json", aggregate)
    return aggregate


def _load_config(args: Namespace) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config)
    if getattr(args, "workers", None) is not None:
        cfg = cfg.copy(update={"workers": args.workers})
    return cfg


def _workers(cfg: RunConfig) -> int:
    return cfg.workers or os.cpu_count() or 1


def _single_dataset(cfg: RunConfig) -> Path:
    if cfg.dataset is None:
        raise ConfigurationError("this command needs 'dataset' in the run config")
    return resolve_dataset(cfg.dataset, cfg)


def cmd_train(args: Namespace) -> Path:
    """One run per seed under `output_dir`, plus the aggregate summary.json"""
    cfg = _load_config(args)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump_yaml(cfg.output_dir / CONFIG_FILE)
    aggregate = run_set(cfg, cfg.agent, _single_dataset(cfg), cfg.output_dir, _workers(cfg), args.verbose)
    logger.info(f"Final score {aggregate['score_mean']} +- {aggregate['score_std']} over {aggregate['runs']} runs")
    return cfg.output_dir


def cmd_ablate(args: Namespace) -> Path:
    """plain, +GP, +CR and ++ on every dataset; writes comparison.csv"""
    cfg = _load_config(args)
    sources = cfg.dataset_sources
    if not sources:
        raise ConfigurationError("ablate needs 'datasets' (or 'dataset') in the run config")
    if cfg.agent.algorithm is Algorithm.BC:
        raise ConfigurationError("the plugins act on critics, bc has none")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump_yaml(cfg.output_dir / CONFIG_FILE)

    rows = []
    for source in sources:
        path = resolve_dataset(source, cfg)
        for variant, (use_gp, use_cr) in VARIANTS.items():
            agent = cfg.agent.copy(update={"use_gp": use_gp, "use_cr": use_cr})
            out_dir = cfg.output_dir / source.label / variant
            aggregate = run_set(cfg, agent, path, out_dir, _workers(cfg), args.verbose)
            rows.append(
                {
                    "dataset": source.label,
                    "variant": variant,
                    "use_gp": use_gp,
                    "use_cr": use_cr,
                    **{key: aggregate[key] for key in COMPARISON_COLUMNS[4:]},
                }
            )
    pd.DataFrame(rows, columns=COMPARISON_COLUMNS).to_csv(cfg.output_dir / "comparison.csv", index=False)
    return cfg.output_dir


def cmd_sweep(args: Namespace) -> Path:
    """One run set per value of `sweep_param`; writes sweep.csv sorted by value"""
    cfg = _load_config(args)
    path = _single_dataset(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump_yaml(cfg.output_dir / CONFIG_FILE)

    rows = []
    for value in sorted(cfg.sweep_values):
        # validates the value against the field's range
        agent = AgentConfig(**{**cfg.agent.plain(), cfg.sweep_param: value})
        out_dir = cfg.output_dir / f"{cfg.sweep_param}={value:g}"
        aggregate = run_set(cfg, agent, path, out_dir, _workers(cfg), args.verbose)
        rows.append({"value": value, **{key: aggregate[key] for key in SWEEP_COLUMNS[1:]}})
    pd.DataFrame(rows, columns=SWEEP_COLUMNS).to_csv(cfg.output_dir / "sweep.csv", index=False)
    return cfg.output_dir


def cmd_evaluate(args: Namespace) -> Dict[str, Any]:
    """Evaluate a checkpoint file on a dataset and print the report as JSON"""
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    eval_cfg = RunConfig.from_yaml(args.config).evaluation if args.config else EvalConfig()
    reference = dataset.metadata.reference_returns or reference_returns(
        dataset.metadata.env_kind, seed=eval_cfg.seed, episodes=eval_cfg.reference_episodes
    )
    gen = Rng(eval_cfg.seed).child("evaluation").generator
    report = evaluate_checkpoint(state, dataset, eval_cfg, reference, gen)
    row = report.as_row()
    print(json.dumps(row, indent=2))
    return row


def cmd_schema(args: Namespace) -> str:
    """Print the JSON schema of run configs"""
    schema = RunConfig.schema_json(indent=2)
    print(schema)
    return schema


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "schema": cmd_schema,
}


def main(args):  # noqa: D103
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except (ValidationError, ConfigurationError) as err:
        logger.error(f"configuration error: {err}")
        return EXIT_CONFIG
    except (OSError, DatasetFormatError, DatasetIntegrityError, CheckpointFormatError) as err:
        logger.error(f"I/O error: {err}")
        return EXIT_IO
    return EXIT_OK


def run() -> None:
    """Console entry point"""
    sys.exit(main(parse_args()))


if __name__ == "__main__":
    run()
