"""Run configuration and command line arguments of `offrl-lab`"""
from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import Field, root_validator, validator

from offrl_lab.agents.config import AgentConfig
from offrl_lab.config import BaseSettings
from offrl_lab.datasets import MixKind, mixture_name
from offrl_lab.envs import EnvKind
from offrl_lab.evaluation import EvalConfig


class DatasetRecipe(BaseSettings):
    """How to generate a contaminated dataset instead of reading one"""

    mix: MixKind = MixKind.EXPERT_RANDOM
    """Which non-expert level replaces the expert tail"""
    ratio: float = Field(0.5, ge=0.0, le=1.0)
    """Replaced fraction"""
    n: int = Field(40000, ge=1)
    """Number of transitions"""
    seed: int = 0
    """Seed of the data collection"""

    @property
    def name(self) -> str:
        """`er50`-style label"""
        return mixture_name(self.mix, self.ratio)


class DatasetSource(BaseSettings):
    """A dataset file or a recipe, with an optional label for output directories"""

    path: Optional[Path] = None
    """JSONL dataset file written by `offrl-lab dataset`"""
    recipe: Optional[DatasetRecipe] = None
    """Generation recipe, used when no path is given"""
    name: Optional[str] = None
    """Label; defaults to the file stem or the recipe name"""

    @root_validator(skip_on_failure=True)
    def _exactly_one(cls, values):  # noqa: N805
        if (values.get("path") is None) == (values.get("recipe") is None):
            raise ValueError("a dataset source needs exactly one of 'path' and 'recipe'")
        return values

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.path is not None:
            return self.path.stem
        return self.recipe.name  # type: ignore[union-attr]


class RunConfig(BaseSettings):
    """Everything one `train`, `ablate` or `sweep` invocation needs"""

    env: EnvKind
    """Environment the data comes from"""
    agent: AgentConfig = AgentConfig()
    """Algorithm and hyperparameters"""
    evaluation: EvalConfig = EvalConfig()
    """Checkpoint evaluation and failure detection"""
    dataset: Optional[DatasetSource] = None
    """Training data of `train` and `sweep`"""
    datasets: List[DatasetSource] = []
    """Training data of `ablate` (falls back to `dataset`)"""
    percentile: Optional[float] = Field(None, gt=0.0, le=100.0)
    """Train only on the top X% transitions by immediate reward (%BC, %TD3+BC)"""
    output_dir: Path = Path("runs")
    """Root of every run directory written"""
    seeds: List[int] = [0, 1, 2, 3, 4]
    """One run per seed; the seed replaces `agent.seed`"""
    workers: Optional[int] = Field(None, ge=1)
    """Parallel runs; defaults to the number of CPUs"""
    sweep_param: str = "lambda_gp"
    """AgentConfig field varied by `sweep`"""
    sweep_values: List[float] = [0.0, 0.01, 0.1, 1.0, 5.0]
    """Values of `sweep_param`"""

    @validator("seeds")
    def _unique_seeds(cls, value: List[int]) -> List[int]:  # noqa: N805
        if not value or len(set(value)) != len(value):
            raise ValueError("seeds must be a non-empty list without repeats")
        return value

    @validator("sweep_param")
    def _known_param(cls, value: str) -> str:  # noqa: N805
        if value not in AgentConfig.__fields__:
            raise ValueError(f"'{value}' is not an agent setting")
        return value

    @property
    def dataset_sources(self) -> List[DatasetSource]:
        """Datasets an ablation runs over"""
        if self.datasets:
            return list(self.datasets)
        return [] if self.dataset is None else [self.dataset]


def parse_args(argv: Optional[Sequence[str]] = None) -> Namespace:
    """Parse command line args

    Flags only select the command and paths; hyperparameters live in the run config.

    Returns
    -------
    Namespace
        A namespace of the arguments
    """
    parser = ArgumentParser(prog="offrl-lab", description="Desk-scale offline RL experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress along the way")
    commands = parser.add_subparsers(dest="command", required=True)

    dataset = commands.add_parser("dataset", help="Collect datasets and write their statistics")
    dataset.add_argument("-e", "--env", choices=[k.value for k in EnvKind], required=True)
    dataset.add_argument(
        "-m", "--mix", choices=[m.value for m in MixKind], default=MixKind.EXPERT_RANDOM.value
    )
    dataset.add_argument(
        "-r", "--ratio", type=float, help="Contamination ratio; omit to build the standard suite"
    )
    dataset.add_argument("-n", "--n", type=int, default=20000, help="Transitions per dataset")
    dataset.add_argument("-s", "--seed", type=int, default=0)
    dataset.add_argument("-o", "--out", type=Path, default=Path("data"), help="Output directory")

    for name, text in (
        ("train", "Train one configuration for every seed"),
        ("ablate", "Train plain, +GP, +CR and ++ variants on every dataset"),
        ("sweep", "Train one run set per value of the swept setting"),
    ):
        sub = commands.add_parser(name, help=text)
        sub.add_argument("config", type=Path, help="Path to the run config (yaml or json)")
        sub.add_argument("-w", "--workers", type=int, help="Override the number of parallel runs")

    evaluate = commands.add_parser("evaluate", help="Evaluate a saved checkpoint on a dataset")
    evaluate.add_argument("checkpoint", type=Path)
    evaluate.add_argument("-d", "--dataset", type=Path, required=True)
    evaluate.add_argument("-c", "--config", type=Path, help="Run config whose evaluation settings apply")

    commands.add_parser("schema", help="Print the JSON schema of run configs")
    return parser.parse_args(argv)
