"""Files of a run directory

    config.yaml              run config snapshot
    metrics.csv              one row per evaluation checkpoint (EVAL_COLUMNS)
    train_metrics.csv        one row every `log_interval` steps (TRAIN_COLUMNS)
    checkpoint_final.json    state after the last step
    checkpoint_best.json     state at the best-scoring checkpoint
    separability.csv         expert and non-expert Q histograms, 50 rows per checkpoint
    summary.json             final-window score and failure record

The CSVs are append-only while the run lasts and are fsynced at every checkpoint.
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from offrl_lab.agents.updates import StepMetrics
from offrl_lab.config import PathLike
from offrl_lab.evaluation import EVAL_COLUMNS, EvalReport, Separability

TRAIN_COLUMNS = list(StepMetrics.__dataclass_fields__)
SEPARABILITY_COLUMNS = ["step", "bin", "bin_low", "bin_high", "expert", "nonexpert"]

CONFIG_FILE = "config.yaml"
METRICS_FILE = "metrics.csv"
TRAIN_METRICS_FILE = "train_metrics.csv"
SEPARABILITY_FILE = "separability.csv"
FINAL_CHECKPOINT = "checkpoint_final.json"
BEST_CHECKPOINT = "checkpoint_best.json"
SUMMARY_FILE = "summary.json"


def _append(fp, row: Dict[str, Any], columns: List[str]) -> None:
    pd.DataFrame([row], columns=columns).to_csv(fp, header=False, index=False)


def separability_frame(step: int, separability: Separability) -> pd.DataFrame:
    """One row per histogram bin; both classes share the bin edges"""
    edges = separability.bin_edges
    return pd.DataFrame(
        {
            "step": step,
            "bin": np.arange(len(edges) - 1),
            "bin_low": edges[:-1],
            "bin_high": edges[1:],
            "expert": separability.expert_counts,
            "nonexpert": separability.nonexpert_counts,
        },
        columns=SEPARABILITY_COLUMNS,
    )


def write_json(path: PathLike, payload: Dict[str, Any]) -> None:
    """Write JSON and make sure it hit the disk"""
    with open(path, "w") as fp:
        json.dump(payload, fp, indent=2)
        fp.flush()
        os.fsync(fp.fileno())


class RunWriter:
    """Owns the files of one run directory"""

    def __init__(self, run_dir: PathLike) -> None:
        """Create the directory and the CSVs with their headers

        Parameters
        ----------
        run_dir : PathLike
            directory of this run, created if missing; existing CSVs are replaced
        """
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._metrics = open(self.run_dir / METRICS_FILE, "w")
        self._train = open(self.run_dir / TRAIN_METRICS_FILE, "w")
        self._separability = open(self.run_dir / SEPARABILITY_FILE, "w")
        pd.DataFrame(columns=EVAL_COLUMNS).to_csv(self._metrics, index=False)
        pd.DataFrame(columns=TRAIN_COLUMNS).to_csv(self._train, index=False)
        pd.DataFrame(columns=SEPARABILITY_COLUMNS).to_csv(self._separability, index=False)

    def __enter__(self) -> "RunWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def append_step(self, metrics: StepMetrics) -> None:
        """Add a row to train_metrics.csv"""
        _append(self._train, metrics.as_row(), TRAIN_COLUMNS)

    def append_eval(self, report: EvalReport) -> None:
        """Add a row to metrics.csv, the histograms to separability.csv, and sync"""
        _append(self._metrics, report.as_row(), EVAL_COLUMNS)
        if report.separability is not None:
            separability_frame(report.step, report.separability).to_csv(
                self._separability, header=False, index=False
            )
        self.sync()

    def sync(self) -> None:
        for fp in (self._train, self._metrics, self._separability):
            fp.flush()
            os.fsync(fp.fileno())

    def write_checkpoint(self, name: str, payload: Optional[Dict[str, Any]]) -> None:
        if payload is not None:
            write_json(self.run_dir / name, payload)

    def write_summary(self, summary: Dict[str, Any]) -> None:
        write_json(self.run_dir / SUMMARY_FILE, summary)

    def close(self) -> None:
        if not self._metrics.closed:
            self.sync()
            self._metrics.close()
            self._train.close()
            self._separability.close()


def final_window_score(scores: Sequence[float], window: int) -> Dict[str, Optional[float]]:
    """Mean and std of the last `window` normalized scores"""
    tail = np.asarray(scores[-window:], dtype=np.float64)
    if tail.size == 0:
        return {"final_score_mean": None, "final_score_std": None}
    return {"final_score_mean": float(tail.mean()), "final_score_std": float(tail.std())}


def aggregate_summaries(summaries: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Across-seed mean, std and median of the per-seed final scores"""
    frame = pd.DataFrame(list(summaries))
    scores = frame["final_score_mean"].dropna().astype(float)
    return {
        "seeds": frame["seed"].tolist(),
        "runs": len(frame),
        "failures": int(frame["failed"].astype(bool).sum()),
        "score_mean": float(scores.mean()) if len(scores) else None,
        "score_std": float(scores.std(ddof=0)) if len(scores) else None,
        "score_median": float(scores.median()) if len(scores) else None,
        "per_seed": list(summaries),
    }


def load_summary(run_dir: PathLike) -> Dict[str, Any]:
    """Read the summary.json of a run directory"""
    with open(Path(run_dir) / SUMMARY_FILE) as fp:
        return json.load(fp)
