"""Check the qualitative trends of finished run sets

Each argument is a run-set directory written by `offrl-lab train` (one `seed_*` folder
per seed plus summary.json) or, for --ablate, the output directory of `offrl-lab ablate`.
Checks whose directories are not given are skipped.
"""
from argparse import ArgumentParser
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from offrl_lab.cli.writer import METRICS_FILE, SUMMARY_FILE, load_summary


def seed_dirs(run_set: Path) -> List[Path]:
    return sorted(p for p in run_set.glob("seed_*") if (p / SUMMARY_FILE).exists())


def median_score(run_set: Path) -> float:
    return float(load_summary(run_set)["score_median"])


def onset_row(run_dir: Path) -> Optional[pd.Series]:
    """Metrics row at the failure onset, or the last row when the run did not fail"""
    metrics = pd.read_csv(run_dir / METRICS_FILE)
    if metrics.empty:
        return None
    onset = load_summary(run_dir)["verdict"]["onset_index"]
    return metrics.iloc[onset if onset is not None else -1]


def check_failure(plain: Path, plain_expert: Path) -> Dict[str, bool]:
    summary = load_summary(plain)
    flagged = summary["failures"] > 0
    gap = median_score(plain_expert) - median_score(plain)
    divergence_ok = []
    for run_dir in seed_dirs(plain):
        metrics = pd.read_csv(run_dir / METRICS_FILE)
        row = onset_row(run_dir)
        if row is None:
            continue
        first = metrics.iloc[0]
        divergence_ok.append(
            row["divergence_nonexpert_p75"] > 3.0 * first["divergence_nonexpert_p75"]
            and row["divergence_expert_p75"] <= 2.0 * first["divergence_expert_p75"]
        )
    return {
        "plain fails or trails its expert run by 30 points": flagged or gap >= 30.0,
        "non-expert divergence grows while expert divergence holds": bool(divergence_ok) and all(divergence_ok),
    }


def check_recovery(
    plain_expert: Path, plusplus: Path, bear: Optional[Path], bear_plusplus: Optional[Path]
) -> Dict[str, bool]:
    checks = {"TD3BC++ reaches 80% of plain expert score": median_score(plusplus) >= 0.8 * median_score(plain_expert)}
    if bear is not None and bear_plusplus is not None:
        checks["BEAR++ beats BEAR by 20 points"] = median_score(bear_plusplus) - median_score(bear) >= 20.0
    return checks


def check_ablation(ablate: Path, heavy: str, light: str) -> Dict[str, bool]:
    table = pd.read_csv(ablate / "comparison.csv").set_index(["dataset", "variant"])["score_median"]
    return {
        f"{heavy}: ++ >= +GP > plain": table[heavy, "gp_cr"] >= table[heavy, "gp"] > table[heavy, "plain"],
        f"{light}: +CR >= plain": table[light, "cr"] >= table[light, "plain"],
    }


def check_separability(plain: Path, plusplus: Path) -> Dict[str, bool]:
    final_auc = np.median([pd.read_csv(d / METRICS_FILE)["q_separability_auc"].iloc[-1] for d in seed_dirs(plusplus)])
    onset_auc = np.median([onset_row(d)["q_separability_auc"] for d in seed_dirs(plain)])
    return {
        "TD3BC++ separates expert actions (AUC >= 0.9)": final_auc >= 0.9,
        "plain AUC at failure is 0.15 lower": onset_auc <= final_auc - 0.15,
    }


def main(args):  # noqa: D103
    results: Dict[str, bool] = {}
    if args.plain and args.plain_expert:
        results.update(check_failure(args.plain, args.plain_expert))
    if args.plain_expert and args.plusplus:
        results.update(check_recovery(args.plain_expert, args.plusplus, args.bear, args.bear_plusplus))
    if args.ablate:
        results.update(check_ablation(args.ablate, args.heavy, args.light))
    if args.plain and args.plusplus:
        results.update(check_separability(args.plain, args.plusplus))

    for name, passed in results.items():
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    if not results:
        print("No run sets given, nothing checked")


if __name__ == "__main__":
    parser = ArgumentParser(description="Report trend checks over finished run sets")
    parser.add_argument("--plain", type=Path, help="plain TD3+BC on er50")
    parser.add_argument("--plain-expert", type=Path, help="plain TD3+BC on the pure expert set")
    parser.add_argument("--plusplus", type=Path, help="TD3BC++ on er50")
    parser.add_argument("--bear", type=Path, help="plain BEAR-QL on er50")
    parser.add_argument("--bear-plusplus", type=Path, help="BEAR++ on er50")
    parser.add_argument("--ablate", type=Path, help="output directory of `offrl-lab ablate`")
    parser.add_argument("--heavy", default="er50", help="heavily contaminated dataset label")
    parser.add_argument("--light", default="er10", help="lightly contaminated dataset label")

    args = parser.parse_args()
    main(args)
