import json
import logging
from pathlib import Path
from typing import Iterable, Optional

import pandas as pd

from lisco.errors import ValidationError

SUMMARY_COLUMNS = ["method", "metric", "mean", "std"]
FRACTION_COLUMNS = ["method", "tol", "k", "fraction"]


def instance_dirs(results_dir, seeds: Optional[Iterable[int]] = None) -> list:
    """Per-instance result folders, restricted to ``instance_<seed>`` for the given seeds."""
    results_dir = Path(results_dir)
    if seeds is not None:
        wanted = [results_dir / f"instance_{seed}" for seed in seeds]
        return [d for d in wanted if d.is_dir()]
    return sorted((d for d in results_dir.iterdir() if d.is_dir() and d.name.startswith("instance_")),
                  key=lambda d: d.name)


def read_instance_metrics(results_dir, seeds: Optional[Iterable[int]] = None) -> pd.DataFrame:
    """Long table (instance, method, metric, value) of every per-instance metrics.json."""
    rows = []
    for directory in instance_dirs(results_dir, seeds):
        metrics_file = directory / "metrics.json"
        if not metrics_file.exists():
            logging.warning(f"No metrics.json in {directory}, skipping")
            continue
        with open(metrics_file, "r") as f:
            data = json.load(f)
        for method, summary in data["methods"].items():
            for metric, value in summary.items():
                if isinstance(value, (int, float)) and not isinstance(value, bool):
                    rows.append((data["instance_seed"], method, metric, float(value)))
    if not rows:
        raise ValidationError(f"No instance metrics found under {results_dir}")
    return pd.DataFrame(rows, columns=["instance", "method", "metric", "value"])


def calculate_summary(metrics: pd.DataFrame) -> pd.DataFrame:
    """Mean and (population) standard deviation across instances for every method and metric."""
    grouped = metrics.groupby(["method", "metric"], sort=True)["value"]
    summary = grouped.agg(mean="mean", std=lambda v: v.std(ddof=0)).reset_index()
    return summary[SUMMARY_COLUMNS]


def average_fractions(results_dir, seeds: Optional[Iterable[int]] = None) -> pd.DataFrame:
    frames = [pd.read_csv(d / "fractions.csv") for d in instance_dirs(results_dir, seeds)
              if (d / "fractions.csv").exists()]
    if not frames:
        return pd.DataFrame(columns=FRACTION_COLUMNS)
    combined = pd.concat(frames, ignore_index=True)
    averaged = combined.groupby(["method", "tol", "k"], sort=False)["fraction"].mean().reset_index()
    return averaged.sort_values(["method", "tol", "k"], ascending=[True, False, True], ignore_index=True)


def write_summary(results_dir, seeds: Optional[Iterable[int]] = None) -> pd.DataFrame:
    results_dir = Path(results_dir)
    summary = calculate_summary(read_instance_metrics(results_dir, seeds))
    summary.to_csv(results_dir / "summary.csv", index=False)
    logging.info(f"Cross-instance summary written to {results_dir / 'summary.csv'}")
    return summary


def read_summary(results_dir) -> pd.DataFrame:
    summary_file = Path(results_dir) / "summary.csv"
    if not summary_file.exists():
        raise ValidationError(f"No summary.csv in {results_dir}; run 'lisco bench' first")
    return pd.read_csv(summary_file)
