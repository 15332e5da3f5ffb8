"""Test-set preparation: sampled parameters with cached reference solutions."""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from lisco.errors import ValidationError
from lisco.kkt import PrimalDual
from lisco.oracle import NewtonOptions, OracleSolution, OracleStatus, active_set_enumerate, solve_oracle
from lisco.problems import ProblemInstance, ProblemKind, instance_hash, sample_params

ORACLE_CACHE_NAME = "oracle_cache.jsonl"


def oracle_solve_batch(inst: ProblemInstance, x_batch: np.ndarray, opts: Optional[NewtonOptions] = None,
                       progress: bool = True) -> List[OracleSolution]:
    solutions = []
    failed = 0
    for x in tqdm(x_batch, desc="Oracle", disable=not progress):
        solution = solve_oracle(inst, x, opts)
        if not solution.converged and inst.kind == ProblemKind.CONVEX_QP and inst.n_g <= 12:
            solution = active_set_enumerate(inst, x)
        if not solution.converged:
            failed += 1
        solutions.append(solution)
    if failed:
        logging.warning(f"Oracle did not converge on {failed} of {len(solutions)} points")
    return solutions


def write_oracle_cache(inst: ProblemInstance, x_batch: np.ndarray, solutions: List[OracleSolution],
                       path, test_seed: Optional[int] = None) -> Path:
    key = instance_hash(inst)
    path = Path(path)
    with open(path, "w") as f:
        for index, (x, sol) in enumerate(zip(x_batch, solutions)):
            record = {
                "instance_hash": key,
                "test_seed": test_seed,
                "index": index,
                "x": np.asarray(x).tolist(),
                "y_star": sol.z_star.y.tolist(),
                "nu_star": sol.z_star.nu.tolist(),
                "lam_star": sol.z_star.lam.tolist(),
                "f_star": sol.objective,
                "t_star": sol.t_star,
                "status": sol.status.value,
                "iterations": sol.iterations,
            }
            f.write(json.dumps(record) + "\n")
    return path


def read_oracle_cache(inst: ProblemInstance, path) -> Tuple[np.ndarray, Dict[int, OracleSolution], Optional[int]]:
    """Cached test parameters and solutions keyed by index; the cache must belong to ``inst``."""
    key = instance_hash(inst)
    xs, solutions, seed = [], {}, None
    with open(path, "r") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            if record["instance_hash"] != key:
                raise ValidationError(f"Oracle cache {path} was computed for a different instance")
            seed = record.get("test_seed")
            xs.append(record["x"])
            solutions[int(record["index"])] = OracleSolution(
                z_star=PrimalDual.for_instance(inst, np.concatenate(
                    [np.asarray(record[name], dtype=float) for name in ("y_star", "nu_star", "lam_star")])),
                t_star=float(record["t_star"]),
                status=OracleStatus(record["status"]),
                iterations=int(record["iterations"]),
                objective=float(record["f_star"]),
            )
    return np.array(xs, dtype=float).reshape(len(xs), inst.n_h), solutions, seed


def prepare_test_set(inst: ProblemInstance, n_test: int, seed: int, out_dir,
                     opts: Optional[NewtonOptions] = None, progress: bool = True
                     ) -> Tuple[np.ndarray, Dict[int, OracleSolution]]:
    """Sample ``n_test`` parameters and solve them with the oracle, reusing a matching cache."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_path = out_dir / ORACLE_CACHE_NAME
    x_test = sample_params(inst, n_test, seed).x

    if cache_path.exists():
        try:
            x_cached, cached, cached_seed = read_oracle_cache(inst, cache_path)
            if cached_seed == seed and len(cached) == n_test and np.array_equal(x_cached, x_test):
                logging.info(f"Oracle cache already exists in '{cache_path.resolve()}'. Skipping oracle solves.")
                return x_test, cached
        except (ValidationError, KeyError, json.JSONDecodeError) as e:
            logging.warning(f"Ignoring unusable oracle cache {cache_path}: {e}")

    solutions = oracle_solve_batch(inst, x_test, opts, progress)
    write_oracle_cache(inst, x_test, solutions, cache_path, test_seed=seed)
    logging.info(f"Test set ready: {n_test} points, oracle cache saved at '{cache_path.resolve()}'")
    return x_test, dict(enumerate(solutions))
