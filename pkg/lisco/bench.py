"""Experiment harness: train, solve and score every method on a set of generated instances.

Each instance gets its own ``instance_<seed>/`` directory holding the instance,
the oracle cache, weights, training histories, raw reports, metrics and
convergence fractions. The top-level directory collects provenance, metrics
per instance, cross-instance summaries and averaged fractions.
"""
import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from lisco.config import ConfigMixin, check_seed, require
from lisco.dataset import prepare_test_set
from lisco.errors import ExperimentError, GapUndefinedError, ValidationError
from lisco.lisco_solver import (SolveOptions, SolveReport, SolveTrace, lisco_solve_batch, predictor_only_report,
                                write_reports)
from lisco.nn import MlpParams, save_weights
from lisco.oracle import NewtonOptions, OracleSolution, optimality_gap
from lisco.problems import (ProblemInstance, ProblemKind, gen_instance, instance_hash, load_instance, objective,
                            save_instance)
from lisco.training import (PredictorTrainConfig, SolverTrainConfig, network_metadata, train_predictor, train_solver,
                            write_history)
from lisco.utils.aggregate_results import average_fractions, write_summary

METHODS = ("predictor", "lisco_with_predictor", "lisco_without_predictor")
FRACTION_COLUMNS = ["tol", "k", "fraction"]
STALE_MARKER = "STALE"
TIMING_FIELDS = ("wall_median_converged", "wall_max_converged", "wall_median_all", "wall_max_all")


@dataclass
class ExperimentConfig(ConfigMixin):
    problem_kind: str = "convex_qp"
    n_y: int = 20
    n_h: int = 10
    n_g: int = 10
    instance_file: Optional[str] = None
    instance_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    n_test: int = 200
    test_seed: int = 1000
    tolerances: List[float] = field(default_factory=lambda: [1e-6, 1e-8])
    checkpoints: List[int] = field(default_factory=lambda: [10, 20, 50, 100, 500])
    success_tol: float = 1e-8
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    out_dir: str = "lisco_results"
    predictor: PredictorTrainConfig = field(default_factory=PredictorTrainConfig)
    solver: SolverTrainConfig = field(default_factory=SolverTrainConfig)
    solve: SolveOptions = field(default_factory=lambda: SolveOptions(record_trace=True))
    oracle: NewtonOptions = field(default_factory=NewtonOptions)

    _NESTED = {"predictor": PredictorTrainConfig, "solver": SolverTrainConfig,
               "solve": SolveOptions, "oracle": NewtonOptions}

    @classmethod
    def desk(cls) -> "ExperimentConfig":
        return cls()

    @classmethod
    def paper(cls) -> "ExperimentConfig":
        return cls(n_y=100, n_h=50, n_g=50, instance_seeds=[0, 1, 2, 3, 4], n_test=1000,
                   predictor=PredictorTrainConfig.paper(), solver=SolverTrainConfig.paper())

    @classmethod
    def from_dict(cls, data=None, base=None) -> "ExperimentConfig":
        """Nested blocks (``predictor``, ``solver``, ``solve``, ``oracle``) override field by field."""
        base = base if base is not None else cls()
        data = {k: v for k, v in dict(data or {}).items() if not k.startswith("_")}
        for name, block_cls in cls._NESTED.items():
            if name in data:
                data[name] = block_cls.from_dict(data[name], base=getattr(base, name))
        return super().from_dict(data, base=base)

    def validate(self):
        ProblemKind.parse(self.problem_kind)
        require(self.n_test >= 1, f"n_test must be at least 1, got {self.n_test}")
        require(len(self.instance_seeds) >= 1, "instance_seeds must not be empty")
        for seed in self.instance_seeds + [self.test_seed]:
            check_seed("seed", seed)
        require(all(t > 0 for t in self.tolerances), "tolerances must be positive")
        require(all(a > b for a, b in zip(self.tolerances, self.tolerances[1:])), "tolerances must be descending")
        require(all(k >= 0 for k in self.checkpoints), "checkpoints must be non-negative")
        require(all(a < b for a, b in zip(self.checkpoints, self.checkpoints[1:])), "checkpoints must be ascending")
        require(self.success_tol > 0, "success_tol must be positive")
        unknown = sorted(set(self.methods) - set(METHODS))
        require(not unknown and self.methods, f"methods must be a non-empty subset of {METHODS}, got {self.methods}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Derive every seed of the experiment from a single one."""
        check_seed("seed", seed)
        return self.with_changes(
            instance_seeds=[seed + i for i in range(len(self.instance_seeds))],
            test_seed=seed + 1000,
            predictor=self.predictor.with_changes(seed=seed),
            solver=self.solver.with_changes(seed=seed),
            solve=self.solve.with_changes(seed=seed),
            oracle=self.oracle.with_changes(seed=seed),
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class MetricsSummary:
    n_points: int
    n_failed: int
    eq_max: float
    eq_mean: float
    ineq_max: float
    ineq_mean: float
    gap_max: float
    gap_mean: float
    gap_undefined: int
    t_median: float
    t_p99: float
    t_max: float
    t_min: float
    success_rate: float
    iter_median: float
    iter_p90: float
    iter_max: float
    resets_total: int
    wall_median_converged: float = float("nan")
    wall_max_converged: float = float("nan")
    wall_median_all: float = float("nan")
    wall_max_all: float = float("nan")

    def to_dict(self, include_timing: bool = False) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if include_timing or f.name not in TIMING_FIELDS}

    def timing(self) -> dict:
        return {name: getattr(self, name) for name in TIMING_FIELDS}


def _stat(fn, values) -> float:
    values = np.asarray(values, dtype=float)
    return float(fn(values)) if values.size else float("nan")


def compute_metrics(inst: ProblemInstance, reports: Sequence[SolveReport],
                    oracle_cache: Dict[int, OracleSolution], x_test: np.ndarray,
                    success_tol: float = 1e-8) -> MetricsSummary:
    """Constraint violations, optimality gaps and residual statistics against the oracle solutions."""
    missing = [i for i in range(len(reports)) if i not in oracle_cache]
    if missing:
        raise ValidationError(f"No oracle solution for test points {missing}")

    eq, ineq, gaps, t_values, iterations, resets = [], [], [], [], [], 0
    walls_all, walls_converged = [], []
    gap_undefined = failed = succeeded = 0
    for i, report in enumerate(reports):
        resets += report.resets
        walls_all.append(report.wall_time)
        y = report.z_final.y
        if not (np.all(np.isfinite(y)) and np.isfinite(report.t_final)):
            failed += 1
            iterations.append(report.iterations)
            continue
        eq.append(float(np.max(np.abs(inst.a_mat @ y - x_test[i]), initial=0.0)))
        ineq.append(max(0.0, float(np.max(inst.g_mat @ y - inst.h_vec, initial=0.0))))
        try:
            gaps.append(optimality_gap(float(objective(inst, y)), oracle_cache[i].objective))
        except GapUndefinedError:
            gap_undefined += 1
        t_values.append(report.t_final)
        iterations.append(report.iterations)
        if report.t_final <= success_tol:
            succeeded += 1
            walls_converged.append(report.wall_time)

    return MetricsSummary(
        n_points=len(reports),
        n_failed=failed,
        eq_max=_stat(np.max, eq),
        eq_mean=_stat(np.mean, eq),
        ineq_max=_stat(np.max, ineq),
        ineq_mean=_stat(np.mean, ineq),
        gap_max=_stat(np.max, gaps),
        gap_mean=_stat(np.mean, gaps),
        gap_undefined=gap_undefined,
        t_median=_stat(np.median, t_values),
        t_p99=_stat(lambda v: np.percentile(v, 99), t_values),
        t_max=_stat(np.max, t_values),
        t_min=_stat(np.min, t_values),
        success_rate=succeeded / len(reports) if reports else float("nan"),
        iter_median=_stat(np.median, iterations),
        iter_p90=_stat(lambda v: np.percentile(v, 90), iterations),
        iter_max=_stat(np.max, iterations),
        resets_total=resets,
        wall_median_converged=_stat(np.median, walls_converged),
        wall_max_converged=_stat(np.max, walls_converged),
        wall_median_all=_stat(np.median, walls_all),
        wall_max_all=_stat(np.max, walls_all),
    )


def convergence_fractions(traces: Sequence[Optional[SolveTrace]], tolerances: Sequence[float],
                          checkpoints: Sequence[int]) -> pd.DataFrame:
    """Fraction of runs whose best residual reached ``tol`` by iteration ``k``.

    A run that stopped before ``k`` keeps its final best value. Empty traces
    (failed runs) never count as converged.
    """
    if not traces or any(trace is None for trace in traces):
        raise ValidationError("Convergence fractions need a trace for every run; solve with record_trace enabled")
    rows = []
    for tol in tolerances:
        for k in checkpoints:
            hits = [bool(trace.t_best) and trace.t_best[min(k, len(trace.t_best) - 1)] <= tol for trace in traces]
            rows.append((tol, k, float(np.mean(hits))))
    return pd.DataFrame(rows, columns=FRACTION_COLUMNS)


def _package_version() -> str:
    try:
        return version("lisco")
    except PackageNotFoundError:
        return "unknown"


def _write_json(data: dict, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)


class LiscoBenchmark:
    def __init__(self, cfg: ExperimentConfig, output_dir: Optional[str] = None, progress: bool = True):
        self.cfg = cfg
        self.output_dir = Path(output_dir or cfg.out_dir)
        self.progress = progress
        self.config_hash = cfg.config_hash()
        self.kind = ProblemKind.parse(cfg.problem_kind)

    def run_benchmark(self) -> pd.DataFrame:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        (self.output_dir / STALE_MARKER).unlink(missing_ok=True)
        logging.info(f"Running {len(self.cfg.instance_seeds)} instance(s) of {self.kind.value}, "
                     f"{self.cfg.n_test} test points each, methods: {', '.join(self.cfg.methods)}")
        self._write_provenance()

        per_instance = {}
        for seed in self.cfg.instance_seeds:
            per_instance[seed] = self._run_instance(seed)

        with self._stage("summary"):
            _write_json({
                "config_hash": self.config_hash,
                "seeds": self._seeds(),
                "instances": {str(seed): {m: s.to_dict() for m, s in summaries.items()}
                              for seed, summaries in per_instance.items()},
            }, self.output_dir / "metrics.json")
            _write_json({str(seed): {m: s.timing() for m, s in summaries.items()}
                         for seed, summaries in per_instance.items()}, self.output_dir / "timing.json")
            seeds = list(self.cfg.instance_seeds)
            average_fractions(self.output_dir, seeds).to_csv(self.output_dir / "fractions.csv", index=False)
            summary = write_summary(self.output_dir, seeds)
        logging.info(f"Benchmark finished, results in {self.output_dir.resolve()}")
        return summary

    @contextmanager
    def _stage(self, name: str):
        logging.info(f"Stage '{name}' started")
        try:
            yield
        except ExperimentError:
            raise
        except Exception as e:
            logging.error(f"Stage '{name}' failed: {e}")
            with open(self.output_dir / STALE_MARKER, "w") as f:
                f.write(f"stage: {name}\nerror: {e}\nconfig_hash: {self.config_hash}\n")
            raise ExperimentError(name, e) from e

    def _seeds(self) -> dict:
        return {
            "instance_seeds": list(self.cfg.instance_seeds),
            "test_seed": self.cfg.test_seed,
            "predictor_seed": self.cfg.predictor.seed,
            "solver_seed": self.cfg.solver.seed,
            "solve_seed": self.cfg.solve.seed,
            "oracle_seed": self.cfg.oracle.seed,
        }

    def _write_provenance(self) -> None:
        _write_json({
            "config_hash": self.config_hash,
            "config": self.cfg.to_dict(),
            "seeds": self._seeds(),
            "package_version": _package_version(),
        }, self.output_dir / "provenance.json")

    def _load_instance(self, seed: int, instance_dir: Path) -> ProblemInstance:
        if self.cfg.instance_file:
            inst = load_instance(self.cfg.instance_file)
        else:
            inst = gen_instance(self.kind, self.cfg.n_y, self.cfg.n_h, self.cfg.n_g, seed)
        save_instance(inst, instance_dir / "instance.json")
        return inst

    def _run_instance(self, seed: int) -> Dict[str, MetricsSummary]:
        instance_dir = self.output_dir / f"instance_{seed}"
        instance_dir.mkdir(parents=True, exist_ok=True)
        methods = self.cfg.methods

        with self._stage(f"instance {seed}: generate"):
            inst = self._load_instance(seed, instance_dir)
        with self._stage(f"instance {seed}: oracle"):
            x_test, oracle_cache = prepare_test_set(inst, self.cfg.n_test, self.cfg.test_seed, instance_dir,
                                                    self.cfg.oracle, self.progress)

        predictor = None
        if "predictor" in methods or "lisco_with_predictor" in methods:
            with self._stage(f"instance {seed}: train predictor"):
                predictor = self._train_predictor(inst, instance_dir)

        solvers = {}
        with self._stage(f"instance {seed}: train solver"):
            if "lisco_with_predictor" in methods:
                solvers["lisco_with_predictor"] = self._train_solver(inst, instance_dir, predictor)
            if "lisco_without_predictor" in methods:
                solvers["lisco_without_predictor"] = self._train_solver(inst, instance_dir, None)

        reports = {}
        with self._stage(f"instance {seed}: solve"):
            for method in methods:
                reports[method] = self._solve_method(method, inst, x_test, predictor, solvers.get(method))
                write_reports(reports[method], instance_dir / f"reports_{method}.jsonl",
                              extra={"config_hash": self.config_hash, "instance_seed": seed})

        with self._stage(f"instance {seed}: metrics"):
            summaries = {m: compute_metrics(inst, reports[m], oracle_cache, x_test, self.cfg.success_tol)
                         for m in methods}
            _write_json({
                "config_hash": self.config_hash,
                "instance_seed": seed,
                "instance_hash": instance_hash(inst),
                "methods": {m: s.to_dict() for m, s in summaries.items()},
            }, instance_dir / "metrics.json")
            _write_json({m: s.timing() for m, s in summaries.items()}, instance_dir / "timing.json")
            self._fractions(reports).to_csv(instance_dir / "fractions.csv", index=False)
            self._log_summary(seed, summaries)
        return summaries

    def _train_predictor(self, inst: ProblemInstance, instance_dir: Path) -> MlpParams:
        cfg = self.cfg.predictor
        params, history = train_predictor(inst, cfg, progress=self.progress)
        save_weights(params, instance_dir / "predictor.json", "predictor",
                     network_metadata(inst, "predictor", cfg, dtype=cfg.dtype, config_hash=self.config_hash))
        write_history(history, instance_dir / "history_predictor.csv")
        return params

    def _train_solver(self, inst: ProblemInstance, instance_dir: Path, predictor: Optional[MlpParams]) -> MlpParams:
        cfg = self.cfg.solver.with_changes(use_predictor=predictor is not None)
        name = "solver_with_predictor" if predictor is not None else "solver_without_predictor"
        params, history = train_solver(inst, cfg, predictor=predictor, progress=self.progress)
        save_weights(params, instance_dir / f"{name}.json", "solver",
                     network_metadata(inst, "solver", cfg, dtype=cfg.dtype, config_hash=self.config_hash))
        write_history(history, instance_dir / f"history_{name}.csv")
        return params

    def _solve_method(self, method: str, inst: ProblemInstance, x_test: np.ndarray,
                      predictor: Optional[MlpParams], solver: Optional[MlpParams]) -> List[SolveReport]:
        logging.info(f"Solving {len(x_test)} test points with method '{method}'")
        if method == "predictor":
            return [predictor_only_report(inst, x, predictor, self.cfg.solve) for x in x_test]
        use_predictor = method == "lisco_with_predictor"
        opts = self.cfg.solve.with_changes(use_predictor=use_predictor, record_trace=True)
        return lisco_solve_batch(inst, x_test, predictor if use_predictor else None, solver, opts,
                                 progress=self.progress)

    def _fractions(self, reports: Dict[str, List[SolveReport]]) -> pd.DataFrame:
        frames = []
        for method, method_reports in reports.items():
            if method == "predictor":
                continue
            traces = [r.trace if r.trace is not None else SolveTrace() for r in method_reports]
            frame = convergence_fractions(traces, self.cfg.tolerances, self.cfg.checkpoints)
            frame.insert(0, "method", method)
            frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=["method"] + FRACTION_COLUMNS)
        return pd.concat(frames, ignore_index=True)

    def _log_summary(self, seed: int, summaries: Dict[str, MetricsSummary]) -> None:
        for method, s in summaries.items():
            logging.info(f"instance {seed} / {method}: success {s.success_rate:.3f}, median T {s.t_median:.3e}, "
                         f"max eq {s.eq_max:.3e}, max ineq {s.ineq_max:.3e}, mean gap {s.gap_mean:.4f}%")


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[str] = None, progress: bool = True) -> pd.DataFrame:
    return LiscoBenchmark(cfg, output_dir, progress).run_benchmark()
