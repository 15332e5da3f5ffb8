"""Inference loop: predictor warm start followed by learned steps with a divergence safeguard.

On each iteration the solver network proposes ``delta``; the iterate moves by
``alpha * delta``. The best iterate by residual norm is tracked, and when the
residual grows beyond ``omega`` times the best one the iterate is reset to the
best and ``alpha`` shrinks by ``beta``.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Union

import numpy as np
from tqdm import tqdm

from lisco.config import ConfigMixin, check_seed, require
from lisco.errors import DimensionError, LiscoError, ValidationError
from lisco.kkt import DEFAULT_EPS, PrimalDual, residual_batch, squared_norm
from lisco.nn import MlpParams
from lisco.problems import ProblemInstance
from lisco.training import predict_start, solver_predict_step

StepFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SolveOptions(ConfigMixin):
    n_max: int = 500
    tau: float = 1e-8
    alpha0: float = 1.0
    omega: float = 10.0
    beta: float = 0.95
    use_predictor: bool = True
    record_trace: bool = False
    squared_norm: bool = True
    eps: float = DEFAULT_EPS
    seed: int = 0

    def validate(self):
        require(self.n_max >= 0, "n_max must be non-negative")
        require(self.tau > 0, "tau must be positive")
        require(self.alpha0 > 0, "alpha0 must be positive")
        require(self.omega > 1, "omega must exceed 1")
        require(0 < self.beta < 1, "beta must lie in (0, 1)")
        check_seed("seed", self.seed)

    def metric(self, sq_norm: float) -> float:
        """Termination metric: ``||F||^2`` by default, ``||F||`` when ``squared_norm`` is off."""
        return sq_norm if self.squared_norm else float(np.sqrt(sq_norm))


class SolveStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    NONFINITE_START = "nonfinite_start"
    FAILED = "failed"


@dataclass
class SolveTrace:
    """Per-iteration record; index 0 is the starting point."""

    t_metric: List[float] = field(default_factory=list)
    t_best: List[float] = field(default_factory=list)
    alpha: List[float] = field(default_factory=list)
    reset: List[bool] = field(default_factory=list)

    def record(self, t: float, t_best: float, alpha: float, reset: bool) -> None:
        self.t_metric.append(t)
        self.t_best.append(t_best)
        self.alpha.append(alpha)
        self.reset.append(reset)


@dataclass
class SolveReport:
    z_final: PrimalDual
    t_final: float
    converged: bool
    iterations: int
    alpha_final: float
    status: SolveStatus
    resets: int = 0
    trace: Optional[SolveTrace] = None
    wall_time: float = 0.0

    def to_dict(self, include_trace: bool = True) -> dict:
        data = {
            "z_final": self.z_final.z.tolist(),
            "n_y": self.z_final.n_y,
            "n_h": self.z_final.n_h,
            "n_g": self.z_final.n_g,
            "t_final": self.t_final,
            "converged": self.converged,
            "iterations": self.iterations,
            "alpha_final": self.alpha_final,
            "status": self.status.value,
            "resets": self.resets,
            "wall_time": self.wall_time,
        }
        if include_trace and self.trace is not None:
            data["trace"] = {
                "t_metric": self.trace.t_metric,
                "t_best": self.trace.t_best,
                "alpha": self.trace.alpha,
                "reset": self.trace.reset,
            }
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SolveReport":
        trace = data.get("trace")
        return cls(
            z_final=PrimalDual(np.array(data["z_final"], dtype=float), data["n_y"], data["n_h"], data["n_g"]),
            t_final=float(data["t_final"]),
            converged=bool(data["converged"]),
            iterations=int(data["iterations"]),
            alpha_final=float(data["alpha_final"]),
            status=SolveStatus(data["status"]),
            resets=int(data.get("resets", 0)),
            trace=SolveTrace(**trace) if trace is not None else None,
            wall_time=float(data.get("wall_time", 0.0)),
        )


def _step_function(inst: ProblemInstance, solver: Union[MlpParams, StepFunction]) -> StepFunction:
    if isinstance(solver, MlpParams):
        expected_in = inst.n_z + 1 + inst.n_h
        if solver.in_dim != expected_in or solver.out_dim != inst.n_z:
            raise DimensionError(f"Solver network is {solver.in_dim} -> {solver.out_dim}, "
                                 f"expected {expected_in} -> {inst.n_z} for this instance")
        return lambda f_vec, x: solver_predict_step(solver, f_vec, x)
    if callable(solver):
        return solver
    raise ValidationError(f"Unsupported solver object of type {type(solver).__name__}")


def _start_point(inst: ProblemInstance, x: np.ndarray, predictor: Optional[MlpParams],
                 opts: SolveOptions, z0) -> np.ndarray:
    if opts.use_predictor and predictor is not None:
        if predictor.in_dim != inst.n_h or predictor.out_dim != inst.n_z:
            raise DimensionError(f"Predictor network is {predictor.in_dim} -> {predictor.out_dim}, "
                                 f"expected {inst.n_h} -> {inst.n_z}")
        return predict_start(predictor, x)[0]
    if z0 is not None:
        z0 = np.array(z0.z if isinstance(z0, PrimalDual) else z0, dtype=float)
        if z0.shape != (inst.n_z,):
            raise DimensionError(f"Starting point has shape {z0.shape}, expected ({inst.n_z},)")
        return z0
    return np.random.default_rng(opts.seed).standard_normal(inst.n_z)


def _iterate(inst: ProblemInstance, x: np.ndarray, z: np.ndarray, step: StepFunction,
             opts: SolveOptions) -> SolveReport:
    def finish(z_out, sq, converged, iterations, alpha, status, resets, trace):
        return SolveReport(
            z_final=PrimalDual.for_instance(inst, z_out), t_final=0.5 * float(sq), converged=converged,
            iterations=iterations, alpha_final=alpha, status=status, resets=resets, trace=trace,
        )

    alpha = opts.alpha0
    trace = SolveTrace() if opts.record_trace else None
    f = residual_batch(inst, z, x, opts.eps)
    sq = float(squared_norm(f))
    if trace is not None:
        trace.record(0.5 * sq, 0.5 * sq, alpha, False)
    if not np.isfinite(sq):
        return finish(z, sq, False, 0, alpha, SolveStatus.NONFINITE_START, 0, trace)
    if opts.metric(sq) < opts.tau:
        return finish(z, sq, True, 0, alpha, SolveStatus.CONVERGED, 0, trace)

    z_best, f_best, sq_best = z, f, sq
    resets = 0
    k = 0
    while k < opts.n_max:
        z = z + alpha * step(f, x)
        with np.errstate(over="ignore", invalid="ignore"):
            f = residual_batch(inst, z, x, opts.eps)
            sq = float(squared_norm(f))
        k += 1
        finite = np.isfinite(sq)

        if finite and opts.metric(sq) < opts.tau:
            if trace is not None:
                trace.record(0.5 * sq, 0.5 * sq, alpha, False)
            return finish(z, sq, True, k, alpha, SolveStatus.CONVERGED, resets, trace)

        if finite and sq < sq_best:
            z_best, f_best, sq_best = z, f, sq
        t_seen = 0.5 * sq
        reset = not finite or sq > opts.omega ** 2 * sq_best
        if reset:
            z, f, sq = z_best, f_best, sq_best
            alpha *= opts.beta
            resets += 1
        if trace is not None:
            trace.record(t_seen, 0.5 * sq_best, alpha, reset)

    return finish(z_best, sq_best, False, k, alpha, SolveStatus.MAX_ITERS, resets, trace)


def lisco_solve(inst: ProblemInstance, x, predictor: Optional[MlpParams],
                solver: Union[MlpParams, StepFunction], opts: Optional[SolveOptions] = None,
                z0=None) -> SolveReport:
    """Solve one parameter vector.

    ``solver`` is a trained solver network or any callable ``(F, x) -> delta``.
    Without a predictor the loop starts from ``z0`` or, failing that, a
    standard-normal draw seeded by ``opts.seed``.
    """
    opts = opts or SolveOptions()
    started = time.perf_counter()
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.n_h,):
        raise DimensionError(f"Expected x of shape ({inst.n_h},), got {x.shape}")
    step = _step_function(inst, solver)
    z = _start_point(inst, x, predictor, opts, z0)
    report = _iterate(inst, x, z, step, opts)
    report.wall_time = time.perf_counter() - started
    return report


def _failed_report(inst: ProblemInstance, opts: SolveOptions) -> SolveReport:
    return SolveReport(
        z_final=PrimalDual.for_instance(inst, np.full(inst.n_z, np.nan)), t_final=float("nan"),
        converged=False, iterations=0, alpha_final=opts.alpha0, status=SolveStatus.FAILED,
    )


def lisco_solve_batch(inst: ProblemInstance, x_batch, predictor: Optional[MlpParams],
                      solver: Union[MlpParams, StepFunction], opts: Optional[SolveOptions] = None,
                      z0_batch=None, progress: bool = False) -> List[SolveReport]:
    """Point-by-point ``lisco_solve`` over a batch; one point failing never aborts the others."""
    opts = opts or SolveOptions()
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=float))
    n = x_batch.shape[0]
    if z0_batch is None and not (opts.use_predictor and predictor is not None):
        z0_batch = np.random.default_rng(opts.seed).standard_normal((n, inst.n_z))

    reports = []
    for i in tqdm(range(n), desc="LISCO", disable=not progress):
        try:
            reports.append(lisco_solve(inst, x_batch[i], predictor, solver, opts,
                                       z0=None if z0_batch is None else z0_batch[i]))
        except LiscoError as e:
            logging.error(f"Point {i} failed: {e}")
            reports.append(_failed_report(inst, opts))
    return reports


def predictor_only_report(inst: ProblemInstance, x, predictor: MlpParams,
                          opts: Optional[SolveOptions] = None) -> SolveReport:
    """Evaluate the predictor alone as a zero-iteration solve."""
    opts = opts or SolveOptions()
    started = time.perf_counter()
    z = predict_start(predictor, np.asarray(x, dtype=float))[0]
    sq = float(squared_norm(residual_batch(inst, z, x, opts.eps)))
    converged = bool(np.isfinite(sq) and opts.metric(sq) < opts.tau)
    trace = SolveTrace() if opts.record_trace else None
    if trace is not None:
        trace.record(0.5 * sq, 0.5 * sq, opts.alpha0, False)
    return SolveReport(
        z_final=PrimalDual.for_instance(inst, z), t_final=0.5 * sq, converged=converged, iterations=0,
        alpha_final=opts.alpha0, status=SolveStatus.CONVERGED if converged else SolveStatus.MAX_ITERS,
        trace=trace, wall_time=time.perf_counter() - started,
    )


def write_reports(reports: Iterable[SolveReport], path, include_trace: bool = True,
                  extra: Optional[dict] = None) -> Path:
    """JSON lines, one report per line."""
    path = Path(path)
    with open(path, "w") as f:
        for index, report in enumerate(reports):
            record = {"index": index, **(extra or {}), **report.to_dict(include_trace)}
            f.write(json.dumps(record) + "\n")
    return path


def read_reports(path) -> List[SolveReport]:
    reports = []
    with open(path, "r") as f:
        for line in f:
            if line.strip():
                reports.append(SolveReport.from_dict(json.loads(line)))
    return reports
