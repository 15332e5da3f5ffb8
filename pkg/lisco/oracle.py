"""Classical reference solvers: damped Newton on the FB system and brute-force active-set enumeration."""
import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, LinAlgWarning, lu_factor, lu_solve

from lisco.config import ConfigMixin, check_seed, require
from lisco.errors import GapUndefinedError, OracleError, SingularPointError, ValidationError
from lisco.kkt import DEFAULT_EPS, PrimalDual, kkt_jacobian, residual_batch, squared_norm
from lisco.problems import ProblemInstance, ProblemKind, objective

FEASIBILITY_TOL = 1e-10


@dataclass
class NewtonOptions(ConfigMixin):
    max_iters: int = 200
    tol: float = 1e-12
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    min_step: float = 1e-12
    levenberg_mu0: float = 1e-8
    eps: float = DEFAULT_EPS
    n_starts: int = 5
    seed: int = 0

    def validate(self):
        for name in ("max_iters", "tol", "armijo_c", "min_step", "levenberg_mu0"):
            require(getattr(self, name) > 0, f"{name} must be positive")
        require(0 < self.backtrack_factor < 1, "backtrack_factor must lie in (0, 1)")
        require(self.n_starts >= 0 and self.eps >= 0, "n_starts and eps must be non-negative")
        check_seed("seed", self.seed)


class OracleStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    SINGULAR = "singular"


@dataclass
class OracleSolution:
    z_star: PrimalDual
    t_star: float
    status: OracleStatus
    iterations: int = 0
    objective: float = float("nan")

    @property
    def converged(self) -> bool:
        return self.status == OracleStatus.CONVERGED


def _damped_direction(jac: np.ndarray, f: np.ndarray, mu: float) -> Optional[np.ndarray]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        try:
            lu, piv = lu_factor(jac + mu * np.eye(jac.shape[0]))
        except (LinAlgError, ValueError):
            return None
    pivots = np.abs(np.diag(lu))
    if not np.all(np.isfinite(pivots)) or pivots.min() <= np.finfo(float).eps * pivots.max():
        return None
    direction = -lu_solve((lu, piv), f)
    return direction if np.all(np.isfinite(direction)) else None


def _solution(inst: ProblemInstance, z: np.ndarray, t: float, status: OracleStatus, iterations: int) -> OracleSolution:
    return OracleSolution(
        z_star=PrimalDual.for_instance(inst, z), t_star=t, status=status, iterations=iterations,
        objective=objective(inst, z[:inst.n_y]),
    )


def _polish(inst: ProblemInstance, x: np.ndarray, z: np.ndarray, f: np.ndarray, t: float,
            opts: NewtonOptions, steps: int = 2) -> Tuple[np.ndarray, float]:
    """Full Newton steps past the tolerance, each kept only while ``T`` keeps falling."""
    for _ in range(steps):
        if t == 0.0:
            break
        try:
            jac = kkt_jacobian(inst, z, x, eps=opts.eps)
        except SingularPointError:
            break
        direction = _damped_direction(jac, f, opts.levenberg_mu0)
        if direction is None:
            break
        z_try = z + direction
        with np.errstate(over="ignore", invalid="ignore"):
            f_try = residual_batch(inst, z_try, x, opts.eps)
        t_try = 0.5 * float(squared_norm(f_try))
        if not t_try < t:
            break
        z, f, t = z_try, f_try, t_try
    return z, t


def newton_fb_solve(inst: ProblemInstance, x, z0, opts: Optional[NewtonOptions] = None) -> OracleSolution:
    """Levenberg-damped Newton iteration on ``F(z; x) = 0`` with Armijo backtracking on ``T``.

    Once ``T <= tol`` the iterate is polished with up to two undamped steps.
    """
    opts = opts or NewtonOptions()
    x = np.asarray(x, dtype=float)
    z = np.array(z0.z if isinstance(z0, PrimalDual) else z0, dtype=float)
    f = residual_batch(inst, z, x, opts.eps)
    t = 0.5 * float(squared_norm(f))

    for iteration in range(opts.max_iters):
        if t <= opts.tol:
            z, t = _polish(inst, x, z, f, t, opts)
            return _solution(inst, z, t, OracleStatus.CONVERGED, iteration)
        try:
            jac = kkt_jacobian(inst, z, x, eps=opts.eps)
        except SingularPointError:
            logging.debug(f"Newton hit an unsmoothed FB kink at iteration {iteration}")
            return _solution(inst, z, t, OracleStatus.SINGULAR, iteration)
        grad = jac.T @ f
        mu_limit = 1e6 * max(float(np.linalg.norm(jac)), 1.0)
        mu = opts.levenberg_mu0
        accepted = False
        while mu <= mu_limit and not accepted:
            direction = _damped_direction(jac, f, mu)
            slope = float(grad @ direction) if direction is not None else 0.0
            step = 1.0
            while slope < 0 and step >= opts.min_step:
                z_try = z + step * direction
                with np.errstate(over="ignore", invalid="ignore"):
                    f_try = residual_batch(inst, z_try, x, opts.eps)
                t_try = 0.5 * float(squared_norm(f_try))
                if t_try <= t + opts.armijo_c * step * slope:
                    z, f, t = z_try, f_try, t_try
                    accepted = True
                    break
                step *= opts.backtrack_factor
            mu *= 10.0
        if not accepted:
            logging.debug(f"Newton stalled at iteration {iteration} with T={t:.3e}")
            return _solution(inst, z, t, OracleStatus.SINGULAR, iteration)

    if t <= opts.tol:
        z, t = _polish(inst, x, z, f, t, opts)
        return _solution(inst, z, t, OracleStatus.CONVERGED, opts.max_iters)
    return _solution(inst, z, t, OracleStatus.MAX_ITERS, opts.max_iters)


def solve_oracle(inst: ProblemInstance, x, opts: Optional[NewtonOptions] = None) -> OracleSolution:
    """Reference solution for one parameter vector.

    Starts from ``z = 0`` and then from ``n_starts`` seeded standard-normal points.
    The convex QP stops at the first converged run; non-convex kinds keep the
    converged root of lowest objective.
    """
    opts = opts or NewtonOptions()
    rng = np.random.default_rng(opts.seed)
    starts = [np.zeros(inst.n_z)] + [rng.standard_normal(inst.n_z) for _ in range(opts.n_starts)]

    runs = []
    for z0 in starts:
        run = newton_fb_solve(inst, x, z0, opts)
        runs.append(run)
        if run.converged and inst.kind == ProblemKind.CONVEX_QP:
            return run
    converged = [run for run in runs if run.converged]
    if converged:
        return min(converged, key=lambda run: run.objective)
    return min(runs, key=lambda run: run.t_star if np.isfinite(run.t_star) else np.inf)


def active_set_enumerate(inst: ProblemInstance, x) -> OracleSolution:
    """Exact convex-QP solution by trying every subset of inequalities as active."""
    if inst.kind != ProblemKind.CONVEX_QP:
        raise ValidationError("Active-set enumeration only handles convex QP instances")
    x = np.asarray(x, dtype=float)
    n_y, n_h, n_g = inst.n_y, inst.n_h, inst.n_g
    q_mat = np.diag(inst.q_diag)

    best = None
    max_active = min(n_g, n_y - n_h)
    for size in range(max_active + 1):
        for active in combinations(range(n_g), size):
            g_active = inst.g_mat[list(active)]
            m = n_h + size
            kkt = np.zeros((n_y + m, n_y + m))
            kkt[:n_y, :n_y] = q_mat
            kkt[:n_y, n_y:n_y + n_h] = inst.a_mat.T
            kkt[:n_y, n_y + n_h:] = g_active.T
            kkt[n_y:n_y + n_h, :n_y] = inst.a_mat
            kkt[n_y + n_h:, :n_y] = g_active
            rhs = np.concatenate([-inst.p, x, inst.h_vec[list(active)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.allclose(kkt @ sol, rhs, rtol=0.0, atol=1e-9):
                continue

            y, nu, lam_active = sol[:n_y], sol[n_y:n_y + n_h], sol[n_y + n_h:]
            if lam_active.size and lam_active.min() < -FEASIBILITY_TOL:
                continue
            if n_g and (inst.g_mat @ y - inst.h_vec).max() > FEASIBILITY_TOL:
                continue
            value = objective(inst, y)
            if best is None or value < best[0]:
                lam = np.zeros(n_g)
                lam[list(active)] = lam_active
                best = (value, np.concatenate([y, nu, lam]))

    if best is None:
        raise OracleError("Active-set enumeration found no feasible KKT point")
    z = best[1]
    t = 0.5 * float(squared_norm(residual_batch(inst, z, x, eps=0.0)))
    return _solution(inst, z, t, OracleStatus.CONVERGED, 0)


def optimality_gap(f_hat: float, f_star: float) -> float:
    """Relative objective excess over the reference solution, in percent."""
    if abs(f_star) < 1e-12:
        raise GapUndefinedError(f"Optimality gap undefined for reference objective {f_star:.3e}")
    return 100.0 * (f_hat - f_star) / abs(f_star)
