import numpy as np
import pytest

from lisco.errors import ConfigError, DimensionError, NumericalError
from lisco.kkt import kkt_jacobian, residual_batch
from lisco.lisco_solver import (SolveOptions, SolveStatus, lisco_solve, lisco_solve_batch, predictor_only_report,
                                read_reports, write_reports)
from lisco.nn import mlp_init
from lisco.oracle import active_set_enumerate


def zero_step(f_vec, x):
    return np.zeros_like(f_vec)


class ScriptedStep:
    """Emits one exploding step, then zeros."""

    def __init__(self):
        self.calls = 0

    def __call__(self, f_vec, x):
        self.calls += 1
        if self.calls == 1:
            return np.full_like(f_vec, 1e3)
        return np.zeros_like(f_vec)


def test_pre_converged_start_stops_immediately(convex_instance, rng):
    x = rng.uniform(-1, 1, convex_instance.n_h)
    z_star = active_set_enumerate(convex_instance, x).z_star.z
    report = lisco_solve(convex_instance, x, None, ScriptedStep(), SolveOptions(use_predictor=False), z0=z_star)
    assert report.converged
    assert report.iterations == 0
    assert report.status == SolveStatus.CONVERGED
    np.testing.assert_array_equal(report.z_final.z, z_star)


def test_diverging_step_triggers_one_reset(convex_instance, rng):
    x = rng.uniform(-1, 1, convex_instance.n_h)
    z0 = rng.standard_normal(convex_instance.n_z)
    opts = SolveOptions(n_max=20, use_predictor=False, record_trace=True)
    report = lisco_solve(convex_instance, x, None, ScriptedStep(), opts, z0=z0)
    assert report.resets == 1
    assert report.alpha_final == pytest.approx(0.95)
    assert report.status == SolveStatus.MAX_ITERS
    assert report.iterations == 20
    np.testing.assert_array_equal(report.z_final.z, z0)
    assert report.trace.reset[1] and sum(report.trace.reset) == 1
    assert len(report.trace.t_metric) == 21


def test_zero_step_keeps_start(convex_instance, rng):
    x = rng.uniform(-1, 1, convex_instance.n_h)
    z0 = rng.standard_normal(convex_instance.n_z)
    report = lisco_solve(convex_instance, x, None, zero_step, SolveOptions(n_max=5, use_predictor=False), z0=z0)
    np.testing.assert_array_equal(report.z_final.z, z0)
    assert report.resets == 0
    assert report.alpha_final == 1.0


def test_newton_like_step_converges(convex_instance, rng):
    inst = convex_instance
    x = rng.uniform(-1, 1, inst.n_h)
    z_star = active_set_enumerate(inst, x).z_star.z
    state = {"z": z_star + 1e-2 * rng.standard_normal(inst.n_z)}

    def step(f_vec, x_vec):
        delta = -np.linalg.solve(kkt_jacobian(inst, state["z"], x_vec), f_vec)
        state["z"] = state["z"] + delta
        return delta

    opts = SolveOptions(n_max=100, use_predictor=False, record_trace=True)
    report = lisco_solve(inst, x, None, step, opts, z0=state["z"].copy())
    assert report.converged
    assert report.t_final < 0.5e-8
    assert 0 < report.iterations < 100
    t_best = report.trace.t_best
    assert all(b <= a for a, b in zip(t_best, t_best[1:]))


def test_squared_norm_flag_changes_termination(convex_instance, rng):
    x = rng.uniform(-1, 1, convex_instance.n_h)
    z_star = active_set_enumerate(convex_instance, x).z_star.z
    z0 = z_star + 1e-5
    sq = float(np.sum(residual_batch(convex_instance, z0, x) ** 2))
    tau = 10 * sq
    assert np.sqrt(sq) > tau
    squared = lisco_solve(convex_instance, x, None, zero_step,
                          SolveOptions(n_max=3, tau=tau, use_predictor=False), z0=z0)
    plain = lisco_solve(convex_instance, x, None, zero_step,
                        SolveOptions(n_max=3, tau=tau, use_predictor=False, squared_norm=False), z0=z0)
    assert squared.converged and squared.iterations == 0
    assert not plain.converged


def test_nonfinite_start(convex_instance):
    z0 = np.full(convex_instance.n_z, np.nan)
    report = lisco_solve(convex_instance, np.zeros(convex_instance.n_h), None, zero_step,
                         SolveOptions(use_predictor=False), z0=z0)
    assert report.status == SolveStatus.NONFINITE_START
    assert not report.converged


def test_dimension_checks(convex_instance):
    inst = convex_instance
    wrong_solver = mlp_init(inst.n_z, 4, inst.n_z)
    with pytest.raises(DimensionError):
        lisco_solve(inst, np.zeros(inst.n_h), None, wrong_solver)
    with pytest.raises(DimensionError):
        lisco_solve(inst, np.zeros(inst.n_h + 1), None, zero_step)
    wrong_predictor = mlp_init(inst.n_h, 4, inst.n_z + 1)
    with pytest.raises(DimensionError):
        lisco_solve(inst, np.zeros(inst.n_h), wrong_predictor, zero_step)


def test_network_solver_and_predictor_run(convex_instance, rng):
    inst = convex_instance
    solver = mlp_init(inst.n_z + 1 + inst.n_h, 8, inst.n_z, seed=1)
    predictor = mlp_init(inst.n_h, 8, inst.n_z, seed=2)
    x = rng.uniform(-1, 1, inst.n_h)
    report = lisco_solve(inst, x, predictor, solver, SolveOptions(n_max=10))
    assert report.iterations <= 10
    assert np.isfinite(report.t_final)
    assert report.wall_time >= 0


def test_batch_matches_pointwise(convex_instance, rng):
    inst = convex_instance
    solver = mlp_init(inst.n_z + 1 + inst.n_h, 8, inst.n_z, seed=1)
    x_batch = rng.uniform(-1, 1, (4, inst.n_h))
    opts = SolveOptions(n_max=15, use_predictor=False, seed=3)
    batch = lisco_solve_batch(inst, x_batch, None, solver, opts)
    z0 = np.random.default_rng(3).standard_normal((4, inst.n_z))
    for i, report in enumerate(batch):
        single = lisco_solve(inst, x_batch[i], None, solver, opts, z0=z0[i])
        np.testing.assert_array_equal(report.z_final.z, single.z_final.z)
        assert report.iterations == single.iterations
        assert report.t_final == single.t_final


def test_batch_isolates_failures(convex_instance, rng):
    inst = convex_instance
    x_batch = rng.uniform(-1, 1, (3, inst.n_h))

    def fragile_step(f_vec, x):
        if np.allclose(x, x_batch[1]):
            raise NumericalError("step network failed")
        return np.zeros_like(f_vec)

    reports = lisco_solve_batch(inst, x_batch, None, fragile_step, SolveOptions(n_max=2, use_predictor=False))
    assert [r.status for r in reports] == [SolveStatus.MAX_ITERS, SolveStatus.FAILED, SolveStatus.MAX_ITERS]


def test_predictor_only_report(convex_instance, rng):
    inst = convex_instance
    predictor = mlp_init(inst.n_h, 8, inst.n_z, seed=2)
    x = rng.uniform(-1, 1, inst.n_h)
    report = predictor_only_report(inst, x, predictor, SolveOptions(record_trace=True))
    assert report.iterations == 0
    assert report.trace.t_metric == [report.t_final]
    expected = 0.5 * np.sum(residual_batch(inst, report.z_final.z, x) ** 2)
    assert report.t_final == pytest.approx(expected)


def test_reports_round_trip(tmp_path, convex_instance, rng):
    x = rng.uniform(-1, 1, convex_instance.n_h)
    opts = SolveOptions(n_max=5, use_predictor=False, record_trace=True)
    reports = [lisco_solve(convex_instance, x, None, ScriptedStep(), opts, z0=np.ones(convex_instance.n_z))]
    path = write_reports(reports, tmp_path / "reports.jsonl", extra={"instance_seed": 3})
    loaded = read_reports(path)
    assert len(loaded) == 1
    assert loaded[0].resets == reports[0].resets
    assert loaded[0].trace.t_best == reports[0].trace.t_best
    np.testing.assert_array_equal(loaded[0].z_final.z, reports[0].z_final.z)


def test_options_validation():
    with pytest.raises(ConfigError):
        SolveOptions(beta=1.0)
    with pytest.raises(ConfigError):
        SolveOptions(omega=1.0)
