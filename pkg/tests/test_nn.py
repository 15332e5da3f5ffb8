import json

import numpy as np
import pytest

from lisco.errors import DimensionError, NumericalError, WeightFileError
from lisco.nn import (AdamWState, MlpParams, PlateauScheduler, adamw_step, leaky_relu, load_weights, mlp_backward,
                      mlp_forward, mlp_init, parameter_count, plateau_step, save_weights)


def scalar_params(value):
    return MlpParams(w1=np.full((1, 1), value), b1=np.full(1, value), w2=np.full((1, 1), value),
                     b2=np.full(1, value))


def test_parameter_counts_at_paper_scale():
    assert parameter_count(50, 2048, 200) == 514248
    assert parameter_count(200 + 1 + 50, 2048, 200) == 925896
    assert mlp_init(3, 4, 2).n_params == parameter_count(3, 4, 2)


def test_mlp_init_is_seeded():
    a = mlp_init(5, 7, 3, seed=4)
    b = mlp_init(5, 7, 3, seed=4)
    for ta, tb in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(ta, tb)
    assert np.all(a.b1 == 0) and np.all(a.b2 == 0)
    assert np.max(np.abs(a.w1)) <= np.sqrt(1 / 5)
    assert np.max(np.abs(a.w2)) <= np.sqrt(1 / 7)


def test_leaky_relu():
    np.testing.assert_allclose(leaky_relu(np.array([-2.0, 0.0, 3.0]), 0.01), [-0.02, 0.0, 3.0])


def test_forward_shapes_and_errors():
    params = mlp_init(4, 6, 3, seed=1)
    out, cache = mlp_forward(params, np.ones((5, 4)))
    assert out.shape == (5, 3)
    assert cache.act.shape == (5, 6)
    with pytest.raises(DimensionError):
        mlp_forward(params, np.ones((5, 3)))
    with pytest.raises(NumericalError):
        mlp_forward(params, np.full((2, 4), np.nan))
    with pytest.raises(DimensionError):
        MlpParams(w1=np.ones((3, 2)), b1=np.ones(2), w2=np.ones((1, 3)), b2=np.ones(1))


def test_backward_matches_finite_differences(rng):
    params = mlp_init(3, 5, 2, seed=2)
    params.b1[:] = rng.normal(scale=0.1, size=5)
    inputs = rng.standard_normal((4, 3))
    weights = rng.standard_normal((4, 2))

    def loss(p):
        return float(np.sum(mlp_forward(p, inputs)[0] * weights))

    _, cache = mlp_forward(params, inputs)
    grads = mlp_backward(params, cache, weights)
    h = 1e-6
    for tensor, grad in zip(params.tensors(), grads.tensors()):
        for idx in np.ndindex(tensor.shape):
            saved = tensor[idx]
            tensor[idx] = saved + h
            up = loss(params)
            tensor[idx] = saved - h
            down = loss(params)
            tensor[idx] = saved
            assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-7)


def test_adamw_first_step():
    params = scalar_params(1.0)
    state = AdamWState.for_params(params, lr=1e-3, weight_decay=1e-3)
    adamw_step(state, params, scalar_params(1.0))
    expected = (1.0 - 1e-3 * 1e-3) - 1e-3 * 1.0 / (1.0 + 1e-8)
    for tensor in params.tensors():
        assert tensor.item() == pytest.approx(expected, abs=1e-12)
    assert state.step_count == 1


def test_adamw_matches_scalar_reference():
    grads = [0.5, -1.0, 2.0, 0.25, -0.75]
    lr, wd, b1, b2, eps = 1e-2, 1e-2, 0.9, 0.999, 1e-8
    theta, m, v = 0.3, 0.0, 0.0
    reference = []
    for t, g in enumerate(grads, start=1):
        theta = theta - lr * wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        reference.append(theta)

    params = scalar_params(0.3)
    state = AdamWState.for_params(params, lr=lr, weight_decay=wd)
    for g, expected in zip(grads, reference):
        adamw_step(state, params, scalar_params(g))
        assert params.w1.item() == pytest.approx(expected, abs=1e-12)


def test_adamw_rejects_nonfinite_gradients():
    params = scalar_params(1.0)
    state = AdamWState.for_params(params)
    with pytest.raises(NumericalError):
        adamw_step(state, params, scalar_params(np.inf))
    assert params.w1.item() == 1.0
    assert state.step_count == 0


def test_plateau_reduces_and_stops():
    scheduler = PlateauScheduler(patience=2, factor=0.1, cooldown=0, min_lr=1e-3)
    lr, history = 1e-1, []
    for _ in range(7):
        lr, stop = plateau_step(scheduler, 1.0, lr)
        history.append((lr, stop))
    assert history[2][0] == pytest.approx(1e-2)
    assert history[4][0] == pytest.approx(1e-3)
    assert history[6] == (pytest.approx(1e-3), True)
    assert not any(stop for _, stop in history[:6])


def test_plateau_cooldown_delays_next_reduction():
    scheduler = PlateauScheduler(patience=1, factor=0.5, cooldown=2, min_lr=1e-8)
    lrs = []
    lr = 1.0
    for _ in range(5):
        lr, _ = plateau_step(scheduler, 1.0, lr)
        lrs.append(lr)
    assert lrs == [1.0, 0.5, 0.5, 0.5, 0.25]


def test_plateau_improvement_resets_counter():
    scheduler = PlateauScheduler(patience=2, factor=0.1, cooldown=0)
    lr = 1.0
    for loss in [5.0, 5.0, 4.0, 4.0, 3.0]:
        lr, stop = plateau_step(scheduler, loss, lr)
    assert lr == 1.0 and not stop


def test_weights_round_trip(tmp_path):
    params = mlp_init(3, 4, 2, seed=8)
    path = save_weights(params, tmp_path / "solver.json", "solver", {"instance_seed": 5})
    loaded, meta = load_weights(path, expected_role="solver")
    for a, b in zip(params.tensors(), loaded.tensors()):
        np.testing.assert_array_equal(a, b)
    assert meta["role"] == "solver"
    assert meta["instance_seed"] == 5


def test_load_weights_errors(tmp_path):
    path = save_weights(mlp_init(3, 4, 2), tmp_path / "predictor.json", "predictor")
    with pytest.raises(WeightFileError):
        load_weights(path, expected_role="solver")

    data = json.loads(path.read_text())
    data["format_version"] = 2
    bad_version = tmp_path / "bad_version.json"
    bad_version.write_text(json.dumps(data))
    with pytest.raises(WeightFileError):
        load_weights(bad_version)

    data["format_version"] = 1
    data["hidden_dim"] = 5
    bad_dims = tmp_path / "bad_dims.json"
    bad_dims.write_text(json.dumps(data))
    with pytest.raises(WeightFileError):
        load_weights(bad_dims)

    corrupted = tmp_path / "corrupted.json"
    corrupted.write_text('{"format_version": 1, "role": ')
    with pytest.raises(WeightFileError):
        load_weights(corrupted)
