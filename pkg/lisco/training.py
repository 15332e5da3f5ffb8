"""Self-supervised training of the predictor and the step-predicting solver network.

Neither network sees optimal solutions: both losses are built from the KKT
metric ``T = 0.5 * ||F||^2`` only, scaled by ``n_z`` so learning rates carry
over between problem sizes.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import trange

from lisco.config import ConfigMixin, check_dtype, check_seed, require
from lisco.errors import DivergenceError, ValidationError, ZeroResidualError
from lisco.kkt import (DEFAULT_EPS, NO_CONVEXIFICATION, RESIDUAL_LAYOUT_VERSION, Convexification, KktResidual,
                       default_convexify, residual_batch, residual_vjp, squared_norm)
from lisco.nn import (DEFAULT_LEAK, AdamWState, MlpParams, PlateauScheduler, adamw_step, mlp_backward, mlp_forward,
                      mlp_init, plateau_step)
from lisco.problems import ProblemInstance

HISTORY_COLUMNS = ["step", "loss", "lr", "resampled_count", "nonfinite_count"]
MAX_NONFINITE_STEPS = 10
LOG_T_FLOOR = 1e-300
INPUT_LOG_BASE = "e"


@dataclass
class PredictorTrainConfig(ConfigMixin):
    batch_size: int = 256
    hidden_dim: int = 256
    lr_start: float = 1e-3
    patience: int = 1000
    cooldown: int = 100
    lr_factor: float = 0.1
    min_lr: float = 1e-8
    max_epochs: int = 30000
    weight_decay: float = 1e-3
    leak: float = DEFAULT_LEAK
    eps: float = DEFAULT_EPS
    convexify: Optional[bool] = None
    rho: float = 1.0
    dtype: str = "float64"
    seed: int = 0

    @classmethod
    def paper(cls) -> "PredictorTrainConfig":
        return cls(batch_size=4096, hidden_dim=2048, max_epochs=150000)

    def validate(self):
        for name in ("batch_size", "hidden_dim", "lr_start", "patience", "lr_factor", "min_lr", "max_epochs", "rho"):
            require(getattr(self, name) > 0, f"{name} must be positive")
        require(self.cooldown >= 0 and self.weight_decay >= 0 and self.eps >= 0,
                "cooldown, weight_decay and eps must be non-negative")
        require(0 < self.lr_factor < 1, "lr_factor must lie in (0, 1)")
        check_dtype(self.dtype)
        check_seed("seed", self.seed)


@dataclass
class SolverTrainConfig(ConfigMixin):
    batch_size: int = 256
    hidden_dim: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-3
    tau: float = 1e-8
    n_max_train: int = 2000
    total_steps: int = 20000
    warmup_delay: int = 100
    safeguard_delta: float = 1000.0
    alpha: float = 1.0
    use_predictor: bool = False
    leak: float = DEFAULT_LEAK
    eps: float = DEFAULT_EPS
    convexify: Optional[bool] = None
    rho: float = 1.0
    log_every: int = 1000
    dtype: str = "float64"
    seed: int = 0

    @classmethod
    def paper(cls) -> "SolverTrainConfig":
        return cls(batch_size=4096, hidden_dim=2048, total_steps=100000)

    def validate(self):
        for name in ("batch_size", "hidden_dim", "lr", "tau", "n_max_train", "total_steps", "rho", "log_every"):
            require(getattr(self, name) > 0, f"{name} must be positive")
        require(self.warmup_delay >= 0 and self.weight_decay >= 0 and self.eps >= 0,
                "warmup_delay, weight_decay and eps must be non-negative")
        require(self.safeguard_delta > 1, "safeguard_delta must exceed 1")
        require(0 < self.alpha <= 1, "alpha must lie in (0, 1]")
        check_dtype(self.dtype)
        check_seed("seed", self.seed)


class LossResult(NamedTuple):
    loss: float
    grad: np.ndarray
    nonfinite: int


def _finite_rows(t: np.ndarray, z: np.ndarray, f: np.ndarray):
    finite = np.isfinite(t)
    z_safe = np.where(finite[:, None], z, 0.0)
    f_safe = np.where(finite[:, None], f, 0.0)
    return finite, int(finite.sum()), z_safe, f_safe


def predictor_loss_and_grad(inst: ProblemInstance, x_batch, z_pred_batch,
                            conv: Convexification = NO_CONVEXIFICATION, eps: float = DEFAULT_EPS) -> LossResult:
    """Mean ``T / n_z`` over the batch and its gradient with respect to the predictions.

    When convexification is enabled without a linearization point, the objective
    is linearized at each prediction and that point is held constant.
    """
    z = np.asarray(z_pred_batch)
    f = residual_batch(inst, z, x_batch, eps, conv)
    t = 0.5 * squared_norm(f)
    finite, n_ok, z_safe, f_safe = _finite_rows(t, z, f)
    if n_ok == 0:
        return LossResult(float("nan"), np.zeros_like(z), len(t))

    scale = 1.0 / (n_ok * inst.n_z)
    loss = float(np.sum(t[finite]) * scale)
    grad = residual_vjp(inst, z_safe, x_batch, f_safe, eps, conv) * scale
    return LossResult(loss, grad, len(t) - n_ok)


def solver_loss_and_grad(inst: ProblemInstance, x_batch, z_batch, delta_batch,
                         conv: Convexification = NO_CONVEXIFICATION, eps: float = DEFAULT_EPS) -> LossResult:
    """Mean ``log10(T(z + delta) / n_z)`` and its gradient with respect to ``delta``.

    An enabled convexification without ``y_lin`` linearizes at the current iterates ``z``.
    """
    z = np.asarray(z_batch)
    if conv.enabled and conv.y_lin is None:
        conv = Convexification(True, conv.rho, y_lin=z[:, :inst.n_y])
    z_next = z + delta_batch
    f = residual_batch(inst, z_next, x_batch, eps, conv)
    t = 0.5 * squared_norm(f)
    finite, n_ok, z_safe, f_safe = _finite_rows(t, z_next, f)
    if n_ok == 0:
        return LossResult(float("nan"), np.zeros_like(z), len(t))

    t_clamped = np.maximum(t, LOG_T_FLOOR * inst.n_z)
    t_clamped = np.where(finite, t_clamped, 1.0)
    loss = float(np.mean(np.log10(t_clamped[finite] / inst.n_z)))
    weight = 1.0 / (t_clamped * np.log(10.0) * n_ok)
    grad = residual_vjp(inst, z_safe, x_batch, f_safe, eps, conv) * weight[:, None]
    return LossResult(loss, grad, len(t) - n_ok)


def solver_input_scale(F) -> np.ndarray:
    """``[F / ||F||, ln ||F||]``; a zero residual is converged and must not be scaled."""
    f_vec = F.f_vec if isinstance(F, KktResidual) else np.asarray(F)
    norm = float(np.sqrt(squared_norm(f_vec)))
    if norm == 0.0:
        raise ZeroResidualError("Cannot scale a zero residual; the point is already converged")
    return np.concatenate([f_vec / norm, [np.log(norm)]])


def solver_inputs(f_batch: np.ndarray, x_batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Network inputs ``[F / ||F||, ln ||F||, x]`` for a batch, plus the residual norms."""
    norms = np.sqrt(squared_norm(f_batch))
    safe = np.maximum(norms, np.finfo(norms.dtype).tiny)
    inputs = np.concatenate([f_batch / safe[:, None], np.log(safe)[:, None], x_batch], axis=1)
    return inputs, norms


def solver_predict_step(solver: MlpParams, F, x) -> np.ndarray:
    f_vec = F.f_vec if isinstance(F, KktResidual) else np.asarray(F)
    norm = float(np.sqrt(squared_norm(f_vec)))
    inputs = np.concatenate([solver_input_scale(f_vec), np.asarray(x)])[None, :]
    out, _ = mlp_forward(solver, inputs)
    return norm * out[0]


def predict_start(predictor: MlpParams, x_batch: np.ndarray) -> np.ndarray:
    z, _ = mlp_forward(predictor, np.atleast_2d(x_batch))
    return z


def resolve_convexification(inst: ProblemInstance, convexify: Optional[bool], rho: float) -> Convexification:
    enabled = default_convexify(inst.kind) if convexify is None else bool(convexify)
    return Convexification(enabled=enabled, rho=rho)


def network_metadata(inst: ProblemInstance, role: str, cfg, **extra) -> dict:
    meta = {
        "role": role,
        "instance_seed": inst.seed,
        "problem_kind": inst.kind.value,
        "residual_layout_version": RESIDUAL_LAYOUT_VERSION,
        "input_log_base": INPUT_LOG_BASE,
        "train_config": cfg.to_dict(),
    }
    meta.update(extra)
    return meta


def train_predictor(inst: ProblemInstance, cfg: PredictorTrainConfig,
                    progress: bool = True) -> Tuple[MlpParams, pd.DataFrame]:
    dtype = np.dtype(cfg.dtype)
    inst = inst.astype(dtype)
    rng = np.random.default_rng(cfg.seed)
    params = mlp_init(inst.n_h, cfg.hidden_dim, inst.n_z, cfg.leak, seed=cfg.seed, dtype=dtype)
    optimizer = AdamWState.for_params(params, lr=cfg.lr_start, weight_decay=cfg.weight_decay)
    scheduler = PlateauScheduler(patience=cfg.patience, factor=cfg.lr_factor, cooldown=cfg.cooldown,
                                 min_lr=cfg.min_lr)
    conv = resolve_convexification(inst, cfg.convexify, cfg.rho)
    logging.info(f"Training predictor: {inst.n_h} -> {cfg.hidden_dim} -> {inst.n_z}, "
                 f"batch {cfg.batch_size}, up to {cfg.max_epochs} epochs, convexification={conv.enabled}")

    rows = []
    bad_epochs = 0
    with trange(1, cfg.max_epochs + 1, desc="Predictor", disable=not progress) as pbar:
        for epoch in pbar:
            x = rng.uniform(-1.0, 1.0, (cfg.batch_size, inst.n_h)).astype(dtype)
            z_pred, cache = mlp_forward(params, x)
            result = predictor_loss_and_grad(inst, x, z_pred, conv, cfg.eps)
            rows.append((epoch, result.loss, optimizer.lr, 0, result.nonfinite))

            if not np.isfinite(result.loss):
                bad_epochs += 1
                logging.warning(f"Predictor epoch {epoch}: non-finite loss ({bad_epochs} in a row)")
                if bad_epochs >= MAX_NONFINITE_STEPS:
                    raise DivergenceError(f"Predictor loss non-finite for {bad_epochs} consecutive epochs "
                                          f"(last finite lr {optimizer.lr:.3e})")
                continue
            bad_epochs = 0

            adamw_step(optimizer, params, mlp_backward(params, cache, result.grad))
            optimizer.lr, stop = plateau_step(scheduler, result.loss, optimizer.lr)
            if epoch % 100 == 0:
                pbar.set_postfix(loss=f"{result.loss:.3e}", lr=f"{optimizer.lr:.1e}")
            if stop:
                logging.info(f"Predictor training stopped at epoch {epoch}: plateau at minimal learning rate")
                break

    return params, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


@dataclass
class IteratePool:
    """Training-time population of iterates advanced by the solver and resampled when done."""

    x: np.ndarray
    z: np.ndarray
    k: np.ndarray
    t0: np.ndarray
    t: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @classmethod
    def initialize(cls, inst: ProblemInstance, size: int, rng: np.random.Generator,
                   predictor: Optional[MlpParams] = None, eps: float = DEFAULT_EPS) -> "IteratePool":
        dtype = inst.dtype
        pool = cls(
            x=np.zeros((size, inst.n_h), dtype=dtype),
            z=np.zeros((size, inst.n_z), dtype=dtype),
            k=np.zeros(size, dtype=np.int64),
            t0=np.ones(size, dtype=float),
            t=np.ones(size, dtype=float),
        )
        pool.resample(inst, np.arange(size), rng, predictor, eps)
        return pool

    def resample(self, inst: ProblemInstance, idx: np.ndarray, rng: np.random.Generator,
                 predictor: Optional[MlpParams], eps: float) -> None:
        if idx.size == 0:
            return
        x = rng.uniform(-1.0, 1.0, (idx.size, inst.n_h)).astype(self.x.dtype)
        if predictor is not None:
            z = predict_start(predictor, x)
        else:
            z = rng.standard_normal((idx.size, inst.n_z))
        self.x[idx] = x
        self.z[idx] = z
        self.k[idx] = 0
        t = 0.5 * squared_norm(residual_batch(inst, self.z[idx], x, eps))
        self.t0[idx] = t
        self.t[idx] = t

    def advance(self, inst: ProblemInstance, delta: np.ndarray, cfg: SolverTrainConfig,
                rng: np.random.Generator, predictor: Optional[MlpParams]) -> Tuple[int, int]:
        """Apply the predicted steps with the ``delta * t0`` safeguard; return (resampled, rejected)."""
        z_next = self.z + cfg.alpha * delta
        with np.errstate(over="ignore", invalid="ignore"):
            t_next = 0.5 * squared_norm(residual_batch(inst, z_next, self.x, cfg.eps))
        accept = t_next <= cfg.safeguard_delta * self.t0
        self.z[accept] = z_next[accept]
        self.t[accept] = t_next[accept]
        self.k += 1

        done = np.flatnonzero((self.k >= cfg.n_max_train) | (self.t <= cfg.tau))
        self.resample(inst, done, rng, predictor, cfg.eps)
        return done.size, int((~accept).sum())


def train_solver(inst: ProblemInstance, cfg: SolverTrainConfig, predictor: Optional[MlpParams] = None,
                 progress: bool = True) -> Tuple[MlpParams, pd.DataFrame]:
    if cfg.use_predictor != (predictor is not None):
        raise ValidationError("A predictor must be given exactly when use_predictor is set")
    dtype = np.dtype(cfg.dtype)
    inst = inst.astype(dtype)
    if predictor is not None:
        predictor = predictor.astype(dtype)
    rng = np.random.default_rng(cfg.seed)
    n_y, n_z = inst.n_y, inst.n_z
    params = mlp_init(n_z + 1 + inst.n_h, cfg.hidden_dim, n_z, cfg.leak, seed=cfg.seed, dtype=dtype)
    optimizer = AdamWState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    base_conv = resolve_convexification(inst, cfg.convexify, cfg.rho)
    pool = IteratePool.initialize(inst, cfg.batch_size, rng, predictor, cfg.eps)
    logging.info(f"Training solver: {params.in_dim} -> {cfg.hidden_dim} -> {n_z}, batch {cfg.batch_size}, "
                 f"{cfg.total_steps} steps, predictor={'yes' if predictor is not None else 'no'}, "
                 f"convexification={base_conv.enabled}")

    rows = []
    bad_steps = 0
    with trange(1, cfg.total_steps + 1, desc="Solver", disable=not progress) as pbar:
        for step in pbar:
            f = residual_batch(inst, pool.z, pool.x, cfg.eps)
            inputs, norms = solver_inputs(f, pool.x)
            out, cache = mlp_forward(params, inputs)
            delta = norms[:, None] * out

            conv = Convexification(base_conv.enabled, base_conv.rho, y_lin=pool.z[:, :n_y])
            result = solver_loss_and_grad(inst, pool.x, pool.z, delta, conv, cfg.eps)
            if np.isfinite(result.loss):
                bad_steps = 0
                grads = mlp_backward(params, cache, norms[:, None] * result.grad)
                adamw_step(optimizer, params, grads)
            else:
                bad_steps += 1
                logging.warning(f"Solver step {step}: non-finite loss ({bad_steps} in a row)")
                if bad_steps >= MAX_NONFINITE_STEPS:
                    raise DivergenceError(f"Solver loss non-finite for {bad_steps} consecutive steps")

            resampled = rejected = 0
            if step > cfg.warmup_delay:
                resampled, rejected = pool.advance(inst, delta, cfg, rng, predictor)
            rows.append((step, result.loss, optimizer.lr, resampled, result.nonfinite))

            if step % cfg.log_every == 0:
                mean_log_t = float(np.mean(np.log10(np.maximum(pool.t, LOG_T_FLOOR))))
                logging.info(f"Solver step {step}: loss {result.loss:.3f}, pool mean log10 T {mean_log_t:.2f}, "
                             f"resampled {resampled}, rejected {rejected}")
            if step % 100 == 0:
                pbar.set_postfix(loss=f"{result.loss:.3f}")

    return params, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def write_history(history: pd.DataFrame, path) -> None:
    history.to_csv(path, index=False)
