"""One-hidden-layer leaky-ReLU network with hand-written backprop, AdamW and a plateau scheduler."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from lisco.errors import DimensionError, NumericalError, ValidationError, WeightFileError

WEIGHTS_FORMAT_VERSION = 1
DEFAULT_LEAK = 0.01
ROLES = ("predictor", "solver")


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    leak: float = DEFAULT_LEAK

    def __post_init__(self):
        hidden, in_dim = self.w1.shape
        out_dim = self.w2.shape[0]
        if self.b1.shape != (hidden,) or self.w2.shape != (out_dim, hidden) or self.b2.shape != (out_dim,):
            raise DimensionError(
                f"Inconsistent layer shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def tensors(self) -> List[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(*(t.astype(dtype) for t in self.tensors()), leak=self.leak)

    def copy(self) -> "MlpParams":
        return MlpParams(*(t.copy() for t in self.tensors()), leak=self.leak)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: np.ndarray
    act: np.ndarray


def parameter_count(in_dim: int, hidden_dim: int, out_dim: int) -> int:
    return in_dim * hidden_dim + hidden_dim + hidden_dim * out_dim + out_dim


def mlp_init(in_dim: int, hidden_dim: int, out_dim: int, leak: float = DEFAULT_LEAK,
             seed: int = 0, dtype=np.float64) -> MlpParams:
    if min(in_dim, hidden_dim, out_dim) <= 0:
        raise ValidationError(f"Network dimensions must be positive, got ({in_dim}, {hidden_dim}, {out_dim})")
    rng = np.random.default_rng(seed)
    bound1 = np.sqrt(1.0 / in_dim)
    bound2 = np.sqrt(1.0 / hidden_dim)
    return MlpParams(
        w1=rng.uniform(-bound1, bound1, (hidden_dim, in_dim)).astype(dtype),
        b1=np.zeros(hidden_dim, dtype=dtype),
        w2=rng.uniform(-bound2, bound2, (out_dim, hidden_dim)).astype(dtype),
        b2=np.zeros(out_dim, dtype=dtype),
        leak=leak,
    )


def leaky_relu(t: np.ndarray, leak: float) -> np.ndarray:
    return np.where(t >= 0, t, leak * t)


def mlp_forward(p: MlpParams, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != p.in_dim:
        raise DimensionError(f"Expected input of shape (n, {p.in_dim}), got {inputs.shape}")
    if not np.all(np.isfinite(inputs)):
        raise NumericalError("Network input contains non-finite values")
    pre = inputs @ p.w1.T + p.b1
    act = leaky_relu(pre, p.leak)
    return act @ p.w2.T + p.b2, ForwardCache(inputs=inputs, pre=pre, act=act)


def mlp_backward(p: MlpParams, cache: ForwardCache, d_out: np.ndarray) -> MlpParams:
    """Reverse-mode gradients summed over the batch; callers scale ``d_out``."""
    if d_out.shape != (cache.act.shape[0], p.out_dim) or cache.pre.shape[1] != p.hidden_dim:
        raise DimensionError(f"Gradient shape {d_out.shape} does not match the cached forward pass")
    d_act = d_out @ p.w2
    d_pre = d_act * np.where(cache.pre >= 0, 1.0, p.leak)
    return MlpParams(
        w1=d_pre.T @ cache.inputs,
        b1=d_pre.sum(axis=0),
        w2=d_out.T @ cache.act,
        b2=d_out.sum(axis=0),
        leak=p.leak,
    )


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step_count: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, p: MlpParams, **kwargs) -> "AdamWState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(t) for t in p.tensors()]
        state.v = [np.zeros_like(t) for t in p.tensors()]
        return state


def adamw_step(state: AdamWState, p: MlpParams, grads: MlpParams) -> Tuple[AdamWState, MlpParams]:
    """Decoupled-weight-decay Adam update, applied in place and returned."""
    grad_tensors = grads.tensors()
    if not all(np.all(np.isfinite(g)) for g in grad_tensors):
        raise NumericalError("Rejected optimizer step: gradients contain non-finite values")
    if not state.m:
        state.m = [np.zeros_like(t) for t in p.tensors()]
        state.v = [np.zeros_like(t) for t in p.tensors()]

    state.step_count += 1
    bias1 = 1.0 - state.beta1 ** state.step_count
    bias2 = 1.0 - state.beta2 ** state.step_count
    for theta, g, m, v in zip(p.tensors(), grad_tensors, state.m, state.v):
        theta -= state.lr * state.weight_decay * theta
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        theta -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps_adam)
    return state, p


_MIN_LR_RTOL = 1e-6


@dataclass
class PlateauScheduler:
    patience: int = 1000
    factor: float = 0.1
    cooldown: int = 100
    min_lr: float = 1e-8
    best_loss: float = float("inf")
    epochs_since_improvement: int = 0
    cooldown_remaining: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValidationError(f"Scheduler factor must lie in (0, 1), got {self.factor}")


def plateau_step(s: PlateauScheduler, epoch_loss: float, lr: float) -> Tuple[float, bool]:
    """Return the learning rate for the next epoch and whether training should stop."""
    if epoch_loss < s.best_loss:
        s.best_loss = epoch_loss
        s.epochs_since_improvement = 0
    else:
        s.epochs_since_improvement += 1

    if s.cooldown_remaining > 0:
        s.cooldown_remaining -= 1
        s.epochs_since_improvement = 0

    if s.epochs_since_improvement >= s.patience:
        s.epochs_since_improvement = 0
        if lr <= s.min_lr * (1.0 + _MIN_LR_RTOL):
            return lr, True
        new_lr = max(lr * s.factor, s.min_lr)
        s.cooldown_remaining = s.cooldown
        logging.info(f"Loss plateau: reducing learning rate {lr:.3e} -> {new_lr:.3e}")
        return new_lr, False
    return lr, False


def save_weights(p: MlpParams, path, role: str, metadata: Optional[dict] = None) -> Path:
    if role not in ROLES:
        raise ValidationError(f"Unknown network role '{role}'")
    payload = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "role": role,
        "in_dim": p.in_dim,
        "hidden_dim": p.hidden_dim,
        "out_dim": p.out_dim,
        "leak": p.leak,
        "w1_row_major": p.w1.ravel().tolist(),
        "b1": p.b1.tolist(),
        "w2_row_major": p.w2.ravel().tolist(),
        "b2": p.b2.tolist(),
        "metadata": dict(metadata or {}),
    }
    path = Path(path)
    with open(path, "w") as f:
        json.dump(payload, f)
    return path


def load_weights(path, expected_role: Optional[str] = None) -> Tuple[MlpParams, dict]:
    """Load a weight file; returns the parameters and the stored metadata."""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise WeightFileError(f"Weight file {path} is not valid JSON: {e}")

    try:
        if data["format_version"] != WEIGHTS_FORMAT_VERSION:
            raise WeightFileError(f"Unsupported weight format version {data['format_version']}")
        role = data["role"]
        if expected_role is not None and role != expected_role:
            raise WeightFileError(f"Expected {expected_role} weights, but {path} holds {role} weights")
        in_dim, hidden, out_dim = int(data["in_dim"]), int(data["hidden_dim"]), int(data["out_dim"])
        w1 = np.array(data["w1_row_major"], dtype=float)
        w2 = np.array(data["w2_row_major"], dtype=float)
        b1 = np.array(data["b1"], dtype=float)
        b2 = np.array(data["b2"], dtype=float)
        if w1.size != hidden * in_dim or w2.size != out_dim * hidden:
            raise WeightFileError(f"Weight arrays in {path} do not match the declared dimensions")
        params = MlpParams(w1.reshape(hidden, in_dim), b1, w2.reshape(out_dim, hidden), b2,
                           leak=float(data["leak"]))
    except KeyError as e:
        raise WeightFileError(f"Weight file {path} is missing field {e}")
    except DimensionError as e:
        raise WeightFileError(str(e))

    metadata = dict(data.get("metadata", {}))
    metadata["role"] = role
    return params, metadata
