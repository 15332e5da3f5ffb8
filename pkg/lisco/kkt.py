"""Smoothed Fischer-Burmeister form of the KKT conditions.

The residual rows are ordered ``[stationarity (n_y); equality (n_h); FB (n_g)]``.
This order is the solver network's input layout and is versioned by
``RESIDUAL_LAYOUT_VERSION``.
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from lisco.errors import DimensionError, SingularPointError, ValidationError
from lisco.problems import ProblemInstance, ProblemKind, constraints, objective_grad, objective_hess, objective_hess_vec

RESIDUAL_LAYOUT_VERSION = 1
DEFAULT_EPS = 1e-6


@dataclass
class PrimalDual:
    """Concatenated primal-dual point ``z = (y, nu, lambda)``."""

    z: np.ndarray
    n_y: int
    n_h: int
    n_g: int

    def __post_init__(self):
        self.z = np.asarray(self.z)
        if self.z.shape != (self.n_z,):
            raise DimensionError(f"Expected z of length {self.n_z}, got shape {self.z.shape}")

    @classmethod
    def for_instance(cls, inst: ProblemInstance, z) -> "PrimalDual":
        return cls(np.asarray(z), inst.n_y, inst.n_h, inst.n_g)

    @classmethod
    def from_parts(cls, y, nu, lam) -> "PrimalDual":
        y, nu, lam = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (y, nu, lam))
        return cls(np.concatenate([y, nu, lam]), y.size, nu.size, lam.size)

    @property
    def n_z(self) -> int:
        return self.n_y + self.n_h + self.n_g

    @property
    def y(self) -> np.ndarray:
        return self.z[:self.n_y]

    @property
    def nu(self) -> np.ndarray:
        return self.z[self.n_y:self.n_y + self.n_h]

    @property
    def lam(self) -> np.ndarray:
        return self.z[self.n_y + self.n_h:]


@dataclass
class KktResidual:
    f_vec: np.ndarray
    norm2: float
    t_metric: float

    @classmethod
    def from_vector(cls, f_vec: np.ndarray) -> "KktResidual":
        sq = float(squared_norm(f_vec))
        return cls(f_vec=f_vec, norm2=float(np.sqrt(sq)), t_metric=0.5 * sq)

    @property
    def is_finite(self) -> bool:
        return bool(np.isfinite(self.t_metric))


@dataclass
class Convexification:
    """Proximal linearization of the objective around ``y_lin``.

    With ``y_lin=None`` the objective is linearized at the evaluated point itself,
    and that point is treated as a constant when differentiating.
    """

    enabled: bool = False
    rho: float = 1.0
    y_lin: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.enabled and not self.rho > 0:
            raise ValidationError(f"Convexification needs rho > 0, got {self.rho}")


NO_CONVEXIFICATION = Convexification()


def default_convexify(kind: ProblemKind) -> bool:
    return kind != ProblemKind.CONVEX_QP


def squared_norm(f: np.ndarray) -> np.ndarray:
    return np.sum(f * f, axis=-1)


def fb(lambda_i, g_i, eps: float = DEFAULT_EPS):
    """Signed Fischer-Burmeister function; zero iff ``lambda >= 0, g <= 0, lambda * g = 0`` (for eps=0)."""
    value = lambda_i - g_i - np.sqrt(lambda_i * lambda_i + g_i * g_i + eps * eps)
    return float(value) if np.ndim(value) == 0 else value


def fb_partials(lambda_i, g_i, eps: float = DEFAULT_EPS):
    r = np.sqrt(np.square(lambda_i) + np.square(g_i) + eps * eps)
    if np.any(r == 0):
        raise SingularPointError("FB partials are undefined at lambda = g = 0 without smoothing")
    d_lambda = 1.0 - lambda_i / r
    d_g = -1.0 - g_i / r
    if np.ndim(d_lambda) == 0:
        return float(d_lambda), float(d_g)
    return d_lambda, d_g


def _as_array(z) -> np.ndarray:
    return z.z if isinstance(z, PrimalDual) else np.asarray(z)


def _split(inst: ProblemInstance, z: np.ndarray, x) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if z.ndim == 0 or z.shape[-1] != inst.n_z:
        raise DimensionError(f"Expected z with last dimension {inst.n_z}, got shape {z.shape}")
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] != inst.n_h:
        raise DimensionError(f"Expected x with last dimension {inst.n_h}, got shape {x.shape}")
    n_y, n_h = inst.n_y, inst.n_h
    return z[..., :n_y], z[..., n_y:n_y + n_h], z[..., n_y + n_h:]


def _linearization_point(y: np.ndarray, conv: Convexification) -> np.ndarray:
    if conv.y_lin is None:
        return y
    y_lin = np.asarray(conv.y_lin)
    if y_lin.shape[-1] != y.shape[-1]:
        raise DimensionError(f"Linearization point has length {y_lin.shape[-1]}, expected {y.shape[-1]}")
    return y_lin


def _stationarity(inst, y, nu, lam, conv: Convexification) -> np.ndarray:
    if conv.enabled:
        y_lin = _linearization_point(y, conv)
        grad = objective_grad(inst, y_lin) + 2.0 * conv.rho * (y - y_lin)
    else:
        grad = objective_grad(inst, y)
    return grad + nu @ inst.a_mat + lam @ inst.g_mat


def residual_batch(inst: ProblemInstance, z, x, eps: float = DEFAULT_EPS,
                   conv: Convexification = NO_CONVEXIFICATION) -> np.ndarray:
    """``F(z; x)`` along the last axis of ``z``; works for one point or a batch."""
    z = _as_array(z)
    y, nu, lam = _split(inst, z, x)
    eq, ineq = constraints(inst, y, x)
    return np.concatenate([_stationarity(inst, y, nu, lam, conv), eq, fb(lam, ineq, eps)], axis=-1)


def kkt_residual(inst: ProblemInstance, z, x, conv: Convexification = NO_CONVEXIFICATION,
                 eps: float = DEFAULT_EPS) -> KktResidual:
    z = _as_array(z)
    if z.ndim != 1:
        raise DimensionError("kkt_residual evaluates a single point; use residual_batch for batches")
    return KktResidual.from_vector(residual_batch(inst, z, x, eps, conv))


def residual_vjp(inst: ProblemInstance, z, x, v, eps: float = DEFAULT_EPS,
                 conv: Convexification = NO_CONVEXIFICATION) -> np.ndarray:
    """``J(z)^T v`` row by row, without forming the Jacobian."""
    z = _as_array(z)
    y, nu, lam = _split(inst, z, x)
    _, ineq = constraints(inst, y, x)
    d_lam, d_g = fb_partials(lam, ineq, eps)

    n_y, n_h = inst.n_y, inst.n_h
    v_stat, v_eq, v_fb = v[..., :n_y], v[..., n_y:n_y + n_h], v[..., n_y + n_h:]
    if conv.enabled:
        hv = 2.0 * conv.rho * v_stat
    else:
        hv = objective_hess_vec(inst, y, v_stat)
    out_y = hv + v_eq @ inst.a_mat + (d_g * v_fb) @ inst.g_mat
    out_nu = v_stat @ inst.a_mat.T
    out_lam = v_stat @ inst.g_mat.T + d_lam * v_fb
    return np.concatenate([out_y, out_nu, out_lam], axis=-1)


def kkt_jacobian(inst: ProblemInstance, z, x, conv: Convexification = NO_CONVEXIFICATION,
                 eps: float = DEFAULT_EPS) -> np.ndarray:
    """Dense ``dF/dz`` with block layout ``[[H, A^T, G^T], [A, 0, 0], [D_g G, 0, D_lambda]]``."""
    z = _as_array(z)
    y, nu, lam = _split(inst, z, x)
    _, ineq = constraints(inst, y, x)
    d_lam, d_g = fb_partials(lam, ineq, eps)
    d_lam, d_g = np.asarray(d_lam), np.asarray(d_g)

    n_y, n_h, n_z = inst.n_y, inst.n_h, inst.n_z
    s_eq, s_fb = slice(n_y, n_y + n_h), slice(n_y + n_h, n_z)
    jac = np.zeros(z.shape + (n_z,), dtype=np.result_type(z, inst.dtype))
    if conv.enabled:
        jac[..., :n_y, :n_y] = 2.0 * conv.rho * np.eye(n_y)
    else:
        jac[..., :n_y, :n_y] = objective_hess(inst, y)
    jac[..., :n_y, s_eq] = inst.a_mat.T
    jac[..., :n_y, s_fb] = inst.g_mat.T
    jac[..., s_eq, :n_y] = inst.a_mat
    jac[..., s_fb, :n_y] = d_g[..., :, None] * inst.g_mat
    idx = np.arange(n_y + n_h, n_z)
    jac[..., idx, idx] = d_lam
    return jac


def metric_t(F: Union[KktResidual, np.ndarray]):
    """Optimality metric ``T = 0.5 * ||F||^2``."""
    if isinstance(F, KktResidual):
        return F.t_metric
    value = 0.5 * squared_norm(np.asarray(F, dtype=float))
    return float(value) if np.ndim(value) == 0 else value
