"""Parametric problem families: convex QP, non-convex QP and a Rosenbrock variant.

Every family shares the constraint structure ``A y = x`` and ``G y <= h``; the
parameters ``x`` enter only the equality right-hand side. Evaluation functions
accept a single point ``(n_y,)`` or a batch ``(N, n_y)`` and work on the last axis.
"""
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from lisco.errors import DimensionError, GenerationError, ValidationError

INSTANCE_FORMAT_VERSION = 1
MAX_GENERATION_ATTEMPTS = 10
PIVOT_THRESHOLD = 1e-10


class ProblemKind(str, Enum):
    CONVEX_QP = "convex_qp"
    NONCONVEX_QP = "nonconvex_qp"
    ROSENBROCK = "rosenbrock"

    @classmethod
    def parse(cls, tag: str) -> "ProblemKind":
        try:
            return cls(str(tag).lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValidationError(f"Unknown problem kind '{tag}'. Expected one of: {valid}")


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    kind: ProblemKind
    q_diag: Optional[np.ndarray]
    p: np.ndarray
    a_mat: np.ndarray
    g_mat: np.ndarray
    h_vec: np.ndarray
    seed: int = 0
    n_y: int = field(init=False)
    n_h: int = field(init=False)
    n_g: int = field(init=False)

    def __post_init__(self):
        for name in ("q_diag", "p", "a_mat", "g_mat", "h_vec"):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.array(value, copy=True)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

        n_y = self.p.shape[0]
        a_mat = self.a_mat.reshape(-1, n_y) if self.a_mat.size == 0 else self.a_mat
        g_mat = self.g_mat.reshape(-1, n_y) if self.g_mat.size == 0 else self.g_mat
        object.__setattr__(self, "a_mat", a_mat)
        object.__setattr__(self, "g_mat", g_mat)
        object.__setattr__(self, "n_y", n_y)
        object.__setattr__(self, "n_h", a_mat.shape[0])
        object.__setattr__(self, "n_g", g_mat.shape[0])

        if self.p.ndim != 1 or n_y == 0:
            raise DimensionError("p must be a non-empty vector")
        if not isinstance(self.kind, ProblemKind):
            object.__setattr__(self, "kind", ProblemKind.parse(self.kind))
        if a_mat.ndim != 2 or a_mat.shape[1] != n_y:
            raise DimensionError(f"A must have {n_y} columns, got shape {a_mat.shape}")
        if g_mat.ndim != 2 or g_mat.shape[1] != n_y:
            raise DimensionError(f"G must have {n_y} columns, got shape {g_mat.shape}")
        if self.h_vec.shape != (self.n_g,):
            raise DimensionError(f"h must have length {self.n_g}, got shape {self.h_vec.shape}")
        if self.kind == ProblemKind.ROSENBROCK:
            if self.q_diag is not None:
                raise ValidationError("Rosenbrock instances carry no Q diagonal")
        elif self.q_diag is None or self.q_diag.shape != (n_y,):
            raise DimensionError(f"{self.kind.value} needs a Q diagonal of length {n_y}")

    @property
    def n_z(self) -> int:
        return self.n_y + self.n_h + self.n_g

    @property
    def dtype(self) -> np.dtype:
        return self.p.dtype

    def astype(self, dtype) -> "ProblemInstance":
        cast = lambda arr: None if arr is None else arr.astype(dtype)
        return ProblemInstance(
            kind=self.kind, q_diag=cast(self.q_diag), p=cast(self.p), a_mat=cast(self.a_mat),
            g_mat=cast(self.g_mat), h_vec=cast(self.h_vec), seed=self.seed,
        )


@dataclass
class ParamBatch:
    x: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]


def pseudo_inverse(a_mat: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a full-row-rank matrix via ``A^T (A A^T)^{-1}``."""
    n_h, n_y = a_mat.shape
    if n_h == 0:
        return np.zeros((n_y, 0), dtype=a_mat.dtype)
    if n_h > n_y:
        raise GenerationError(f"A has more rows ({n_h}) than columns ({n_y})")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(a_mat @ a_mat.T)
    if np.min(np.abs(np.diag(lu))) < PIVOT_THRESHOLD:
        raise GenerationError("A is rank deficient")
    return a_mat.T @ lu_solve((lu, piv), np.eye(n_h, dtype=a_mat.dtype))


def feasibility_bound(a_mat: np.ndarray, g_mat: np.ndarray) -> np.ndarray:
    """``h_i = sum_j |G A^+|_ij``, so ``y = A^+ x`` is feasible for every ``x`` in ``[-1, 1]^n_h``."""
    return np.abs(g_mat @ pseudo_inverse(a_mat)).sum(axis=1)


def build_instance(kind, p, a_mat, g_mat, q_diag=None, h_vec=None, seed: int = 0) -> ProblemInstance:
    kind = ProblemKind.parse(kind) if not isinstance(kind, ProblemKind) else kind
    p = np.asarray(p, dtype=float)
    a_mat = np.asarray(a_mat, dtype=float).reshape(-1, p.shape[0])
    g_mat = np.asarray(g_mat, dtype=float).reshape(-1, p.shape[0])
    if h_vec is None:
        h_vec = feasibility_bound(a_mat, g_mat)
    return ProblemInstance(kind=kind, q_diag=q_diag, p=p, a_mat=a_mat, g_mat=g_mat,
                           h_vec=np.asarray(h_vec, dtype=float), seed=seed)


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValidationError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def gen_instance(kind, n_y: int, n_h: int, n_g: int, seed: int) -> ProblemInstance:
    kind = ProblemKind.parse(kind) if not isinstance(kind, ProblemKind) else kind
    if not 0 < n_h <= n_y:
        raise ValidationError(f"Need 0 < n_h <= n_y, got n_h={n_h}, n_y={n_y}")
    if n_g <= 0:
        raise ValidationError(f"Need n_g > 0, got {n_g}")
    rng = np.random.default_rng(_check_seed(seed))

    q_diag = rng.uniform(0.0, 1.0, n_y)
    p = rng.uniform(0.0, 1.0, n_y)
    for attempt in range(1, MAX_GENERATION_ATTEMPTS + 1):
        a_mat = rng.standard_normal((n_h, n_y))
        try:
            a_pinv = pseudo_inverse(a_mat)
            break
        except GenerationError:
            logging.warning(f"Rank-deficient A on attempt {attempt}/{MAX_GENERATION_ATTEMPTS}, regenerating")
    else:
        raise GenerationError(f"A stayed rank deficient after {MAX_GENERATION_ATTEMPTS} attempts")
    g_mat = rng.standard_normal((n_g, n_y))
    h_vec = np.abs(g_mat @ a_pinv).sum(axis=1)

    return build_instance(
        kind, p, a_mat, g_mat,
        q_diag=None if kind == ProblemKind.ROSENBROCK else q_diag,
        h_vec=h_vec, seed=seed,
    )


def sample_params(inst: ProblemInstance, n: int, seed: int) -> ParamBatch:
    if n < 1:
        raise ValidationError(f"Need at least one parameter sample, got n={n}")
    rng = np.random.default_rng(_check_seed(seed))
    return ParamBatch(x=rng.uniform(-1.0, 1.0, (n, inst.n_h)).astype(inst.dtype))


def _points(inst: ProblemInstance, y, x=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0 or y.shape[-1] != inst.n_y:
        raise DimensionError(f"Expected y with last dimension {inst.n_y}, got shape {y.shape}")
    if x is not None:
        x = np.asarray(x)
        if x.ndim == 0 or x.shape[-1] != inst.n_h:
            raise DimensionError(f"Expected x with last dimension {inst.n_h}, got shape {x.shape}")
    return y


def _scalar_if_single(value):
    return float(value) if np.ndim(value) == 0 else value


def objective(inst: ProblemInstance, y, x=None):
    y = _points(inst, y, x)
    if inst.kind == ProblemKind.CONVEX_QP:
        value = 0.5 * np.sum(inst.q_diag * y * y, axis=-1) + y @ inst.p
    elif inst.kind == ProblemKind.NONCONVEX_QP:
        value = 0.5 * np.sum(inst.q_diag * y * y, axis=-1) + np.sin(y) @ inst.p
    else:
        head, tail = y[..., :-1], y[..., 1:]
        value = np.sum((tail - head ** 2) ** 2 + 0.01 * (1.0 - head) ** 2, axis=-1) + 5.0 * (y @ inst.p)
    return _scalar_if_single(value)


def objective_grad(inst: ProblemInstance, y, x=None) -> np.ndarray:
    y = _points(inst, y, x)
    if inst.kind == ProblemKind.CONVEX_QP:
        return inst.q_diag * y + inst.p
    if inst.kind == ProblemKind.NONCONVEX_QP:
        return inst.q_diag * y + inst.p * np.cos(y)
    grad = np.broadcast_to(5.0 * inst.p, y.shape).copy()
    head, tail = y[..., :-1], y[..., 1:]
    r = tail - head ** 2
    grad[..., :-1] += -4.0 * head * r - 0.02 * (1.0 - head)
    grad[..., 1:] += 2.0 * r
    return grad


def _rosenbrock_bands(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    head, tail = y[..., :-1], y[..., 1:]
    diag = np.zeros_like(y)
    diag[..., :-1] += -4.0 * tail + 12.0 * head ** 2 + 0.02
    diag[..., 1:] += 2.0
    return diag, -4.0 * head


def _hess_diag(inst: ProblemInstance, y: np.ndarray) -> np.ndarray:
    if inst.kind == ProblemKind.CONVEX_QP:
        return np.broadcast_to(inst.q_diag, y.shape)
    return inst.q_diag - inst.p * np.sin(y)


def objective_hess(inst: ProblemInstance, y, x=None) -> np.ndarray:
    y = _points(inst, y, x)
    n = inst.n_y
    hess = np.zeros(y.shape + (n,), dtype=y.dtype)
    idx = np.arange(n)
    if inst.kind == ProblemKind.ROSENBROCK:
        diag, off = _rosenbrock_bands(y)
        hess[..., idx, idx] = diag
        hess[..., idx[:-1], idx[1:]] = off
        hess[..., idx[1:], idx[:-1]] = off
    else:
        hess[..., idx, idx] = _hess_diag(inst, y)
    return hess


def objective_hess_vec(inst: ProblemInstance, y, v) -> np.ndarray:
    """Hessian-vector product without forming the Hessian."""
    y = _points(inst, y)
    v = np.asarray(v)
    if inst.kind != ProblemKind.ROSENBROCK:
        return _hess_diag(inst, y) * v
    diag, off = _rosenbrock_bands(y)
    out = diag * v
    out[..., :-1] += off * v[..., 1:]
    out[..., 1:] += off * v[..., :-1]
    return out


def constraints(inst: ProblemInstance, y, x) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(A y - x, G y - h)``; the point is feasible when the first is zero and the second non-positive."""
    y = _points(inst, y, x)
    x = np.asarray(x)
    if x.shape[:-1] != y.shape[:-1]:
        raise DimensionError(f"Batch shapes of y {y.shape} and x {x.shape} differ")
    return y @ inst.a_mat.T - x, y @ inst.g_mat.T - inst.h_vec


def instance_to_dict(inst: ProblemInstance) -> dict:
    return {
        "format_version": INSTANCE_FORMAT_VERSION,
        "kind": inst.kind.value,
        "n_y": inst.n_y,
        "n_h": inst.n_h,
        "n_g": inst.n_g,
        "q_diag": None if inst.q_diag is None else inst.q_diag.tolist(),
        "p": inst.p.tolist(),
        "a_row_major": inst.a_mat.ravel().tolist(),
        "g_row_major": inst.g_mat.ravel().tolist(),
        "h": inst.h_vec.tolist(),
        "seed": inst.seed,
    }


def instance_from_dict(data: dict) -> ProblemInstance:
    try:
        version = data["format_version"]
        if version != INSTANCE_FORMAT_VERSION:
            raise ValidationError(f"Unsupported instance format version {version}")
        n_y, n_h, n_g = int(data["n_y"]), int(data["n_h"]), int(data["n_g"])
        q_diag = data["q_diag"]
        return ProblemInstance(
            kind=ProblemKind.parse(data["kind"]),
            q_diag=None if q_diag is None else np.array(q_diag, dtype=float),
            p=np.array(data["p"], dtype=float),
            a_mat=np.array(data["a_row_major"], dtype=float).reshape(n_h, n_y),
            g_mat=np.array(data["g_row_major"], dtype=float).reshape(n_g, n_y),
            h_vec=np.array(data["h"], dtype=float),
            seed=int(data["seed"]),
        )
    except KeyError as e:
        raise ValidationError(f"Instance file is missing field {e}")
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Malformed instance data: {e}")


def save_instance(inst: ProblemInstance, path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(instance_to_dict(inst), f)
    return path


def load_instance(path) -> ProblemInstance:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"Instance file {path} is not valid JSON: {e}")
    return instance_from_dict(data)


def instance_hash(inst: ProblemInstance) -> str:
    canonical = json.dumps(instance_to_dict(inst), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
