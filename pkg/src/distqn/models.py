"""Loss models for generalized linear M-estimation and synthetic data generators.

Every loss is the per-sample negative log-likelihood with additive constants
dropped, averaged over the rows of a shard:

    logistic  l(x, y; theta) = log(1 + exp(z)) - y z
    poisson   l(x, y; theta) = exp(z) - y z
    gaussian  l(x, y; theta) = (y - z)^2 / 2

with z = x' theta. Random draws use numpy's PCG64 bit generator
(``numpy.random.default_rng(seed)``), so datasets are reproducible across
platforms for a fixed seed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ModelKind(str, enum.Enum):
    LOGISTIC = "logistic"
    POISSON = "poisson"
    GAUSSIAN = "gaussian"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "ModelKind":
        for kind, c in _KIND_CODES.items():
            if c == code:
                return kind
        raise ValueError(f"unknown model kind code {code}")


_KIND_CODES = {ModelKind.LOGISTIC: 0, ModelKind.POISSON: 1, ModelKind.GAUSSIAN: 2}


class EvaluationError(ArithmeticError):
    """A loss, gradient or Hessian evaluation produced a non-finite value."""

    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


def _check_response(kind: ModelKind, Y: np.ndarray) -> None:
    if kind is ModelKind.LOGISTIC:
        if not np.all((Y == 0) | (Y == 1)):
            raise ValueError("logistic responses must be 0 or 1")
    elif kind is ModelKind.POISSON:
        if np.any(Y < 0) or not np.all(Y == np.floor(Y)):
            raise ValueError("poisson responses must be nonnegative integers")


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    kind: ModelKind
    theta_true: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        self.kind = ModelKind(self.kind)
        if self.X.ndim != 2 or self.X.shape[0] < 1 or self.X.shape[1] < 1:
            raise ValueError(f"X must be a non-empty N x p matrix, got shape {self.X.shape}")
        if self.Y.shape != (self.X.shape[0],):
            raise ValueError(f"Y has shape {self.Y.shape}, expected ({self.X.shape[0]},)")
        _check_response(self.kind, self.Y)
        if self.theta_true is not None:
            self.theta_true = np.asarray(self.theta_true, dtype=np.float64)
            if self.theta_true.shape != (self.p,):
                raise ValueError("theta_true length must equal p")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class DataShard:
    """One worker's block of rows."""

    worker_id: int
    X: np.ndarray
    Y: np.ndarray
    kind: ModelKind

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        self.kind = ModelKind(self.kind)
        if self.X.ndim != 2 or self.Y.shape != (self.X.shape[0],):
            raise ValueError("shard X must be n x p and Y length n")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_dataset(cls, ds: Dataset, worker_id: int = 0) -> "DataShard":
        return cls(worker_id, ds.X, ds.Y, ds.kind)


# ---------------------------------------------------------------------------
# loss evaluation


def _linear_predictor(shard: DataShard, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (shard.p,):
        raise ValueError(f"theta has shape {theta.shape}, shard has p={shard.p}")
    return shard.X @ theta


def _raise_nonfinite(values: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EvaluationError(f"non-finite {what}", row=int(bad[0]))


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z) without overflow for large |z|
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(-np.abs(z))))


def sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def _poisson_mean(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        mu = np.exp(z)
    _raise_nonfinite(mu, "poisson mean exp(x'theta)")
    return mu


def evaluate(shard: DataShard, theta) -> tuple[float, np.ndarray]:
    """Average loss and gradient of the shard at ``theta``."""
    z = _linear_predictor(shard, theta)
    y = shard.Y
    if shard.kind is ModelKind.LOGISTIC:
        per_row = _softplus(z) - y * z
        resid = sigmoid(z) - y
    elif shard.kind is ModelKind.POISSON:
        mu = _poisson_mean(z)
        per_row = mu - y * z
        resid = mu - y
    else:
        resid = z - y
        per_row = 0.5 * resid * resid
    _raise_nonfinite(per_row, "loss")
    loss = float(per_row.mean())
    grad = (shard.X.T @ resid) / shard.n
    return loss, grad


def _curvature_weights(shard: DataShard, z: np.ndarray) -> np.ndarray:
    if shard.kind is ModelKind.LOGISTIC:
        mu = sigmoid(z)
        return mu * (1.0 - mu)
    if shard.kind is ModelKind.POISSON:
        return _poisson_mean(z)
    return np.ones_like(z)


def hessian(shard: DataShard, theta) -> np.ndarray:
    """Average Hessian of the shard loss; exactly symmetric."""
    z = _linear_predictor(shard, theta)
    w = _curvature_weights(shard, z)
    Hm = (shard.X * w[:, None]).T @ shard.X / shard.n
    return 0.5 * (Hm + Hm.T)


def directional_curvature(shard: DataShard, theta, direction) -> float:
    """d' Hess(theta) d without forming the Hessian."""
    z = _linear_predictor(shard, theta)
    w = _curvature_weights(shard, z)
    xd = shard.X @ np.asarray(direction, dtype=np.float64)
    return float(np.dot(w, xd * xd) / shard.n)


# ---------------------------------------------------------------------------
# generators


def _ar1_covariates(rng: np.random.Generator, N: int, p: int, rho: float) -> np.ndarray:
    """Gaussian rows with cov(X_j1, X_j2) = rho^|j1 - j2|, built column by column."""
    X = rng.standard_normal((N, p))
    scale = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        X[:, j] *= scale
        X[:, j] += rho * X[:, j - 1]
    return X


def _signal(rng: np.random.Generator, p: int, c0: float) -> np.ndarray:
    gamma = rng.standard_normal(p)
    return c0 * gamma / np.linalg.norm(gamma)


def _check_gen_args(N: int, p: int, rho: float) -> None:
    if N < 1 or p < 1:
        raise ValueError("N and p must be positive")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")


def gen_example1(N: int, p: int, c0: float = 1.5, rho: float = 0.5, seed: int = 0) -> Dataset:
    """Logistic regression with AR(1)-correlated Gaussian covariates."""
    _check_gen_args(N, p, rho)
    rng = np.random.default_rng(seed)
    theta0 = _signal(rng, p, c0)
    X = _ar1_covariates(rng, N, p, rho)
    prob = sigmoid(X @ theta0)
    Y = (rng.random(N) < prob).astype(np.float64)
    return Dataset(X, Y, ModelKind.LOGISTIC, theta0)


def gen_example2(N: int, p: int, c0: float = 0.3, rho: float = 0.2, seed: int = 0) -> Dataset:
    """Poisson regression; same covariate design as :func:`gen_example1`."""
    _check_gen_args(N, p, rho)
    rng = np.random.default_rng(seed)
    theta0 = _signal(rng, p, c0)
    X = _ar1_covariates(rng, N, p, rho)
    Y = rng.poisson(np.exp(X @ theta0)).astype(np.float64)
    return Dataset(X, Y, ModelKind.POISSON, theta0)


SCREENING_PATTERN = np.array([1.0, -1.1, 1.2, -1.3, 1.4]) / 2.0


def screening_theta(p: int, s: int) -> np.ndarray:
    if s % 5 != 0:
        raise ValueError(f"s must be divisible by 5, got {s}")
    if s > p:
        raise ValueError(f"s={s} exceeds p={p}")
    theta = np.zeros(p)
    theta[:s] = np.tile(SCREENING_PATTERN, s // 5)
    return theta


def gen_screening_dataset(
    N: int, p: int, s: int = 20, q: Optional[int] = None, seed: int = 0, mixture_var: float = 0.5
) -> Dataset:
    """Ultrahigh-dimensional logistic design for screening experiments.

    Noise columns come in three blocks: standard normal, double exponential
    (location 0, scale 1), and an equal mixture of N(-1, 1) and
    N(1, ``mixture_var``). The first ``q`` columns share a row-level common
    factor through X_ij = (e_ij + a_ij * e_i) / sqrt(1 + a_ij^2).
    ``q`` defaults to ``s``.
    """
    if p < 3:
        raise ValueError("p must be at least 3")
    if N < 1:
        raise ValueError("N must be positive")
    q = s if q is None else q
    if not 0 <= q <= p:
        raise ValueError(f"q must lie in [0, p], got {q}")
    theta = screening_theta(p, s)
    rng = np.random.default_rng(seed)
    b1, b2 = p // 3, (2 * p) // 3
    X = np.empty((N, p))
    X[:, :b1] = rng.standard_normal((N, b1))
    X[:, b1:b2] = rng.laplace(0.0, 1.0, (N, b2 - b1))
    m = p - b2
    upper = rng.random((N, m)) < 0.5
    z = rng.standard_normal((N, m))
    # in place: upper component sqrt(v) z + 1, lower component z - 1
    np.multiply(z, math.sqrt(mixture_var), out=z, where=upper)
    np.add(z, 1.0, out=z, where=upper)
    np.subtract(z, 1.0, out=z, where=~upper)
    X[:, b2:] = z
    if q > 0:
        common = rng.standard_normal(N)
        a = rng.standard_normal((N, q))
        X[:, :q] = (X[:, :q] + a * common[:, None]) / np.sqrt(1.0 + a * a)
    prob = sigmoid(X @ theta)
    Y = (rng.random(N) < prob).astype(np.float64)
    return Dataset(X, Y, ModelKind.LOGISTIC, theta)
