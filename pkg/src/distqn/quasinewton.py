"""Inverse-Hessian quasi-Newton updates, a local quasi-Newton solver and
an exact Newton-Raphson solver used as the pooled-data reference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .models import DataShard, EvaluationError, directional_curvature, evaluate, hessian

DEFAULT_C1 = 1e-8
DEFAULT_DELTA = 1e-8
DEFAULT_T = 500
CURVATURE_FLOOR = 1e-12
PIVOT_FLOOR = 1e-12

ARMIJO_C = 1e-4
MAX_HALVINGS = 30

METHODS = ("sr1", "bfgs")
STEP_RULES = ("unit", "backtracking", "exact")


class SingularHessianError(np.linalg.LinAlgError):
    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


@dataclass
class SecantPair:
    """Step ``s`` and gradient difference ``y``."""

    s: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.s.shape != self.y.shape:
            raise ValueError("s and y must have equal length")

    @property
    def rho(self) -> float:
        sy = float(self.s @ self.y)
        return 1.0 / sy if sy != 0.0 else float("inf")

    def v(self, H: np.ndarray) -> np.ndarray:
        return self.s - H @ self.y


@dataclass
class SolveReport:
    theta_hat: np.ndarray
    H: np.ndarray
    iterations: int
    converged: bool
    final_grad_norm: float
    status: str = "ok"
    history: list = field(default_factory=list, repr=False)

    @property
    def failed(self) -> bool:
        return self.status != "ok"


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _check_dims(H: np.ndarray, s: np.ndarray, y: np.ndarray) -> None:
    p = s.shape[0]
    if H.shape != (p, p) or y.shape != (p,):
        raise ValueError(f"dimension mismatch: H {H.shape}, s {s.shape}, y {y.shape}")


def sr1_guard(v: np.ndarray, y: np.ndarray, c1: float = DEFAULT_C1) -> tuple[bool, float]:
    """Well-definedness test |v'y| >= c1 |v| |y| (with v'y != 0)."""
    denom = float(v @ y)
    ok = bool(denom != 0.0 and abs(denom) >= c1 * np.linalg.norm(v) * np.linalg.norm(y))
    return ok, denom


def rank_one_update(H: np.ndarray, v: np.ndarray, denom: float) -> np.ndarray:
    return symmetrize(H + np.outer(v, v) / denom)


def sr1_update(H: np.ndarray, s, y, c1: float = DEFAULT_C1) -> tuple[np.ndarray, bool]:
    """Symmetric rank-one update of an inverse-Hessian approximation.

    Returns ``(H, False)`` unchanged when the guard rejects the pair.
    """
    if not 0.0 < c1 < 1.0:
        raise ValueError(f"c1 must lie in (0, 1), got {c1}")
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(H, s, y)
    v = s - H @ y
    ok, denom = sr1_guard(v, y, c1)
    if not ok:
        return H, False
    return rank_one_update(H, v, denom), True


def bfgs_curvature_ok(s: np.ndarray, y: np.ndarray) -> bool:
    sy = float(s @ y)
    return bool(sy > CURVATURE_FLOOR * np.linalg.norm(s) * np.linalg.norm(y))


def bfgs_update(H: np.ndarray, s, y) -> tuple[np.ndarray, bool]:
    """BFGS inverse update H' = V'HV + rho s s', V = I - rho y s'.

    Expanded to O(p^2) form:
    H' = H - rho (s h' + h s') + (rho^2 y'h + rho) s s', with h = H y.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(H, s, y)
    if not bfgs_curvature_ok(s, y):
        return H, False
    rho = 1.0 / float(s @ y)
    h = H @ y
    coef = rho * rho * float(y @ h) + rho
    Hn = H - rho * (np.outer(s, h) + np.outer(h, s)) + coef * np.outer(s, s)
    return symmetrize(Hn), True


def update(method: str, H: np.ndarray, s, y, c1: float = DEFAULT_C1) -> tuple[np.ndarray, bool]:
    if method == "sr1":
        return sr1_update(H, s, y, c1)
    if method == "bfgs":
        return bfgs_update(H, s, y)
    raise ValueError(f"unknown quasi-Newton method {method!r}")


# ---------------------------------------------------------------------------
# solvers


def _sup(g: np.ndarray) -> float:
    return float(np.max(np.abs(g))) if g.size else 0.0


def _exact_step(shard: DataShard, theta, d, g, max_iter: int = 20) -> float:
    """Minimize the loss along d by scalar Newton iterations on alpha."""
    alpha = 0.0
    slope = float(g @ d)
    for _ in range(max_iter):
        curv = directional_curvature(shard, theta + alpha * d, d)
        if curv <= 0.0:
            break
        step = -slope / curv
        alpha += step
        slope = float(evaluate(shard, theta + alpha * d)[1] @ d)
        if abs(step) <= 1e-14 * (1.0 + abs(alpha)):
            break
    return alpha if alpha > 0.0 else 1.0


def local_qn_solve(
    shard: DataShard,
    theta0=None,
    method: str = "bfgs",
    delta: float = DEFAULT_DELTA,
    T: int = DEFAULT_T,
    c1: float = DEFAULT_C1,
    H0: Optional[np.ndarray] = None,
    step: str = "unit",
) -> SolveReport:
    """Quasi-Newton minimization of one shard's average loss.

    Iterates theta <- theta - alpha H g and refreshes H with the accepted
    (s, y) pair. Stops when the gradient sup-norm is at most ``delta`` or
    after ``T`` iterations. ``step`` selects alpha: ``"unit"`` (alpha = 1),
    ``"backtracking"`` (Armijo halving) or ``"exact"`` (line minimization).
    A non-finite iterate ends the run with ``status != "ok"`` and the last
    finite state.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if T < 0:
        raise ValueError("T must be nonnegative")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if step not in STEP_RULES:
        raise ValueError(f"unknown step rule {step!r}")
    p = shard.p
    theta = np.zeros(p) if theta0 is None else np.array(theta0, dtype=np.float64)
    H = np.eye(p) if H0 is None else np.array(H0, dtype=np.float64)
    loss, g = evaluate(shard, theta)
    gnorm = _sup(g)
    t = 0
    while gnorm > delta and t < T:
        d = -(H @ g)
        alpha = 1.0
        try:
            if step == "backtracking":
                slope = float(g @ d)
                if slope >= 0:
                    d, slope = -g, -float(g @ g)
                for _ in range(MAX_HALVINGS):
                    trial = evaluate(shard, theta + alpha * d)[0]
                    if trial <= loss + ARMIJO_C * alpha * slope:
                        break
                    alpha *= 0.5
            elif step == "exact":
                alpha = _exact_step(shard, theta, d, g)
            theta_new = theta + alpha * d
            loss_new, g_new = evaluate(shard, theta_new)
        except EvaluationError as exc:
            return SolveReport(theta, H, t, False, gnorm, status=f"evaluation failed: {exc}")
        if not (np.all(np.isfinite(theta_new)) and np.all(np.isfinite(g_new))):
            return SolveReport(theta, H, t, False, gnorm, status="non-finite iterate")
        H, _ = update(method, H, theta_new - theta, g_new - g, c1)
        theta, g, loss = theta_new, g_new, loss_new
        gnorm = _sup(g)
        t += 1
    return SolveReport(theta, H, t, gnorm <= delta, gnorm)


def spd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A by Cholesky."""
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise SingularHessianError("Hessian is not positive definite", np.linalg.cond(A)) from None
    piv = np.diag(L) ** 2
    if piv.min() < PIVOT_FLOOR:
        raise SingularHessianError(
            f"pivot {piv.min():.3g} below {PIVOT_FLOOR}", float(piv.max() / max(piv.min(), 1e-300))
        )
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


def spd_inverse(A: np.ndarray) -> np.ndarray:
    return symmetrize(spd_solve(A, np.eye(A.shape[0])))


def _pooled(shards: Sequence[DataShard], theta) -> tuple[float, np.ndarray]:
    total_loss, total_grad = 0.0, None
    for sh in shards:
        loss, g = evaluate(sh, theta)
        total_loss += loss
        total_grad = g if total_grad is None else total_grad + g
    M = len(shards)
    return total_loss / M, total_grad / M


def _pooled_hessian(shards: Sequence[DataShard], theta) -> np.ndarray:
    total = None
    for sh in shards:
        h = hessian(sh, theta)
        total = h if total is None else total + h
    return total / len(shards)


def newton_solve(
    shards: Sequence[DataShard] | DataShard,
    theta0=None,
    delta: float = DEFAULT_DELTA,
    T: int = DEFAULT_T,
) -> SolveReport:
    """Full Newton-Raphson on the pooled average loss of equal-size shards.

    Raises :class:`SingularHessianError` when the pooled Hessian cannot be
    factorized.
    """
    if isinstance(shards, DataShard):
        shards = [shards]
    p = shards[0].p
    if any(sh.p != p for sh in shards):
        raise ValueError("all shards must share p")
    theta = np.zeros(p) if theta0 is None else np.array(theta0, dtype=np.float64)
    _, g = _pooled(shards, theta)
    gnorm = _sup(g)
    t = 0
    while gnorm > delta and t < T:
        theta = theta - spd_solve(_pooled_hessian(shards, theta), g)
        _, g = _pooled(shards, theta)
        if not np.all(np.isfinite(g)):
            raise EvaluationError("non-finite gradient during Newton iteration")
        gnorm = _sup(g)
        t += 1
    H = spd_inverse(_pooled_hessian(shards, theta))
    return SolveReport(theta, H, t, gnorm <= delta, gnorm)
