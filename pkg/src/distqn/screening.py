"""Distributed sure independence screening with marginal logistic fits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numba
import numpy as np

from .cluster import InMemoryTransport, Message, MsgType, average
from .cluster.transport import CMD_START, control, control_command
from .models import DataShard, ModelKind, sigmoid

SLOPE_CLAMP = 50.0
MARGINAL_TOL = 1e-8
MARGINAL_MAX_ITER = 100


@dataclass
class MarginalFit:
    slopes: np.ndarray
    clamped: np.ndarray
    iterations: np.ndarray


@numba.njit(cache=True)
def _newton_columns(XT, Y, a, b, tol, max_iter, clamp):  # pragma: no cover - compiled
    # rows of XT are the columns still to fit, contiguous in memory
    n = XT.shape[1]
    flags = np.zeros(b.size, dtype=np.bool_)
    iters = np.ones(b.size, dtype=np.int64)
    for j in range(b.size):
        aj, bj = a[j], b[j]
        xj = XT[j]
        for it in range(1, max_iter):
            s0 = 0.0
            s1 = 0.0
            i00 = 0.0
            i01 = 0.0
            i11 = 0.0
            for i in range(n):
                x = xj[i]
                mu = 1.0 / (1.0 + math.exp(-(aj + bj * x)))
                w = mu * (1.0 - mu)
                r = Y[i] - mu
                wx = w * x
                s0 += r
                s1 += x * r
                i00 += w
                i01 += wx
                i11 += wx * x
            det = i00 * i11 - i01 * i01
            if not det > 0.0:
                flags[j] = True
                break
            da = (i11 * s0 - i01 * s1) / det
            db = (i00 * s1 - i01 * s0) / det
            aj += da
            bj += db
            iters[j] = it + 1
            if abs(bj) > clamp:
                bj = clamp if bj > 0.0 else -clamp
                flags[j] = True
                break
            if max(abs(da), abs(db)) <= tol:
                break
        b[j] = bj
    return b, flags, iters


def marginal_mles(X: np.ndarray, Y: np.ndarray, tol: float = MARGINAL_TOL,
                  max_iter: int = MARGINAL_MAX_ITER) -> MarginalFit:
    """Slopes of the univariate logistic fits of Y on (1, X_j), for every column.

    Newton iterations on (intercept, slope) start from (logit(mean Y), 0);
    the fitted mean is constant there, so the first step is closed form.
    Each column stops once its largest update is at most ``tol``. Constant
    columns get slope 0; slopes past +-50 (separation) are clamped and flagged.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    n, p = X.shape
    ybar = float(np.mean(Y))
    if ybar in (0.0, 1.0):
        return MarginalFit(np.zeros(p), np.zeros(p, dtype=bool), np.zeros(p, dtype=np.int64))
    w0 = ybar * (1.0 - ybar)
    sx = X.sum(axis=0)
    sxx = np.einsum("ij,ij->j", X, X)
    s1 = X.T @ Y - ybar * sx
    det = w0 * w0 * (n * sxx - sx * sx)
    constant = np.ptp(X, axis=0) == 0.0
    safe = np.where(constant, 1.0, det)
    db = np.where(constant, 0.0, w0 * n * s1 / safe)
    da = np.where(constant, 0.0, -w0 * sx * s1 / safe)
    a = math.log(ybar / (1.0 - ybar)) + da
    b = db.copy()
    done = constant | (np.maximum(np.abs(da), np.abs(db)) <= tol)
    todo = np.flatnonzero(~done)
    XT = np.ascontiguousarray(X[:, todo].T)
    b[todo], flags_todo, iters_todo = _newton_columns(XT, Y, a[todo], b[todo], tol, max_iter, SLOPE_CLAMP)
    flags = np.zeros(p, dtype=bool)
    flags[todo] = flags_todo
    iters = np.where(constant, 0, 1).astype(np.int64)
    iters[todo] = iters_todo
    return MarginalFit(b, flags, iters)


def marginal_mle(shard: DataShard, j: int) -> float:
    """Marginal logistic slope of feature ``j`` on one shard."""
    if shard.kind is not ModelKind.LOGISTIC:
        raise ValueError("marginal screening needs a logistic shard")
    if not 0 <= j < shard.p:
        raise IndexError(f"feature {j} out of range for p={shard.p}")
    return float(marginal_mles(shard.X[:, j:j + 1], shard.Y).slopes[0])


def screen_size(n: int, p: int) -> int:
    return min(p, math.ceil(n / math.log(n)))


@dataclass
class ScreenResult:
    selected: list
    marginal_estimates: np.ndarray
    threshold: float
    n: int
    coverage: Optional[float] = None
    clamped: list = field(default_factory=list)
    rounds: int = 0

    def to_dict(self) -> dict:
        out = {
            "selected": [int(j) for j in self.selected],
            "marginal_estimates": self.marginal_estimates.tolist(),
            "threshold": self.threshold,
            "n": self.n,
            "clamped": [int(j) for j in self.clamped],
            "rounds": self.rounds,
        }
        if self.coverage is not None:
            out["coverage_rate"] = self.coverage
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


class ScreeningWorker:
    def __init__(self, shard: DataShard):
        self.shard = shard
        self.worker_id = shard.worker_id
        self.clamped: np.ndarray = np.zeros(0, dtype=bool)

    def handle(self, msg: Message):
        if control_command(msg) != CMD_START:
            raise ValueError(f"screening worker cannot handle {msg.msg_type.name}")
        fit = marginal_mles(self.shard.X, self.shard.Y)
        self.clamped = fit.clamped
        return Message(MsgType.LOCAL_THETA, msg.stage, self.worker_id, (fit.slopes,))


def select_top(estimates: np.ndarray, k: int) -> list:
    """Indices of the k largest |estimates|, ties to the lower index."""
    order = np.lexsort((np.arange(estimates.size), -np.abs(estimates)))
    return [int(j) for j in order[:k]]


def distributed_sis(shards: Sequence[DataShard], true_set: Optional[Iterable[int]] = None) -> ScreenResult:
    """Average per-worker marginal slopes and keep the top ceil(n / log n)."""
    if any(sh.kind is not ModelKind.LOGISTIC for sh in shards):
        raise ValueError("distributed screening needs logistic shards")
    workers = [ScreeningWorker(sh) for sh in shards]
    with InMemoryTransport(workers) as transport:
        transport.begin_round("screen/marginals")
        transport.broadcast(control(CMD_START, 0))
        replies = transport.gather()
        rounds = transport.ledger.rounds
    theta_tilde = average([r.payload[0] for r in replies])
    n, p = shards[0].n, shards[0].p
    selected = select_top(theta_tilde, screen_size(n, p))
    clamped = sorted({int(j) for w in workers for j in np.flatnonzero(w.clamped)})
    result = ScreenResult(selected, theta_tilde, float(abs(theta_tilde[selected[-1]])), n,
                          clamped=clamped, rounds=rounds)
    if true_set is not None:
        result.coverage = coverage_rate(selected, true_set)
    return result


def coverage_rate(selected: Iterable[int], true_set: Iterable[int]) -> float:
    truth = set(int(j) for j in true_set)
    if not truth:
        raise ValueError("true_set must be nonempty")
    return len(truth & set(int(j) for j in selected)) / len(truth)
