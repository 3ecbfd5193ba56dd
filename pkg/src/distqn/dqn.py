"""Distributed K-stage quasi-Newton estimators over a master/worker protocol.

Every stage costs three communication rounds:

* ``theta``: the master broadcasts the current estimate (stage 1 also
  gathers the workers' local estimates and averages them first);
* ``gradient``: workers upload local gradients, the master broadcasts the
  averaged global gradient;
* ``direction``: workers upload ``H_m g`` (SR1 stages >= 2 also upload
  their ``v_m`` vector) and the master steps to the next estimate.

Workers rebuild the secant pair of the previous stage from broadcast
estimates and gradients, so no extra payload is needed for it.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cluster import (
    MASTER_ID,
    CommLedger,
    InMemoryTransport,
    Message,
    MsgType,
    Transport,
    average,
    ledger_summary,
)
from .cluster.transport import CMD_START, control, control_command
from .models import DataShard, evaluate, hessian
from .quasinewton import (
    DEFAULT_C1,
    DEFAULT_DELTA,
    DEFAULT_T,
    bfgs_curvature_ok,
    bfgs_update,
    local_qn_solve,
    newton_solve,
    rank_one_update,
    spd_solve,
    sr1_guard,
)

log = logging.getLogger(__name__)

DQN_METHODS = ("sr1", "bfgs", "newton")


@dataclass
class DqnConfig:
    K: int = 4
    method: str = "bfgs"
    delta: float = DEFAULT_DELTA
    T: int = DEFAULT_T
    c1: float = DEFAULT_C1
    step: str = "unit"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.method not in DQN_METHODS:
            raise ValueError(f"method must be one of {DQN_METHODS}, got {self.method!r}")
        if not 0.0 < self.c1 < 1.0:
            raise ValueError("c1 must lie in (0, 1)")


@dataclass
class StageTrace:
    method: str
    K: int
    M: int
    theta_by_stage: list = field(default_factory=list)
    global_grad_by_stage: list = field(default_factory=list)
    secants: list = field(default_factory=list)
    local_thetas: list = field(default_factory=list)
    ledger: CommLedger = field(default_factory=CommLedger)
    timing: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.theta_by_stage[-1]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "K": self.K,
            "M": self.M,
            "theta_by_stage": [t.tolist() for t in self.theta_by_stage],
            "global_grad_by_stage": [g.tolist() for g in self.global_grad_by_stage],
            "grad_norm_by_stage": [float(np.linalg.norm(g)) for g in self.global_grad_by_stage],
            "secants": [
                {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in rec.items()}
                for rec in self.secants
            ],
            "ledger": self.ledger.to_dict(),
            "timing": self.timing,
        }

    def to_json(self, path=None, **kw) -> str:
        text = json.dumps(self.to_dict(), **kw)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


class SolveFailure(RuntimeError):
    pass


def _local_solve(shard: DataShard, cfg: DqnConfig):
    """Stage-0 solve on one shard.

    A unit-step quasi-Newton run that blows up or stalls (SR1 matrices can go
    indefinite far from the optimum) is redone once with backtracking.
    """
    if cfg.method == "newton":
        rep = newton_solve(shard, delta=cfg.delta, T=cfg.T)
    else:
        rep = local_qn_solve(shard, None, cfg.method, cfg.delta, cfg.T, cfg.c1, step=cfg.step)
        if cfg.step == "unit" and (rep.failed or not rep.converged):
            log.info("worker %d: unit-step local solve %s, retrying with backtracking",
                     shard.worker_id, rep.status if rep.failed else "did not converge")
            rep = local_qn_solve(shard, None, cfg.method, cfg.delta, cfg.T, cfg.c1, step="backtracking")
    if rep.failed or not np.all(np.isfinite(rep.theta_hat)):
        raise SolveFailure(f"local solve on worker {shard.worker_id} failed: {rep.status}")
    return rep


class WorkerNode:
    """Worker-side protocol state: the shard, H_(m,k), and broadcast history."""

    def __init__(self, shard: DataShard, cfg: DqnConfig):
        self.shard = shard
        self.cfg = cfg
        self.worker_id = shard.worker_id
        self.H: Optional[np.ndarray] = None
        self.thetas: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []

    def _reply(self, msg_type, stage, *vectors) -> Message:
        return Message(msg_type, stage, self.worker_id, vectors)

    def handle(self, msg: Message) -> Optional[Message]:
        t = msg.msg_type
        if t is MsgType.CONTROL and control_command(msg) == CMD_START:
            rep = _local_solve(self.shard, self.cfg)
            self.H = rep.H
            return self._reply(MsgType.LOCAL_THETA, msg.stage, rep.theta_hat)
        if t is MsgType.BROADCAST_THETA:
            return self._on_theta(msg.stage, msg.payload[0])
        if t is MsgType.BROADCAST_THETA_AND_V:
            theta, v = msg.payload
            k = msg.stage
            if np.any(v != 0.0):
                y = self.grads[k - 2] - self.grads[k - 3]
                self.H = rank_one_update(self.H, v, float(v @ y))
            return self._on_theta(k, theta)
        if t is MsgType.GLOBAL_GRAD:
            return self._on_global_grad(msg.stage, msg.payload[0])
        raise ValueError(f"worker {self.worker_id} cannot handle {t.name}")

    def _on_theta(self, stage: int, theta: np.ndarray) -> Message:
        if len(self.thetas) != stage - 1:
            raise RuntimeError(f"worker {self.worker_id}: theta for stage {stage} out of order")
        self.thetas.append(theta)
        return self._reply(MsgType.LOCAL_GRAD, stage, evaluate(self.shard, theta)[1])

    def _on_global_grad(self, stage: int, g: np.ndarray) -> Message:
        self.grads.append(g)
        k = stage
        method = self.cfg.method
        if method == "newton":
            d = spd_solve(hessian(self.shard, self.thetas[k - 1]), g)
            return self._reply(MsgType.HV_PRODUCT, k, d)
        if k >= 2:
            s = self.thetas[k - 1] - self.thetas[k - 2]
            y = self.grads[k - 1] - self.grads[k - 2]
            if method == "bfgs":
                self.H, _ = bfgs_update(self.H, s, y)
            else:
                v = s - self.H @ y
                return self._reply(MsgType.V_VECTOR, k, v, self.H @ g)
        return self._reply(MsgType.HV_PRODUCT, k, self.H @ g)


# ---------------------------------------------------------------------------
# master side


class _MasterClock:
    def __init__(self):
        self.seconds = 0.0

    def __enter__(self):
        self._t0 = time.thread_time()

    def __exit__(self, *exc):
        self.seconds += time.thread_time() - self._t0


def run_stage0(transport: Transport, cfg: DqnConfig, clock: Optional[_MasterClock] = None):
    """Workers solve locally; the master averages the local estimates.

    Returns ``(theta_stage0, local_thetas)``. The workers keep their H_(m,0).
    """
    clock = clock or _MasterClock()
    transport.begin_round("stage1/theta")
    transport.broadcast(control(CMD_START, 0))
    replies = transport.gather()
    local = [r.payload[0] for r in replies]
    with clock:
        theta0 = average(local)
    return theta0, local


def gradient_round(transport: Transport, theta, stage: int = 1, open_round: bool = True,
                   clock: Optional[_MasterClock] = None) -> np.ndarray:
    """Broadcast ``theta``, gather local gradients, return their average.

    With ``open_round=False`` the theta broadcast joins the round already open.
    """
    clock = clock or _MasterClock()
    if open_round:
        transport.begin_round(f"stage{stage}/theta")
    transport.broadcast(Message(MsgType.BROADCAST_THETA, stage, MASTER_ID, (theta,)))
    transport.begin_round(f"stage{stage}/gradient")
    grads = [r.payload[0] for r in transport.gather()]
    with clock:
        return average(grads)


def _sr1_correction(v_bar: np.ndarray, y: np.ndarray, g: np.ndarray, c1: float):
    ok, denom = sr1_guard(v_bar, y, c1)
    if not ok:
        return np.zeros_like(g), False
    return v_bar * (float(v_bar @ g) / denom), True


def run_protocol(transport: Transport, cfg: DqnConfig) -> StageTrace:
    """Drive the master side of a DQN(K) or distributed-Newton run."""
    clock = _MasterClock()
    wall0 = time.perf_counter()
    trace = StageTrace(cfg.method, cfg.K, transport.M, ledger=transport.ledger)
    theta, local = run_stage0(transport, cfg, clock)
    trace.local_thetas = local
    trace.theta_by_stage.append(theta)
    v_prev = None
    for k in range(1, cfg.K + 1):
        if k == 1:
            g = gradient_round(transport, theta, 1, open_round=False, clock=clock)
        elif cfg.method == "sr1":
            transport.begin_round(f"stage{k}/theta")
            v_send = np.zeros_like(theta) if v_prev is None else v_prev
            transport.broadcast(Message(MsgType.BROADCAST_THETA_AND_V, k, MASTER_ID, (theta, v_send)))
            transport.begin_round(f"stage{k}/gradient")
            with_grads = [r.payload[0] for r in transport.gather()]
            with clock:
                g = average(with_grads)
        else:
            g = gradient_round(transport, theta, k, clock=clock)
        trace.global_grad_by_stage.append(g)
        transport.broadcast(Message(MsgType.GLOBAL_GRAD, k, MASTER_ID, (g,)))
        transport.begin_round(f"stage{k}/direction")
        replies = transport.gather()
        with clock:
            if cfg.method == "sr1" and k >= 2:
                v_bar = average([r.payload[0] for r in replies])
                hg = average([r.payload[1] for r in replies])
                s = trace.theta_by_stage[k - 1] - trace.theta_by_stage[k - 2]
                y = trace.global_grad_by_stage[k - 1] - trace.global_grad_by_stage[k - 2]
                corr, applied = _sr1_correction(v_bar, y, g, cfg.c1)
                v_prev = v_bar if applied else None
                trace.secants.append({"stage": k, "s": s, "y": y, "v": v_bar, "applied": applied})
                step = hg + corr
            else:
                step = average([r.payload[0] for r in replies])
                if cfg.method == "bfgs" and k >= 2:
                    s = trace.theta_by_stage[k - 1] - trace.theta_by_stage[k - 2]
                    y = trace.global_grad_by_stage[k - 1] - trace.global_grad_by_stage[k - 2]
                    trace.secants.append({"stage": k, "s": s, "y": y, "applied": bfgs_curvature_ok(s, y)})
            theta = theta - step
        trace.theta_by_stage.append(theta)
    wall = time.perf_counter() - wall0
    workers = transport.worker_compute_seconds()
    trace.timing = timing_from_spans(clock.seconds, workers, wall)
    return trace


def timing_from_spans(master_seconds: float, worker_seconds: Sequence[float], wall: float) -> dict:
    T1 = master_seconds + (float(np.mean(worker_seconds)) if len(worker_seconds) else 0.0)
    return {"T1": T1, "T2": wall - T1, "T": wall, "master": master_seconds,
            "workers": list(worker_seconds)}


TransportFactory = Callable[[list], Transport]


def run_dqn(shards: Sequence[DataShard], cfg: DqnConfig,
            transport_factory: Optional[TransportFactory] = None) -> StageTrace:
    """Run a full protocol over a fresh in-memory cluster (or a custom transport)."""
    _check_shards(shards)
    handlers = [WorkerNode(sh, cfg) for sh in shards]
    factory = transport_factory or InMemoryTransport
    with factory(handlers) as transport:
        return run_protocol(transport, cfg)


def run_dqn_bfgs(shards, cfg: Optional[DqnConfig] = None, **kw) -> StageTrace:
    cfg = _with_method(cfg, "bfgs", kw)
    return run_dqn(shards, cfg)


def run_dqn_sr1(shards, cfg: Optional[DqnConfig] = None, **kw) -> StageTrace:
    cfg = _with_method(cfg, "sr1", kw)
    return run_dqn(shards, cfg)


def run_distributed_newton(shards, K: int = 4, **kw) -> StageTrace:
    return run_dqn(shards, DqnConfig(K=K, method="newton", **kw))


def _with_method(cfg, method, kw) -> DqnConfig:
    if cfg is None:
        return DqnConfig(method=method, **kw)
    if cfg.method != method:
        raise ValueError(f"config method is {cfg.method!r}, expected {method!r}")
    return cfg


def _check_shards(shards: Sequence[DataShard]) -> None:
    if not shards:
        raise ValueError("need at least one shard")
    n, p = shards[0].n, shards[0].p
    for m, sh in enumerate(shards):
        if sh.worker_id != m:
            raise ValueError(f"shard {m} carries worker_id {sh.worker_id}")
        if sh.n != n or sh.p != p:
            raise ValueError("shards must have equal n and p")


# ---------------------------------------------------------------------------
# single-process oracle


def centralized_reference(shards: Sequence[DataShard], cfg: DqnConfig) -> list[np.ndarray]:
    """All worker states held in one process, no transport.

    Reproduces the stage estimates of :func:`run_dqn` arithmetic step for
    arithmetic step, summing in worker-id order. Returns theta_0..theta_K.
    """
    _check_shards(shards)
    M = len(shards)
    reports = [_local_solve(sh, cfg) for sh in shards]
    Hs = [r.H for r in reports]
    thetas = [average([r.theta_hat for r in reports])]
    grads: list[np.ndarray] = []
    v_prev = None
    for k in range(1, cfg.K + 1):
        theta = thetas[k - 1]
        if cfg.method == "sr1" and k >= 3 and v_prev is not None:
            y3 = grads[k - 2] - grads[k - 3]
            Hs = [rank_one_update(Hs[m], v_prev, float(v_prev @ y3)) for m in range(M)]
        g = average([evaluate(sh, theta)[1] for sh in shards])
        grads.append(g)
        if cfg.method == "newton":
            step = average([spd_solve(hessian(sh, theta), g) for sh in shards])
        elif k == 1:
            step = average([H @ g for H in Hs])
        else:
            s = thetas[k - 1] - thetas[k - 2]
            y = grads[k - 1] - grads[k - 2]
            if cfg.method == "bfgs":
                Hs = [bfgs_update(H, s, y)[0] for H in Hs]
                step = average([H @ g for H in Hs])
            else:
                v_bar = average([s - H @ y for H in Hs])
                hg = average([H @ g for H in Hs])
                corr, applied = _sr1_correction(v_bar, y, g, cfg.c1)
                v_prev = v_bar if applied else None
                step = hg + corr
        thetas.append(theta - step)
    return thetas
