"""Replication harness, error metrics and report files."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cluster import ledger_summary, partition_data
from .dqn import DqnConfig, StageTrace, run_dqn
from .models import gen_example1, gen_example2
from .quasinewton import DEFAULT_C1, DEFAULT_DELTA, DEFAULT_T, newton_solve

log = logging.getLogger(__name__)

MLE_DELTA = 1e-10
MAX_EXCLUDED_FRACTION = 0.05
SPREAD_NOTE = "sd/iqr/range are computed over per-replication log squared errors"


class ReplicationError(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    example: int = 1
    N: int = 10**6
    p: int = 100
    M: int = 50
    K: int = 4
    methods: tuple = ("sr1", "bfgs")
    R: int = 100
    base_seed: int = 0
    c0: Optional[float] = None
    rho: Optional[float] = None
    delta: float = DEFAULT_DELTA
    T: int = DEFAULT_T
    c1: float = DEFAULT_C1

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if self.example not in (1, 2):
            raise ValueError("example must be 1 or 2")
        if self.N % self.M:
            raise ValueError(f"M={self.M} does not divide N={self.N}")
        if self.R < 0:
            raise ValueError("R must be nonnegative")

    @property
    def n(self) -> int:
        return self.N // self.M

    def dataset(self, seed: int):
        gen = gen_example1 if self.example == 1 else gen_example2
        kw = {k: v for k, v in (("c0", self.c0), ("rho", self.rho)) if v is not None}
        return gen(self.N, self.p, seed=seed, **kw)


def compute_metrics(sq_errors: Sequence[float]) -> dict:
    """log of the mean squared error plus spread of the per-replication logs.

    Spread statistics use the sample SD (ddof=1) and type-7 quantiles. A zero
    error has log -inf: it is flagged and left out of the spread statistics.
    """
    e = np.asarray(sq_errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("need at least one replication")
    if np.any(e < 0):
        raise ValueError("squared errors must be nonnegative")
    mean = float(e.mean())
    out = {"log_mse": math.log(mean) if mean > 0 else -math.inf, "R": int(e.size), "flags": []}
    zero = e == 0.0
    if zero.any():
        out["flags"].append(f"{int(zero.sum())} zero errors excluded from spread")
    logs = np.log(e[~zero])
    if logs.size == 0:
        out.update(sd=math.nan, iqr=math.nan, range=math.nan)
        return out
    if logs.size == 1:
        out["flags"].append("single replication: sd reported as 0")
        sd = 0.0
    else:
        sd = float(np.std(logs, ddof=1))
    q1, q3 = np.percentile(logs, [25, 75])
    out.update(sd=sd, iqr=float(q3 - q1), range=float(logs.max() - logs.min()))
    return out


def timing_report(trace: StageTrace) -> dict:
    """T1 = master compute + mean worker compute, T2 = T - T1."""
    t = trace.timing
    return {"T1": t["T1"], "T2": t["T"] - t["T1"], "T": t["T"]}


@dataclass
class MetricsReport:
    spec: dict
    sq_errors: dict = field(default_factory=dict)
    mle_sq_errors: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    mle_metrics: Optional[dict] = None
    timing: dict = field(default_factory=dict)
    comm: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)
    note: str = SPREAD_NOTE

    @property
    def methods(self) -> list:
        return list(self.spec["methods"])

    @property
    def K(self) -> int:
        return int(self.spec["K"])

    def finalize(self) -> "MetricsReport":
        self.metrics = {}
        for method, stages in self.sq_errors.items():
            if stages and stages[0]:
                self.metrics[method] = [compute_metrics(errs) for errs in stages]
        self.mle_metrics = compute_metrics(self.mle_sq_errors) if self.mle_sq_errors else None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def run_replications(spec: ExperimentSpec, progress: bool = False) -> MetricsReport:
    """Fresh dataset per replication (seed base_seed + r), every method, and the MLE."""
    report = MetricsReport(spec=asdict(spec))
    report.sq_errors = {m: [[] for _ in range(spec.K + 1)] for m in spec.methods}
    report.timing = {m: [] for m in spec.methods}
    report.comm = {m: None for m in spec.methods}
    for r in range(1, spec.R + 1):
        seed = spec.base_seed + r
        try:
            ds = spec.dataset(seed)
            shards = partition_data(ds, spec.M, seed)
            theta0 = ds.theta_true
            errs = {}
            for method in spec.methods:
                cfg = DqnConfig(K=spec.K, method=method, delta=spec.delta, T=spec.T, c1=spec.c1)
                trace = run_dqn(shards, cfg)
                errs[method] = [float(np.sum((th - theta0) ** 2)) for th in trace.theta_by_stage]
                report.timing[method].append(timing_report(trace))
                report.comm[method] = ledger_summary(trace.ledger)
            mle = newton_solve(shards, delta=MLE_DELTA, T=spec.T)
            if not mle.converged:
                raise ReplicationError("MLE did not converge")
            mle_err = float(np.sum((mle.theta_hat - theta0) ** 2))
        except Exception as exc:  # recorded, excluded, and bounded below
            log.warning("replication %d failed: %s", r, exc)
            report.excluded.append({"replication": r, "error": str(exc)})
            continue
        for method, per_stage in errs.items():
            for k, e in enumerate(per_stage):
                report.sq_errors[method][k].append(e)
        report.mle_sq_errors.append(mle_err)
        if progress:
            log.info("replication %d/%d done", r, spec.R)
    if spec.R and len(report.excluded) > MAX_EXCLUDED_FRACTION * spec.R:
        raise ReplicationError(f"{len(report.excluded)} of {spec.R} replications failed")
    return report.finalize()


# ---------------------------------------------------------------------------
# output files

METRIC_ROWS = ("log_mse", "sd", "iqr", "range")


def table_header(methods: Sequence[str], K: int) -> list:
    cols = [f"stage{k}_{m}" for k in range(K + 1) for m in methods]
    return ["metric", "setting"] + cols + ["mle"]


def table_rows(report: MetricsReport, setting_key: str = "p") -> list:
    if not report.mle_sq_errors:
        return []
    setting = report.spec.get(setting_key)
    rows = []
    for metric in METRIC_ROWS:
        row = [metric, setting]
        for k in range(report.K + 1):
            for m in report.methods:
                row.append(report.metrics[m][k][metric])
        row.append(report.mle_metrics[metric])
        rows.append(row)
    return rows


def write_report(reports, path, name: str = "bench", setting_key: str = "p") -> dict:
    """Write ``<name>_table.csv``, ``<name>_full.json`` and ``<name>_plot.csv`` under ``path``.

    ``reports`` is one report or a list of them (one table block per setting,
    e.g. per p or per n).
    """
    if isinstance(reports, MetricsReport):
        reports = [reports]
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "table": out / f"{name}_table.csv",
            "full": out / f"{name}_full.json",
            "plot": out / f"{name}_plot.csv",
        }
        methods = reports[0].methods if reports else []
        K = reports[0].K if reports else 0
        with files["table"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(table_header(methods, K))
            for metric in METRIC_ROWS:
                for rep in reports:
                    w.writerows(row for row in table_rows(rep, setting_key) if row[0] == metric)
        with files["plot"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([setting_key, "stage", "method", "log_mse"])
            for rep in reports:
                setting = rep.spec.get(setting_key)
                for m, per_stage in rep.metrics.items():
                    for k, met in enumerate(per_stage):
                        w.writerow([setting, k, m, met["log_mse"]])
                if rep.mle_metrics is not None:
                    w.writerow([setting, "", "mle", rep.mle_metrics["log_mse"]])
        doc = {"note": SPREAD_NOTE, "reports": [rep.to_dict() for rep in reports]}
        files["full"].write_text(json.dumps(doc, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return files


def load_full_report(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [MetricsReport.from_dict(d) for d in doc["reports"]]


def stage_timing_summary(report: MetricsReport) -> dict:
    out = {}
    for m, spans in report.timing.items():
        if spans:
            out[m] = {key: float(np.mean([s[key] for s in spans])) for key in ("T1", "T2", "T")}
    return out

