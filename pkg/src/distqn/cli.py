"""Command-line entry point: ``distqn <command> [flags]``.

Commands: gen, solve, bench, screen, master, worker. Every flag may also be
given in a JSON config file (``--config``) under the same key name as the
flag's long form with dashes turned into underscores; explicit flags win.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import ExperimentSpec, run_replications, stage_timing_summary, write_report
from .cluster import ledger_summary, partition_data
from .cluster.transport import TcpMasterTransport, serve_tcp_worker
from .dataio import load_csv, load_dataset, save_csv, save_dataset
from .dqn import DQN_METHODS, DqnConfig, WorkerNode, run_dqn, run_protocol
from .models import DataShard, gen_example1, gen_example2, gen_screening_dataset
from .quasinewton import DEFAULT_C1, DEFAULT_DELTA, DEFAULT_T, newton_solve
from .screening import distributed_sis

log = logging.getLogger("distqn")

TCP_ENV = "DQN_ENABLE_TCP"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_solver_flags(p):
    p.add_argument("--method", choices=DQN_METHODS, default="bfgs", help="update rule (default: %(default)s)")
    p.add_argument("--stages", type=int, default=4, help="number of DQN stages K (default: %(default)s)")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA, help="local gradient tolerance (default: %(default)s)")
    p.add_argument("--max-iter", type=int, default=DEFAULT_T, help="local iteration cap T (default: %(default)s)")
    p.add_argument("--c1", type=float, default=DEFAULT_C1, help="SR1 guard constant (default: %(default)s)")


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="dataset file (.bin container or .csv)")
    p.add_argument("--kind", choices=("logistic", "poisson", "gaussian"), default=None,
                   help="model kind, required for CSV input")
    p.add_argument("--workers", type=int, default=50, help="number of workers M (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="partition seed (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distqn", description="Distributed quasi-Newton estimation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress lines")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", default=None, help="JSON config with flag defaults")
        return p

    g = command("gen", "generate a synthetic dataset")
    g.add_argument("--example", choices=("1", "2", "screening"), default="1",
                   help="1 logistic, 2 poisson, screening ultrahigh-dimensional (default: %(default)s)")
    g.add_argument("--n-total", type=int, default=10**6, help="total sample size N (default: %(default)s)")
    g.add_argument("--p", type=int, default=100, help="dimension p (default: %(default)s)")
    g.add_argument("--c0", type=float, default=None, help="signal strength (default: 1.5 example 1, 0.3 example 2)")
    g.add_argument("--rho", type=float, default=None, help="AR(1) correlation (default: 0.5 example 1, 0.2 example 2)")
    g.add_argument("--s", type=int, default=20, help="active features, screening design (default: %(default)s)")
    g.add_argument("--q", type=int, default=None, help="correlated columns, screening design (default: s)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default: %(default)s)")
    g.add_argument("--out", required=True, help="output path (.bin or .csv)")

    s = command("solve", "run one DQN or distributed-Newton estimation")
    _add_data_flags(s)
    _add_solver_flags(s)
    s.add_argument("--trace", default=None, help="write the stage trace JSON here")
    s.add_argument("--timing", action="store_true", help="include wall-clock timing in the trace")
    s.add_argument("--mle", action="store_true", help="also compute the pooled MLE and report distances")

    b = command("bench", "replicate an experiment and write table/plot files")
    b.add_argument("--example", type=int, choices=(1, 2), default=1, help="(default: %(default)s)")
    b.add_argument("--n-total", type=int, default=10**6, help="total sample size N (default: %(default)s)")
    b.add_argument("--p", type=int, default=100, help="dimension p (default: %(default)s)")
    b.add_argument("--workers", type=int, default=50, help="number of workers M (default: %(default)s)")
    b.add_argument("--stages", type=int, default=4, help="number of DQN stages K (default: %(default)s)")
    b.add_argument("--methods", default="sr1,bfgs", help="comma-separated methods (default: %(default)s)")
    b.add_argument("--reps", type=int, default=100, help="replications R (default: %(default)s)")
    b.add_argument("--seed", type=int, default=0, help="base seed (default: %(default)s)")
    b.add_argument("--c0", type=float, default=None, help="signal strength override")
    b.add_argument("--rho", type=float, default=None, help="AR(1) correlation override")
    b.add_argument("--delta", type=float, default=DEFAULT_DELTA, help="local tolerance (default: %(default)s)")
    b.add_argument("--max-iter", type=int, default=DEFAULT_T, help="local iteration cap (default: %(default)s)")
    b.add_argument("--c1", type=float, default=DEFAULT_C1, help="SR1 guard constant (default: %(default)s)")
    b.add_argument("--out-dir", default=".", help="directory for output files (default: %(default)s)")
    b.add_argument("--name", default="bench", help="output file prefix (default: %(default)s)")
    b.add_argument("--timing", action="store_true", help="include wall-clock timing in the JSON")

    sc = command("screen", "distributed screening, optionally followed by DQN on the kept features")
    sc.add_argument("--data", default=None, help="logistic dataset file; generated when omitted")
    sc.add_argument("--n-total", type=int, default=10**5, help="N when generating (default: %(default)s)")
    sc.add_argument("--p", type=int, default=10**4, help="p when generating (default: %(default)s)")
    sc.add_argument("--s", type=int, default=20, help="active features when generating (default: %(default)s)")
    sc.add_argument("--q", type=int, default=None, help="correlated columns when generating (default: s)")
    sc.add_argument("--workers", type=int, default=20, help="number of workers M (default: %(default)s)")
    sc.add_argument("--seed", type=int, default=0, help="generator and partition seed (default: %(default)s)")
    sc.add_argument("--dqn-stages", type=int, default=0, help="run DQN(K) on the kept features when > 0")
    sc.add_argument("--method", choices=DQN_METHODS, default="bfgs", help="(default: %(default)s)")
    sc.add_argument("--out", required=True, help="screen result JSON path")

    for name, help_ in (("master", "TCP master (needs DQN_ENABLE_TCP=1)"),
                        ("worker", "TCP worker (needs DQN_ENABLE_TCP=1)")):
        t = command(name, help_)
        _add_data_flags(t)
        t.add_argument("--host", default="127.0.0.1", help="(default: %(default)s)")
        t.add_argument("--port", type=int, default=5757, help="(default: %(default)s)")
        _add_solver_flags(t)
        if name == "worker":
            t.add_argument("--worker-id", type=int, required=True, help="this worker's id in [0, M)")
        else:
            t.add_argument("--trace", default=None, help="write the stage trace JSON here")
    return parser


def _parse(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config {known.config} must hold a JSON object")
        command = next((a for a in (argv or sys.argv[1:]) if a in _subparsers(parser)), None)
        if command is None:
            raise UsageError("--config needs a subcommand")
        sub = _subparsers(parser)[command]
        known_keys = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = set(cfg) - known_keys
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)} for '{command}'")
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
        sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def _subparsers(parser) -> dict:
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "verbose")}


def _load(path, kind):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"data file {path} not found")
    if path.suffix.lower() == ".csv":
        if kind is None:
            raise UsageError("--kind is required for CSV input")
        return load_csv(path, kind)
    return load_dataset(path)


def _shards(args, ds):
    if args.workers < 1 or ds.N % args.workers:
        raise UsageError(f"--workers {args.workers} must divide N={ds.N} (equal shards)")
    return partition_data(ds, args.workers, args.seed)


def _dqn_config(args) -> DqnConfig:
    if args.stages < 1:
        raise UsageError("--stages must be at least 1")
    return DqnConfig(K=args.stages, method=args.method, delta=args.delta, T=args.max_iter, c1=args.c1)


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def cmd_gen(args):
    if args.example == "screening":
        ds = gen_screening_dataset(args.n_total, args.p, args.s, args.q, args.seed)
    else:
        gen = gen_example1 if args.example == "1" else gen_example2
        kw = {k: getattr(args, k) for k in ("c0", "rho") if getattr(args, k) is not None}
        ds = gen(args.n_total, args.p, seed=args.seed, **kw)
    out = Path(args.out)
    if out.suffix.lower() == ".csv":
        save_csv(ds, out)
    else:
        save_dataset(ds, out)
    _write_json(str(out) + ".meta.json", {
        "run_spec": _resolved(args),
        "kind": ds.kind.value,
        "N": ds.N,
        "p": ds.p,
        "theta_true": ds.theta_true.tolist(),
    })
    print(f"wrote {out} (N={ds.N}, p={ds.p}, {ds.kind.value})")


def _trace_doc(trace, args, timing: bool, extra=None) -> dict:
    doc = trace.to_dict()
    if not timing:
        doc.pop("timing")
    doc["run_spec"] = _resolved(args)
    if extra:
        doc.update(extra)
    return doc


def cmd_solve(args):
    ds = _load(args.data, args.kind)
    shards = _shards(args, ds)
    trace = run_dqn(shards, _dqn_config(args))
    extra = {}
    if args.mle:
        ge = newton_solve(shards, delta=1e-10).theta_hat
        extra["distance_to_mle"] = [float(np.linalg.norm(t - ge)) for t in trace.theta_by_stage]
    if args.trace:
        _write_json(args.trace, _trace_doc(trace, args, args.timing, extra))
    summary = ledger_summary(trace.ledger)
    print(f"{args.method} K={args.stages} M={args.workers}: rounds={summary['rounds']} "
          f"max_payload_floats={summary['max_payload_floats']} "
          f"final_grad_norm={np.linalg.norm(trace.global_grad_by_stage[-1]):.3e}")


def cmd_bench(args):
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    bad = set(methods) - set(DQN_METHODS)
    if bad or not methods:
        raise UsageError(f"--methods must be drawn from {DQN_METHODS}")
    if args.workers < 1 or args.n_total % args.workers:
        raise UsageError(f"--workers {args.workers} must divide --n-total {args.n_total}")
    spec = ExperimentSpec(example=args.example, N=args.n_total, p=args.p, M=args.workers, K=args.stages,
                          methods=methods, R=args.reps, base_seed=args.seed, c0=args.c0, rho=args.rho,
                          delta=args.delta, T=args.max_iter, c1=args.c1)
    report = run_replications(spec, progress=args.verbose)
    report.spec["run_spec"] = _resolved(args)
    if not args.timing:
        report.timing = {}
    files = write_report(report, args.out_dir, args.name)
    if args.timing:
        for m, t in stage_timing_summary(report).items():
            print(f"{m}: T1={t['T1']:.3f}s T2={t['T2']:.3f}s T={t['T']:.3f}s")
    print("wrote " + ", ".join(str(f) for f in files.values()))


def cmd_screen(args):
    if args.data:
        ds = _load(args.data, "logistic")
        true_set = None
        meta = Path(str(args.data) + ".meta.json")
        if meta.exists():
            theta = np.asarray(json.loads(meta.read_text())["theta_true"])
            true_set = np.flatnonzero(theta).tolist()
    else:
        ds = gen_screening_dataset(args.n_total, args.p, args.s, args.q, args.seed)
        true_set = list(range(args.s))
    shards = _shards(args, ds)
    result = distributed_sis(shards, true_set)
    doc = result.to_dict()
    doc["run_spec"] = _resolved(args)
    if args.dqn_stages > 0:
        keep = sorted(result.selected)
        reduced = [DataShard(sh.worker_id, sh.X[:, keep], sh.Y, sh.kind) for sh in shards]
        trace = run_dqn(reduced, DqnConfig(K=args.dqn_stages, method=args.method))
        doc["dqn"] = {"features": keep, "theta_by_stage": [t.tolist() for t in trace.theta_by_stage],
                      "rounds": ledger_summary(trace.ledger)["rounds"]}
    _write_json(args.out, doc)
    cr = "" if result.coverage is None else f" coverage={result.coverage:.3f}"
    print(f"kept {len(result.selected)} of {ds.p} features{cr}")


def _require_tcp():
    if os.environ.get(TCP_ENV) != "1":
        raise UsageError(f"TCP mode is disabled; set {TCP_ENV}=1 to enable it")


def cmd_master(args):
    _require_tcp()
    transport = TcpMasterTransport(args.workers, args.host, args.port)
    with transport:
        log.info("listening on %s:%d for %d workers", args.host, args.port, args.workers)
        transport.accept_workers()
        trace = run_protocol(transport, _dqn_config(args))
    if args.trace:
        _write_json(args.trace, _trace_doc(trace, args, True))
    print(f"rounds={ledger_summary(trace.ledger)['rounds']} theta_K={trace.final.tolist()}")


def cmd_worker(args):
    _require_tcp()
    ds = _load(args.data, args.kind)
    shards = _shards(args, ds)
    if not 0 <= args.worker_id < args.workers:
        raise UsageError("--worker-id must lie in [0, --workers)")
    handled = serve_tcp_worker(WorkerNode(shards[args.worker_id], _dqn_config(args)), args.host, args.port)
    print(f"worker {args.worker_id} handled {handled} requests")


COMMANDS = {
    "gen": cmd_gen,
    "solve": cmd_solve,
    "bench": cmd_bench,
    "screen": cmd_screen,
    "master": cmd_master,
    "worker": cmd_worker,
}


def cli_run(argv=None) -> int:
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(f"distqn: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0) if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"distqn: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"distqn: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
