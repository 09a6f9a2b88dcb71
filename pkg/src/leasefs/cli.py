"""Command line entry points.

    leasefs bench prepare|run|sweep ...   workload driver (CSV out)
    leasefs manager --listen ...          serve the lease manager
    leasefs storage --listen ...          serve one storage node
    leasefs check-ledger FILE             verify a grant-log dump
    leasefs scenario FILE ...             run a scripted interleaving

TCP deployments take endpoints from --manager/--storage or the
LEASEFS_MANAGER / LEASEFS_STORAGE environment variables (storage may be a
comma-separated list). The manager learns each node's revocation endpoint
from repeated --node ID=HOST:PORT flags.
"""

from __future__ import annotations

import argparse
import os
import signal
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import bench, checker
from .client import deadlock_demo
from .core import CacheMode, LeaseFsError
from .daemon import DaemonConfig
from .client import NodeConfig

MODES = {m.value: m for m in CacheMode}


def _spec_from_args(args: argparse.Namespace) -> bench.WorkloadSpec:
    return bench.WorkloadSpec(
        pattern=args.pattern,
        rw_ratio=args.rw,
        threads_per_node=args.threads,
        files_per_node=args.files,
        file_size=args.file_size,
        io_size=args.io_size,
        contention=args.contention,
        nodes=args.nodes,
        duration_s=args.duration if args.ops is None else None,
        ops_per_thread=args.ops,
        mode=MODES[args.mode],
        seed=args.seed,
        think_us=args.think_us,
        storage_nodes=args.storage_nodes,
        transport=args.transport,
    )


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=sorted(MODES), default="writeback")
    p.add_argument("--pattern", choices=["rand", "seq"], default="rand")
    p.add_argument("--rw", type=int, default=50, metavar="NN",
                   help="read percentage (0..100)")
    p.add_argument("--contention", type=int, default=0, metavar="NN",
                   help="shared-file percentage of each working set")
    p.add_argument("--nodes", type=int, default=2)
    p.add_argument("--threads", type=int, default=bench.DESK_THREADS)
    p.add_argument("--files", type=int, default=bench.DESK_FILES)
    p.add_argument("--file-size", type=int, default=bench.DESK_FILE_SIZE)
    p.add_argument("--io-size", type=int, default=bench.DESK_IO_SIZE)
    p.add_argument("--duration", type=float, default=bench.DESK_DURATION_S,
                   metavar="SECS")
    p.add_argument("--ops", type=int, default=None,
                   help="ops per thread instead of a duration")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--think-us", type=int, default=0,
                   help="per-op think time in microseconds")
    p.add_argument("--storage-nodes", type=int, default=1)
    p.add_argument("--transport", choices=["loopback", "tcp"], default="loopback")
    p.add_argument("--data-dir", type=Path, default=None,
                   help="persist storage under this directory")
    p.add_argument("--out", type=Path, default=None, help="CSV output path")


def _storage_endpoints(args) -> list[str]:
    raw = args.storage or os.environ.get("LEASEFS_STORAGE", "")
    endpoints = [e for e in raw.split(",") if e]
    if not endpoints:
        sys.exit("no storage endpoints: set --storage or LEASEFS_STORAGE")
    return endpoints


def _manager_endpoint(args) -> str:
    ep = args.manager or os.environ.get("LEASEFS_MANAGER", "")
    if not ep:
        sys.exit("no manager endpoint: set --manager or LEASEFS_MANAGER")
    return ep


def cmd_bench_prepare(args) -> int:
    spec = _spec_from_args(args)
    if args.transport == "tcp":
        from .storage import StorageRouter
        from .transport import RpcClient, parse_endpoint, tcp_dial

        clients = []
        for ep in _storage_endpoints(args):
            host, port = parse_endpoint(ep)
            clients.append(RpcClient(tcp_dial(host, port)))
        router = StorageRouter(clients)
        layout = bench.prepare(router, spec)
        router.close()
    else:
        from .cluster import ClusterConfig, LocalCluster

        with LocalCluster(ClusterConfig(
            nodes=spec.nodes, storage_nodes=spec.storage_nodes,
            mode=spec.mode, data_dir=args.data_dir,
        )) as cluster:
            layout = bench.prepare(cluster.storage, spec)
    shared = len(bench.shared_file_names(spec))
    print(f"created {len(layout)} files "
          f"({shared} shared, {len(layout) - shared} private)")
    return 0


def cmd_bench_run(args) -> int:
    spec = _spec_from_args(args)
    if args.transport == "tcp":
        sys.exit("tcp runs need externally prepared endpoints; "
                 "drive them with bench prepare + your own harness")
    result = bench.run(spec, data_dir=args.data_dir)
    _emit_results([result], args.out)
    mb = result.throughput_bytes_per_s / (1 << 20)
    print(f"mode={spec.mode.value} throughput={mb:.2f} MiB/s "
          f"ops={result.ops_total} mean={result.mean_latency_s * 1e6:.1f}us "
          f"p99={result.p99_latency_s * 1e6:.1f}us "
          f"round_trips={result.round_trips} aborts={result.occ_aborts} "
          f"valid={result.valid}")
    return 0 if result.valid else 1


def cmd_bench_sweep(args) -> int:
    spec = _spec_from_args(args)
    values = [int(v) for v in args.values.split(",") if v]
    cells = bench.sweep(args.axis, values, spec, runs_per_cell=args.runs,
                        data_dir=args.data_dir)
    results = [r for _, r in cells]
    axis_values = [v for v, _ in cells]
    _emit_results(results, args.out, axis=args.axis, axis_values=axis_values)
    for value, result in cells:
        mb = result.throughput_bytes_per_s / (1 << 20)
        status = "" if result.valid else f"  FAILED: {result.error}"
        print(f"{args.axis}={value:<4} mode={result.spec.mode.value:<16} "
              f"{mb:8.2f} MiB/s{status}")
    return 0


def _emit_results(results, out: Path | None, axis=None, axis_values=None) -> None:
    if out is None:
        bench.write_csv(sys.stdout, results, axis, axis_values)
    else:
        with open(out, "w", newline="") as fh:
            bench.write_csv(fh, results, axis, axis_values)
        print(f"wrote {out}")


def cmd_manager(args) -> int:
    from .manager import LeaseManager, RpcRevokeSender
    from .transport import RpcClient, RpcServer, TcpListener, parse_endpoint, tcp_dial

    sender = RpcRevokeSender()
    for item in args.node or []:
        node_s, _, endpoint = item.partition("=")
        host, port = parse_endpoint(endpoint)
        sender.register(int(node_s), RpcClient(tcp_dial(host, port)))
    manager = LeaseManager(sender)
    host, port = parse_endpoint(args.listen)
    server = RpcServer(TcpListener(host, port), manager.handle, "manager")
    print(f"lease manager listening on {args.listen}")

    def dump_and_exit(signum, frame):
        if args.dump_log:
            Path(args.dump_log).write_text(manager.dump_grant_log())
            print(f"grant log written to {args.dump_log}")
        server.close()
        sys.exit(0)

    signal.signal(signal.SIGINT, dump_and_exit)
    signal.signal(signal.SIGTERM, dump_and_exit)
    while True:
        time.sleep(1)


def cmd_storage(args) -> int:
    from .storage import StorageNode
    from .transport import RpcServer, TcpListener, parse_endpoint

    node = StorageNode(args.node_id, args.data_dir)
    host, port = parse_endpoint(args.listen)
    server = RpcServer(TcpListener(host, port), node.handle, f"storage{args.node_id}")
    print(f"storage node {args.node_id} listening on {args.listen}")

    def stop(signum, frame):
        server.close()
        node.close()
        sys.exit(0)

    signal.signal(signal.SIGINT, stop)
    signal.signal(signal.SIGTERM, stop)
    while True:
        time.sleep(1)


def cmd_check_ledger(args) -> int:
    text = Path(args.file).read_text()
    try:
        verdict = checker.check_lease_ledger(text)
    except LeaseFsError as exc:
        print(f"malformed log: {exc}")
        return 2
    if verdict.ok:
        print("Pass")
        return 0
    v = verdict.violation
    print(f"Violation at seq {v.sequence}: {v.message}")
    return 1


def cmd_scenario(args) -> int:
    from .cluster import ClusterConfig, LocalCluster

    lines = checker.parse_scenario_text(Path(args.file).read_text())
    node_indices = set()
    for thread, _, _ in lines:
        node_indices.add(int(thread.split(".", 1)[0]))
    nodes = max(node_indices) + 1 if node_indices else 1
    recorder = checker.TraceRecorder()
    config = ClusterConfig(nodes=nodes, mode=MODES[args.mode],
                           node=NodeConfig(daemon=DaemonConfig()))
    with LocalCluster(config, recorder=recorder) as cluster:
        steps = checker.bind_scenario(lines, cluster.nodes)
        outcomes = checker.run_scenario(steps, watchdog_s=args.watchdog)
        failures = [o for o in outcomes if o.error is not None]
        trace = recorder.snapshot()
        verdicts = []
        for (gfi, page), history in checker.split_by_page(trace).items():
            res = checker.check_linearizable(history)
            verdicts.append(((gfi, page), res))
        log_ok = checker.check_lease_ledger(cluster.grant_log_text())
    for (gfi, page), res in verdicts:
        state = "Pass" if res.ok else f"Violation (read on node {res.witness.node})"
        print(f"{gfi} page {page}: {state}")
    print(f"lease ledger: {'Pass' if log_ok.ok else 'Violation'}")
    for outcome in failures:
        print(f"step {outcome.step.label} failed: {outcome.error!r}")
    bad = failures or (not log_ok.ok) or any(not r.ok for _, r in verdicts)
    return 1 if bad else 0


def cmd_deadlock_demo(args) -> int:
    result = deadlock_demo(args.naive, nodes=args.nodes)
    print(result)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="leasefs", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="workload driver")
    bench_sub = p_bench.add_subparsers(dest="bench_command", required=True)

    p_prep = bench_sub.add_parser("prepare", help="create and pre-size files")
    _add_spec_flags(p_prep)
    p_prep.add_argument("--manager", default=None)
    p_prep.add_argument("--storage", default=None)
    p_prep.set_defaults(fn=cmd_bench_prepare)

    p_run = bench_sub.add_parser("run", help="run one workload")
    _add_spec_flags(p_run)
    p_run.set_defaults(fn=cmd_bench_run)

    p_sweep = bench_sub.add_parser("sweep", help="sweep one axis across modes")
    _add_spec_flags(p_sweep)
    p_sweep.add_argument("--axis", choices=sorted(bench.SWEEP_AXES), required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--runs", type=int, default=1,
                         help="runs per cell; median-throughput run reported")
    p_sweep.set_defaults(fn=cmd_bench_sweep)

    p_mgr = sub.add_parser("manager", help="serve the lease manager over TCP")
    p_mgr.add_argument("--listen", required=True, metavar="HOST:PORT")
    p_mgr.add_argument("--node", action="append", metavar="ID=HOST:PORT",
                       help="revocation endpoint of a client node (repeatable)")
    p_mgr.add_argument("--dump-log", type=Path, default=None,
                       help="write the grant log here on shutdown")
    p_mgr.set_defaults(fn=cmd_manager)

    p_st = sub.add_parser("storage", help="serve one storage node over TCP")
    p_st.add_argument("--listen", required=True, metavar="HOST:PORT")
    p_st.add_argument("--node-id", type=int, default=0)
    p_st.add_argument("--data-dir", type=Path, required=True)
    p_st.set_defaults(fn=cmd_storage)

    p_ledger = sub.add_parser("check-ledger", help="verify a grant-log dump")
    p_ledger.add_argument("file")
    p_ledger.set_defaults(fn=cmd_check_ledger)

    p_scn = sub.add_parser("scenario", help="run a scripted interleaving")
    p_scn.add_argument("file")
    p_scn.add_argument("--mode", choices=sorted(MODES), default="writeback")
    p_scn.add_argument("--watchdog", type=float, default=10.0)
    p_scn.set_defaults(fn=cmd_scenario)

    p_demo = sub.add_parser("deadlock-demo",
                            help="reproduce the reversed-lock-order hazard")
    p_demo.add_argument("--naive", action="store_true",
                        help="use the naive revocation lock order")
    p_demo.add_argument("--nodes", type=int, default=2)
    p_demo.set_defaults(fn=cmd_deadlock_demo)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
