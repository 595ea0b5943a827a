"""Operator entry points: simulate, eval, bundle tools, live daemons."""

from __future__ import annotations

import argparse
import logging
import statistics
import sys

import numpy as np

from . import bundle as bundle_mod
from . import evaluate, simulation
from .flow import FEATURE_NAMES


def _load_bundle(path):
    return bundle_mod.load_bundle(path)


def cmd_simulate(args) -> int:
    if args.scenario:
        scenario = simulation.scenario_from_file(args.scenario)
    else:
        scenario = simulation.Scenario()
    if args.duration is not None:
        scenario.duration = args.duration
    if args.seed is not None:
        scenario.seed = args.seed
    if args.mitigation is not None:
        scenario.mitigation = args.mitigation == "on"
    if args.tau_benign is not None:
        scenario.tau_benign = args.tau_benign
    if args.tau_attack is not None:
        scenario.tau_attack = args.tau_attack
    bundle = None
    if scenario.mitigation:
        bundle_path = args.bundle or scenario.bundle_path
        if not bundle_path:
            print("simulate: mitigation is on but no bundle given", file=sys.stderr)
            return 1
        bundle = _load_bundle(bundle_path)
    timeline = simulation.run_scenario(scenario, bundle)
    simulation.write_metrics(timeline, args.out)
    goodput = timeline.benign_goodput_bps
    if len(goodput) >= 10:
        base = statistics.mean(goodput[2:10])
        print(f"benign goodput, mean t=[2,10): {base / 1e6:.3f} Mbps")
        if len(goodput) >= 30:
            attacked = statistics.mean(goodput[12:30])
            print(f"benign goodput, mean t=[12,30): {attacked / 1e6:.3f} Mbps"
                  f" ({100 * attacked / base:.1f}% of baseline)")
    print(f"reports sent: {sum(timeline.reports_sent)}, "
          f"actions installed: {sum(timeline.actions_installed)}")
    print(f"metrics written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    bundle = _load_bundle(args.bundle)
    taus = [float(t) for t in args.taus.split(",")] if args.taus else list(evaluate.DEFAULT_TAUS)
    rows = evaluate.evaluate_pcap(args.pcap, args.labels, bundle, taus)
    evaluate.write_sweep_csv(rows, args.out)
    print(evaluate.SweepRow.CSV_HEADER)
    for row in rows:
        print(row.csv())
    print(f"sweep written to {args.out}")
    return 0


def cmd_inspect_bundle(args) -> int:
    b = _load_bundle(args.bundle)
    th = b.thresholds
    print(f"EEP4 bundle: {args.bundle}")
    print(f"  scalers: {len(FEATURE_NAMES)} features")
    for i, name in enumerate(FEATURE_NAMES):
        lo, hi = b.scaler.mins[i], b.scaler.maxs[i]
        print(f"    {i + 1:2d} {name:<22s} min={lo:g} max={hi:g}")
    c = b.conv
    print(f"  conv: 16 filters x kernel 3, int8; in scale={c.in_q.scale:g} zp={c.in_q.zero_point}"
          f"; out scale={c.out_q.scale:g} zp={c.out_q.zero_point}"
          f"; requant {c.requant.mantissa}>>{31 + c.requant.right_shift}")
    le = b.linear_exit
    print(f"  linear_exit: 16 -> 1, int8; logit scale={le.logit_q.scale:g} zp={le.logit_q.zero_point}")
    print(f"  map_q: scale={b.map_q.scale:g} zp={b.map_q.zero_point}")
    print(f"  thresholds: tau_benign={th.tau_benign:g} tau_attack={th.tau_attack:g} "
          f"t_benign_q={th.t_benign_q} t_attack_q={th.t_attack_q}")
    print("  gru: input 16, hidden 64, float32")
    print("  head: 64 -> 32 -> 1, float32")
    if b.metadata:
        print("  metadata:")
        for k in sorted(b.metadata):
            print(f"    {k} = {b.metadata[k]}")
    return 0


def cmd_make_test_bundle(args) -> int:
    b = bundle_mod.make_handcrafted_bundle(tau=args.tau)
    bundle_mod.save_bundle(b, args.out)
    print(f"hand-crafted bundle written to {args.out}")
    return 0


def cmd_switchd(args) -> int:
    from . import traffic
    from .daemons import SwitchDaemon
    from .packets import read_trace

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    b = _load_bundle(args.bundle)
    addr = None
    if args.controller:
        host, _, port = args.controller.rpartition(":")
        addr = (host or "127.0.0.1", int(port))
    daemon = SwitchDaemon(b, addr, switch_id=args.switch_id)
    if addr is not None:
        daemon.connect()
    if args.pcap:
        packets = read_trace(args.pcap)
    elif args.traffic == "benign":
        packets = (rec for _, rec in traffic.generate_benign(2e6, args.duration, args.seed))
    elif args.traffic == "syn-flood":
        packets = (rec for _, rec in traffic.generate_syn_flood(1000.0, 50, args.duration, args.seed))
    else:
        packets = (rec for _, rec in traffic.generate_mixed_flood(args.duration, args.seed))
    stats = daemon.process(packets)
    # give in-flight installs a moment before reporting
    import time as _time

    _time.sleep(args.linger)
    daemon.close()
    print(f"processed={stats['processed']} forwarded={stats['forwarded']} "
          f"dropped={stats['dropped']} reports={stats['reports']} "
          f"installs={daemon.stats['installs']}")
    return 0


def cmd_controllerd(args) -> int:
    from .daemons import ControllerDaemon

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    b = _load_bundle(args.bundle)
    host, _, port = args.listen.rpartition(":")
    daemon = ControllerDaemon(b, host or "127.0.0.1", int(port))
    print(f"controller listening on {daemon.address[0]}:{daemon.address[1]}")
    try:
        daemon.serve_forever(max_reports=args.max_reports)
    except KeyboardInterrupt:
        daemon.shutdown()
    print(f"reports handled: {daemon.reports_seen}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowguard",
                                description="Split early-exit DDoS detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the staged-attack simulation")
    sim.add_argument("--scenario", help="scenario config file (key = value lines)")
    sim.add_argument("--bundle", help="EEP4 model bundle (required when mitigation is on)")
    sim.add_argument("--mitigation", choices=["on", "off"], default=None)
    sim.add_argument("--duration", type=float, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--tau-benign", type=float, default=None)
    sim.add_argument("--tau-attack", type=float, default=None)
    sim.add_argument("--out", default="metrics.csv")
    sim.set_defaults(fn=cmd_simulate)

    ev = sub.add_parser("eval", help="threshold sweep over a labeled pcap")
    ev.add_argument("--pcap", required=True)
    ev.add_argument("--labels", required=True)
    ev.add_argument("--bundle", required=True)
    ev.add_argument("--taus", help="comma-separated sweep, default 0.5,0.7,0.9,0.95,0.99")
    ev.add_argument("--out", default="sweep.csv")
    ev.set_defaults(fn=cmd_eval)

    ins = sub.add_parser("inspect-bundle", help="print a validated bundle summary")
    ins.add_argument("bundle")
    ins.set_defaults(fn=cmd_inspect_bundle)

    mk = sub.add_parser("make-test-bundle", help="write the hand-crafted test bundle")
    mk.add_argument("out")
    mk.add_argument("--tau", type=float, default=0.9)
    mk.set_defaults(fn=cmd_make_test_bundle)

    swd = sub.add_parser("switchd", help="run the data-plane pipeline over a socket")
    swd.add_argument("--bundle", required=True)
    swd.add_argument("--controller", help="controller address host:port")
    swd.add_argument("--switch-id", type=int, default=1)
    swd.add_argument("--pcap")
    swd.add_argument("--traffic", choices=["benign", "syn-flood", "mixed"], default="benign")
    swd.add_argument("--duration", type=float, default=10.0)
    swd.add_argument("--seed", type=int, default=1)
    swd.add_argument("--linger", type=float, default=0.5,
                     help="seconds to wait for in-flight installs before exiting")
    swd.set_defaults(fn=cmd_switchd)

    ctd = sub.add_parser("controllerd", help="serve GRU inference to switches")
    ctd.add_argument("--bundle", required=True)
    ctd.add_argument("--listen", default="127.0.0.1:9099")
    ctd.add_argument("--max-reports", type=int, default=None,
                     help="exit after this many reports (testing)")
    ctd.set_defaults(fn=cmd_controllerd)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (bundle_mod.BundleError, simulation.ScenarioInvalid, simulation.BundleInvalid,
            evaluate.LabelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # trace/socket errors: report, nonzero exit
        from .packets import TraceError

        if isinstance(exc, (TraceError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
