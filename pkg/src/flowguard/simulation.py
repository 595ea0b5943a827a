"""Discrete-event network simulator for the staged-attack scenario.

Topology (every link 1.5 Mbps / 10 ms / 32 KB drop-tail by default):

    C1 --+                      +-- C3
         S1 ======== S2
    C2 --+            +-- C4 (victim)
          \\          /
           controller

Benign upload C1 -> C4 from t = 0; a mixed flood C2 -> C4 from t = 10;
a SYN flood C3 -> C4 from t = 20.  With mitigation on, every data packet
runs the early-exit pipeline at each switch it crosses and escalation
messages ride the control links under the same link model.  With
mitigation off the pipeline is bypassed entirely (pure forwarding).

Single-threaded event loop: a heap on (time, sequence number), so runs
are bit-deterministic for a fixed scenario, seed, and bundle.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

from . import traffic
from .bundle import ModelBundle
from .controller import Controller, ControllerConfig
from .datapath import DataPlaneSwitch, FlowAction
from .packets import PacketRecord, canonical_flow_key, int_to_ip
from .protocol import ActionInstall, FeatureReport, decode, encode
from .traffic import C1, C2, C3, C4

ETH_OVERHEAD = 14
CTRL_FRAME_OVERHEAD = 54  # control messages ride a TCP-ish carrier frame

DEFAULT_BANDWIDTH = 1_500_000.0  # bits/second
DEFAULT_DELAY = 0.010  # seconds
DEFAULT_QUEUE_CAPACITY = 32_768  # bytes, drop-tail


class ScenarioInvalid(Exception):
    pass


class BundleInvalid(Exception):
    pass


@dataclass
class Scenario:
    """The staged scenario; defaults reproduce the two-switch experiment."""

    duration: float = 30.0
    mitigation: bool = True
    seed: int = 1
    bandwidth_bps: float = DEFAULT_BANDWIDTH
    delay_s: float = DEFAULT_DELAY
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY

    benign_start: float = 0.0
    benign_rate_bps: float = 2_000_000.0

    attack1_start: float = 10.0
    attack1_kind: str = "mixed"  # "mixed" or "pcap"
    attack1_pcap: Optional[str] = None
    attack1_udp_pps: float = 500.0
    attack1_udp_sources: int = 40
    attack1_syn_pps: float = 1200.0
    attack1_syn_sources: int = 60
    attack1_stealth_flows: int = 4
    attack1_stealth_pps: float = 30.0

    attack2_start: float = 20.0
    attack2_rate_pps: float = 3500.0
    attack2_sources: int = 100

    bundle_path: Optional[str] = None  # used by the CLI when --bundle is absent
    tau_benign: Optional[float] = None  # None: use the bundle's thresholds
    tau_attack: Optional[float] = None

    def validate(self) -> None:
        if self.duration < 0:
            raise ScenarioInvalid("duration must be >= 0")
        if self.bandwidth_bps <= 0 or self.delay_s < 0 or self.queue_capacity <= 0:
            raise ScenarioInvalid("bad link parameters")
        if self.attack1_kind not in ("mixed", "pcap"):
            raise ScenarioInvalid(f"unknown attack1 kind {self.attack1_kind!r}")
        if self.attack1_kind == "pcap" and not self.attack1_pcap:
            raise ScenarioInvalid("attack1.kind = pcap requires attack1.pcap")
        if (self.tau_benign is None) != (self.tau_attack is None):
            raise ScenarioInvalid("tau overrides must set both tau.benign and tau.attack")


@dataclass
class MetricsTimeline:
    """Per-second series plus whole-run totals and per-flow outcomes."""

    seconds: int
    benign_goodput_bps: list[float]
    benign_loss_pct: list[float]
    attack_delivered_pkts: list[int]
    reports_sent: list[int]
    actions_installed: list[int]
    flow_actions: dict[str, str]
    totals: dict[str, float]
    flow_conservation: dict[str, dict[str, int]]

    CSV_HEADER = "second,benign_goodput_bps,benign_loss_pct,attack_delivered_pkts,reports_sent,actions_installed"

    def rows(self):
        for s in range(self.seconds):
            yield (
                s,
                self.benign_goodput_bps[s],
                self.benign_loss_pct[s],
                self.attack_delivered_pkts[s],
                self.reports_sent[s],
                self.actions_installed[s],
            )


def write_metrics(timeline: MetricsTimeline, path) -> None:
    """CSV (one row per second) plus a JSON sidecar of per-flow actions."""
    path = str(path)
    with open(path, "w") as fh:
        fh.write(timeline.CSV_HEADER + "\n")
        for row in timeline.rows():
            fh.write(f"{row[0]},{row[1]:.1f},{row[2]:.3f},{row[3]},{row[4]},{row[5]}\n")
    sidecar = path[: path.rfind(".")] if "." in path else path
    with open(sidecar + ".flows.json", "w") as fh:
        json.dump(
            {"flow_actions": timeline.flow_actions, "totals": timeline.totals},
            fh, indent=2, sort_keys=True,
        )


class Link:
    """Unidirectional rate/delay-limited link with a drop-tail byte queue."""

    __slots__ = ("name", "bandwidth", "delay", "capacity", "sim", "deliver",
                 "next_free", "queued_bytes", "drops", "delivered", "transmissions")

    def __init__(self, name: str, sim: "Simulator", deliver: Callable,
                 bandwidth: float, delay: float, capacity: int):
        self.name = name
        self.sim = sim
        self.deliver = deliver  # called as deliver(payload, arrival_time)
        self.bandwidth = bandwidth
        self.delay = delay
        self.capacity = capacity
        self.next_free = 0.0
        self.queued_bytes = 0
        self.drops = 0
        self.delivered = 0
        self.transmissions: list[tuple[float, float, int]] = []

    def send(self, payload, size_bytes: int, now: float) -> bool:
        """Enqueue; False when the drop-tail queue rejects the packet."""
        if self.queued_bytes + size_bytes > self.capacity:
            self.drops += 1
            return False
        self.queued_bytes += size_bytes
        start = max(now, self.next_free)
        end = start + size_bytes * 8.0 / self.bandwidth
        self.next_free = end
        self.transmissions.append((start, end, size_bytes * 8))

        def finish_tx():
            self.queued_bytes -= size_bytes

        def arrive():
            self.delivered += 1
            self.deliver(payload, self.sim.now)

        self.sim.schedule(end, finish_tx)
        self.sim.schedule(end + self.delay, arrive)
        return True


@dataclass
class _FlowLedger:
    sent: int = 0
    delivered: int = 0
    dropped_queue: int = 0
    dropped_mitigation: int = 0


class Simulator:
    """Event loop wiring hosts, switches, links, and the controller."""

    def __init__(self, scenario: Scenario, bundle: Optional[ModelBundle] = None):
        scenario.validate()
        if scenario.mitigation:
            if bundle is None:
                raise BundleInvalid("mitigation requires a model bundle")
            from .bundle import ValidationFailed, validate_bundle

            try:
                validate_bundle(bundle)
            except ValidationFailed as exc:
                raise BundleInvalid(str(exc)) from exc
        self.scenario = scenario
        self.bundle = bundle
        self.now = 0.0
        self._seq = 0
        self._events: list = []
        self.ledgers: dict = {}
        self._labels: dict = {}
        self._last_report_count: dict = {}

        if scenario.mitigation:
            thresholds = None
            if scenario.tau_benign is not None and scenario.tau_attack is not None:
                from .datapath import precompute_thresholds

                thresholds = precompute_thresholds(
                    scenario.tau_benign, scenario.tau_attack, bundle.linear_exit.logit_q
                )
            self.switches = {
                "S1": DataPlaneSwitch(bundle, switch_id=1, thresholds=thresholds),
                "S2": DataPlaneSwitch(bundle, switch_id=2, thresholds=thresholds),
            }
            self.controller = Controller(bundle=bundle, cfg=ControllerConfig())
        else:
            self.switches = {}
            self.controller = None

        mk = lambda name, cb: Link(  # noqa: E731
            name, self, cb, scenario.bandwidth_bps, scenario.delay_s, scenario.queue_capacity
        )
        # data plane, both directions per segment
        self.links = {
            ("C1", "S1"): mk("C1->S1", lambda p, t: self._at_switch("S1", p, t)),
            ("C2", "S1"): mk("C2->S1", lambda p, t: self._at_switch("S1", p, t)),
            ("S1", "S2"): mk("S1->S2", lambda p, t: self._at_switch("S2", p, t)),
            ("S2", "S1"): mk("S2->S1", lambda p, t: self._at_switch("S1", p, t)),
            ("C3", "S2"): mk("C3->S2", lambda p, t: self._at_switch("S2", p, t)),
            ("C4", "S2"): mk("C4->S2", lambda p, t: self._at_switch("S2", p, t)),
            ("S1", "C1"): mk("S1->C1", lambda p, t: self._at_host("C1", p, t)),
            ("S1", "C2"): mk("S1->C2", lambda p, t: self._at_host("C2", p, t)),
            ("S2", "C3"): mk("S2->C3", lambda p, t: self._at_host("C3", p, t)),
            ("S2", "C4"): mk("S2->C4", lambda p, t: self._at_host("C4", p, t)),
            # control plane
            ("S1", "CTRL"): mk("S1->CTRL", lambda p, t: self._at_controller(p, t)),
            ("S2", "CTRL"): mk("S2->CTRL", lambda p, t: self._at_controller(p, t)),
            ("CTRL", "S1"): mk("CTRL->S1", lambda p, t: self._install_at("S1", p, t)),
            ("CTRL", "S2"): mk("CTRL->S2", lambda p, t: self._install_at("S2", p, t)),
        }
        self._host_of_ip = {C1: "C1", C2: "C2", C3: "C3", C4: "C4"}
        self._switch_of_host = {"C1": "S1", "C2": "S1", "C3": "S2", "C4": "S2"}

        horizon = int(math.ceil(scenario.duration))
        z = lambda: [0] * horizon  # noqa: E731
        self.m_goodput_bits = z()
        self.m_benign_sent = z()
        self.m_benign_delivered_by_send_sec = z()
        self.m_attack_delivered = z()
        self.m_reports = z()
        self.m_installs = z()
        self._send_sec: dict[int, int] = {}  # packet id -> send second (benign data)
        self._pkt_seq = 0

    # -- event plumbing ----------------------------------------------------

    def schedule(self, when: float, fn: Callable) -> None:
        self._seq += 1
        heapq.heappush(self._events, (when, self._seq, fn))

    def _bucket(self, t: float) -> Optional[int]:
        s = int(t)
        return s if 0 <= s < len(self.m_goodput_bits) else None

    # -- traffic injection ---------------------------------------------------

    def _ledger(self, label: str, key) -> _FlowLedger:
        led = self.ledgers.get(key)
        if led is None:
            led = self.ledgers[key] = _FlowLedger()
            self._labels[key] = label
        return led

    def inject(self, label: str, rec: PacketRecord, when: float) -> None:
        src_host = self._host_of_ip[rec.src_ip]
        key = canonical_flow_key(rec)

        def do_inject():
            led = self._ledger(label, key)
            led.sent += 1
            pkt_id = None
            if label == "benign" and rec.src_ip == C1:
                sec = self._bucket(self.now)
                self._pkt_seq += 1
                pkt_id = self._pkt_seq
                if sec is not None:
                    self.m_benign_sent[sec] += 1
                    self._send_sec[pkt_id] = sec
            link = self.links[(src_host, self._switch_of_host[src_host])]
            if not link.send((label, rec, pkt_id), rec.wire_len, self.now):
                led.dropped_queue += 1

        self.schedule(when, do_inject)

    # -- forwarding ----------------------------------------------------------

    def _next_hop(self, at: str, dst_host: str) -> tuple[str, str]:
        if at == "S1":
            return ("S1", "S2") if dst_host in ("C3", "C4") else ("S1", dst_host)
        return ("S2", "S1") if dst_host in ("C1", "C2") else ("S2", dst_host)

    def _at_switch(self, name: str, payload, t: float) -> None:
        label, rec, pkt_id = payload
        key = canonical_flow_key(rec)
        if self.scenario.mitigation:
            sw = self.switches[name]
            verdict = sw.process_packet(rec, t)
            if verdict.report is not None:
                self._emit_report(name, verdict.report, t)
            if not verdict.forwarded:
                self.ledgers[key].dropped_mitigation += 1
                return
        dst_host = self._host_of_ip[rec.dst_ip]
        link = self.links[self._next_hop(name, dst_host)]
        if not link.send(payload, rec.wire_len, self.now):
            self.ledgers[key].dropped_queue += 1

    def _at_host(self, host: str, payload, t: float) -> None:
        label, rec, pkt_id = payload
        key = canonical_flow_key(rec)
        self.ledgers[key].delivered += 1
        sec = self._bucket(t)
        if label == "benign" and host == "C4":
            if sec is not None:
                self.m_goodput_bits[sec] += rec.wire_len * 8
            if pkt_id is not None and pkt_id in self._send_sec:
                self.m_benign_delivered_by_send_sec[self._send_sec.pop(pkt_id)] += 1
        elif label != "benign" and host == "C4" and sec is not None:
            self.m_attack_delivered[sec] += 1

    # -- control plane ---------------------------------------------------------

    def _emit_report(self, switch_name: str, report: FeatureReport, t: float) -> None:
        sec = self._bucket(t)
        if sec is not None:
            self.m_reports[sec] += 1
        wire = encode(report, self.switches[switch_name].switch_id)
        link = self.links[(switch_name, "CTRL")]
        link.send(("report", wire), len(wire) + CTRL_FRAME_OVERHEAD, t)

    def _at_controller(self, payload, t: float) -> None:
        _, wire = payload
        msg, switch_id = decode(wire)
        # channel contract: reports from one switch arrive in emission order
        assert msg.packet_count >= self._last_report_count.get((switch_id, msg.flow_key), 0)
        self._last_report_count[(switch_id, msg.flow_key)] = msg.packet_count
        install = self.controller.handle_feature_report(msg)
        out = encode(install, switch_id)
        name = "S1" if switch_id == 1 else "S2"
        sec = self._bucket(t)
        if sec is not None:
            self.m_installs[sec] += 1
        self.links[("CTRL", name)].send(("install", out), len(out) + CTRL_FRAME_OVERHEAD, t)

    def _install_at(self, switch_name: str, payload, t: float) -> None:
        _, wire = payload
        msg, _ = decode(wire)
        assert isinstance(msg, ActionInstall)
        self.switches[switch_name].install_action(
            msg.flow_key, FlowAction(msg.action, msg.ttl_packets), t
        )

    # -- run -------------------------------------------------------------------

    def _build_traffic(self) -> None:
        sc = self.scenario
        if sc.duration == 0:
            return
        for t, rec in traffic.generate_benign(
            sc.benign_rate_bps, sc.duration - sc.benign_start, sc.seed, start=sc.benign_start
        ):
            self.inject("benign", rec, t)
        if sc.attack1_start < sc.duration:
            dur = sc.duration - sc.attack1_start
            if sc.attack1_kind == "pcap":
                wave = traffic.replay_attack_trace(sc.attack1_pcap, sc.attack1_start)
                wave = [(t, r) for t, r in wave if t < sc.duration]
            else:
                wave = traffic.generate_mixed_flood(
                    dur, sc.seed + 10, start=sc.attack1_start,
                    udp_pps=sc.attack1_udp_pps, udp_sources=sc.attack1_udp_sources,
                    syn_pps=sc.attack1_syn_pps, syn_sources=sc.attack1_syn_sources,
                    stealth_flows=sc.attack1_stealth_flows, stealth_pps=sc.attack1_stealth_pps,
                )
            for t, rec in wave:
                self.inject("attack1", rec, t)
        if sc.attack2_start < sc.duration:
            for t, rec in traffic.generate_syn_flood(
                sc.attack2_rate_pps, sc.attack2_sources,
                sc.duration - sc.attack2_start, sc.seed + 20, start=sc.attack2_start,
            ):
                self.inject("attack2", rec, t)

    def run(self) -> MetricsTimeline:
        self._build_traffic()
        while self._events:
            when, _, fn = heapq.heappop(self._events)
            self.now = when
            fn()

        horizon = int(math.ceil(self.scenario.duration))
        loss = []
        for s in range(horizon):
            sent = self.m_benign_sent[s]
            got = self.m_benign_delivered_by_send_sec[s]
            loss.append(100.0 * (sent - got) / sent if sent else 0.0)

        flow_actions = {}
        for name, sw in self.switches.items():
            for entry in sw.table.entries():
                if entry.installed_action is not None:
                    k = entry.key
                    label = f"{int_to_ip(k.ip_a)}:{k.port_a}-{int_to_ip(k.ip_b)}:{k.port_b}/{k.protocol}"
                    flow_actions[f"{name} {label}"] = entry.installed_action.name

        totals = {
            "benign_sent": float(sum(self.m_benign_sent)),
            "reports_sent": float(sum(self.m_reports)),
            "actions_installed": float(sum(self.m_installs)),
            "mitigation_drops": float(
                sum(l.dropped_mitigation for l in self.ledgers.values())
            ),
            "queue_drops": float(sum(l.dropped_queue for l in self.ledgers.values())),
        }
        conservation = {
            str(k): {
                "sent": led.sent,
                "delivered": led.delivered,
                "dropped_queue": led.dropped_queue,
                "dropped_mitigation": led.dropped_mitigation,
            }
            for k, led in self.ledgers.items()
        }
        return MetricsTimeline(
            seconds=horizon,
            benign_goodput_bps=[float(b) for b in self.m_goodput_bits],
            benign_loss_pct=loss,
            attack_delivered_pkts=list(self.m_attack_delivered),
            reports_sent=list(self.m_reports),
            actions_installed=list(self.m_installs),
            flow_actions=flow_actions,
            totals=totals,
            flow_conservation=conservation,
        )


def run_scenario(scenario: Scenario, bundle: Optional[ModelBundle] = None) -> MetricsTimeline:
    return Simulator(scenario, bundle).run()


# Scenario config files are flat `key = value` text; `#` starts a comment.
_SCENARIO_KEYS = {
    "duration": ("duration", float),
    "seed": ("seed", int),
    "mitigation": ("mitigation", lambda v: v.lower() in ("on", "true", "1", "yes")),
    "link.bandwidth_bps": ("bandwidth_bps", float),
    "link.delay_s": ("delay_s", float),
    "link.queue_bytes": ("queue_capacity", int),
    "benign.start": ("benign_start", float),
    "benign.rate_bps": ("benign_rate_bps", float),
    "attack1.start": ("attack1_start", float),
    "attack1.kind": ("attack1_kind", str),
    "attack1.pcap": ("attack1_pcap", str),
    "attack1.udp_pps": ("attack1_udp_pps", float),
    "attack1.udp_sources": ("attack1_udp_sources", int),
    "attack1.syn_pps": ("attack1_syn_pps", float),
    "attack1.syn_sources": ("attack1_syn_sources", int),
    "attack1.stealth_flows": ("attack1_stealth_flows", int),
    "attack1.stealth_pps": ("attack1_stealth_pps", float),
    "attack2.start": ("attack2_start", float),
    "attack2.rate_pps": ("attack2_rate_pps", float),
    "attack2.sources": ("attack2_sources", int),
    "bundle": ("bundle_path", str),
    "tau.benign": ("tau_benign", float),
    "tau.attack": ("tau_attack", float),
}


def scenario_from_file(path) -> Scenario:
    sc = Scenario()
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#")[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ScenarioInvalid(f"{path}:{ln}: expected `key = value`")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _SCENARIO_KEYS:
                raise ScenarioInvalid(f"{path}:{ln}: unknown key {key!r}")
            attr, conv = _SCENARIO_KEYS[key]
            try:
                setattr(sc, attr, conv(value))
            except ValueError as exc:
                raise ScenarioInvalid(f"{path}:{ln}: bad value for {key}: {exc}") from exc
    sc.validate()
    return sc
