"""Offline evaluation: stream a labeled trace through the split pipeline
for a sweep of confidence thresholds, measuring per-exit quality and the
switch/controller exit split.

Per flow, the journey ends at the switch if a confident local decision
(Benign/Attack) lands before any escalation; otherwise the flow exits at
the controller with the GRU's verdict.  A switch exit only counts from
the tenth packet on, mirroring the ten-map history the escalation path
requires (the first packets of any TCP flow look alike).  The sweep uses
the symmetric convention tau = tau_attack = 1 - tau_benign.
"""

from __future__ import annotations

from dataclasses import dataclass

from .bundle import ModelBundle
from .controller import Controller, ControllerConfig
from .datapath import DataPlaneSwitch, SwitchDecision, precompute_thresholds
from .packets import FlowKey, canonical_flow_key, ip_to_int, read_trace
from .protocol import ActionKind

DEFAULT_TAUS = (0.5, 0.7, 0.9, 0.95, 0.99)


class LabelError(Exception):
    pass


def parse_label_file(path) -> dict[FlowKey, str]:
    """One flow per line: `ip_a:port_a ip_b:port_b protocol label`, the
    endpoint pair in canonical order, label benign|attack."""
    labels: dict[FlowKey, str] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise LabelError(f"{path}:{ln}: expected 4 fields, got {len(parts)}")
            a, b, proto, label = parts
            if label not in ("benign", "attack"):
                raise LabelError(f"{path}:{ln}: label must be benign|attack")
            ip_a, port_a = a.rsplit(":", 1)
            ip_b, port_b = b.rsplit(":", 1)
            key = FlowKey(
                ip_a=ip_to_int(ip_a), port_a=int(port_a),
                ip_b=ip_to_int(ip_b), port_b=int(port_b), protocol=int(proto),
            )
            labels[key] = label
    return labels


def format_label_line(key: FlowKey, label: str) -> str:
    from .packets import int_to_ip

    return f"{int_to_ip(key.ip_a)}:{key.port_a} {int_to_ip(key.ip_b)}:{key.port_b} {key.protocol} {label}"


@dataclass
class ExitStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, predicted_attack: bool, is_attack: bool) -> None:
        if predicted_attack and is_attack:
            self.tp += 1
        elif predicted_attack:
            self.fp += 1
        elif is_attack:
            self.fn += 1
        else:
            self.tn += 1

    @property
    def count(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class SweepRow:
    tau: float
    switch_exit_ratio: float
    controller_exit_ratio: float
    switch: ExitStats
    controller: ExitStats

    CSV_HEADER = (
        "tau,switch_exit_ratio,controller_exit_ratio,"
        "switch_precision,switch_recall,switch_f1,"
        "controller_precision,controller_recall,controller_f1"
    )

    def csv(self) -> str:
        return (
            f"{self.tau},{self.switch_exit_ratio:.4f},{self.controller_exit_ratio:.4f},"
            f"{self.switch.precision:.4f},{self.switch.recall:.4f},{self.switch.f1:.4f},"
            f"{self.controller.precision:.4f},{self.controller.recall:.4f},{self.controller.f1:.4f}"
        )


def evaluate_trace(packets, labels: dict[FlowKey, str], bundle: ModelBundle,
                   taus=DEFAULT_TAUS, min_packets: int = 10) -> list[SweepRow]:
    """Run the split pipeline once per threshold over the packet list."""
    packets = list(packets)
    rows = []
    for tau in taus:
        thresholds = precompute_thresholds(1.0 - tau, tau, bundle.linear_exit.logit_q)
        sw = DataPlaneSwitch(bundle, thresholds=thresholds)
        ctl = Controller(
            bundle=bundle,
            cfg=ControllerConfig(tau_benign=1.0 - tau if tau < 1.0 else 0.5, tau_attack=tau),
        )
        exit_point: dict[FlowKey, str] = {}
        verdict_of: dict[FlowKey, bool] = {}
        for rec in packets:
            key = canonical_flow_key(rec)
            if key in exit_point:
                continue  # journey already decided under this threshold
            v = sw.process_packet(rec, rec.timestamp)
            if v.report is not None:
                install = ctl.handle_feature_report(v.report)
                if install.action is not ActionKind.NOTIFY:
                    exit_point[key] = "controller"
                    verdict_of[key] = install.action is ActionKind.DROP
                    continue
            entry = sw.table.peek(key)
            if entry is None or entry.packet_count < min_packets:
                continue
            if v.decision is SwitchDecision.BENIGN:
                exit_point[key] = "switch"
                verdict_of[key] = False
            elif v.decision is SwitchDecision.ATTACK:
                exit_point[key] = "switch"
                verdict_of[key] = True

        switch_stats, ctl_stats = ExitStats(), ExitStats()
        n_switch = n_ctl = 0
        for key, label in labels.items():
            is_attack = label == "attack"
            where = exit_point.get(key)
            if where == "switch":
                n_switch += 1
                switch_stats.add(verdict_of[key], is_attack)
            elif where == "controller":
                n_ctl += 1
                ctl_stats.add(verdict_of[key], is_attack)
            else:
                # never confidently decided anywhere: counts as a controller
                # exit, resolved against the uncertain midpoint
                n_ctl += 1
                ctl_stats.add(False, is_attack)
        total = n_switch + n_ctl
        rows.append(
            SweepRow(
                tau=tau,
                switch_exit_ratio=n_switch / total if total else 0.0,
                controller_exit_ratio=n_ctl / total if total else 0.0,
                switch=switch_stats,
                controller=ctl_stats,
            )
        )
    return rows


def evaluate_pcap(pcap_path, label_path, bundle: ModelBundle, taus=DEFAULT_TAUS) -> list[SweepRow]:
    labels = parse_label_file(label_path)
    return evaluate_trace(read_trace(pcap_path), labels, bundle, taus)


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w") as fh:
        fh.write(SweepRow.CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")
