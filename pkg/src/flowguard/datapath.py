"""The emulated data-plane pipeline: feature extraction, quantized CNN,
integer early-exit decision, local mitigation, escalation.

Per packet, in order of precedence:
  1. an installed Drop/Allow rule governs the packet outright (no model),
     consuming one TTL tick; once the TTL is spent the rule is removed and
     the packet re-enters inference;
  2. otherwise the packet flows through update -> quantize -> conv ->
     maxpool -> ring push -> linear exit -> threshold compare;
  3. Attack verdicts drop locally; Uncertain verdicts forward and, when a
     full 10-map sequence exists and none is outstanding, escalate;
  4. the 500th processed packet triggers a re-verification report no
     matter what the local decision was;
  5. under an installed Notify rule packets keep forwarding and every
     10th one re-escalates until the controller replaces the rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import flow, qnn
from .packets import FlowKey, PacketRecord, canonical_flow_key
from .protocol import ActionKind, FeatureReport, ReportReason
from .qnn import QLogit, QuantParams

REVERIFY_PACKET_COUNT = 500
NOTIFY_REESCALATE_EVERY = 10
REPORT_TIMEOUT = 5.0  # seconds an unanswered report blocks re-escalation


class ThresholdError(Exception):
    pass


class InvalidThreshold(ThresholdError):
    pass


class SwitchDecision(Enum):
    BENIGN = "benign"
    ATTACK = "attack"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class FlowAction:
    kind: ActionKind
    ttl_packets: int = 0  # 0 = permanent


@dataclass(frozen=True)
class ExitThresholds:
    """Confidence thresholds in probability and integer-logit domains."""

    tau_benign: float
    tau_attack: float
    t_benign_q: int
    t_attack_q: int


def precompute_thresholds(tau_benign: float, tau_attack: float, logit_q: QuantParams) -> ExitThresholds:
    """Map probability thresholds into the shared quantized-logit domain.

    Offline path: real arithmetic is allowed here, never at packet time.
    t_q = clamp(round(ln(tau / (1 - tau)) / scale) + zero_point, -128, 127).
    """
    for tau in (tau_benign, tau_attack):
        if not 0.0 < tau < 1.0:
            raise InvalidThreshold(f"tau {tau} outside (0, 1)")
    if tau_benign > tau_attack:
        raise InvalidThreshold(f"tau_benign {tau_benign} > tau_attack {tau_attack}")

    def to_q(tau: float) -> int:
        logit = math.log(tau / (1.0 - tau))
        return max(-128, min(127, round(logit / logit_q.scale) + logit_q.zero_point))

    return ExitThresholds(
        tau_benign=tau_benign,
        tau_attack=tau_attack,
        t_benign_q=to_q(tau_benign),
        t_attack_q=to_q(tau_attack),
    )


def classify_switch(logit: QLogit, th: ExitThresholds) -> SwitchDecision:
    """Integer-only early-exit decision; values on a threshold stay uncertain."""
    if logit.q < th.t_benign_q:
        return SwitchDecision.BENIGN
    if logit.q > th.t_attack_q:
        return SwitchDecision.ATTACK
    return SwitchDecision.UNCERTAIN


class Verdict(Enum):
    FORWARD = "forward"
    DROPPED = "dropped"


@dataclass(frozen=True)
class PacketVerdict:
    verdict: Verdict
    report: Optional[FeatureReport] = None
    decision: Optional[SwitchDecision] = None

    @property
    def forwarded(self) -> bool:
        return self.verdict is Verdict.FORWARD


class PreparedInference:
    """Hot-path copy of quantize -> conv -> maxpool -> linear with every
    tensor conversion hoisted out of the per-packet loop.

    Bit-identical to the reference chain (flow.quantize_features,
    qnn.qconv1d_relu, qnn.global_maxpool, qnn.qlinear_logit); the parity
    test in the suite holds it to that.
    """

    def __init__(self, scaler: flow.FeatureScaler, conv: qnn.QConvLayer, linear: qnn.QLinearExit):
        span = scaler.maxs - scaler.mins
        self._mins = scaler.mins.copy()
        self._inv = np.where(span > 0, 127.0 / np.where(span > 0, span, 1.0), 0.0)
        self._w = conv.weights.astype(np.int64)  # (16, 3)
        self._bias = conv.bias.astype(np.int64)
        self._in_zp = conv.in_q.zero_point
        self._out_zp = conv.out_q.zero_point
        self._c_mant = np.int64(conv.requant.mantissa)
        self._c_shift = 31 + conv.requant.right_shift
        self._lw = linear.weights.astype(np.int64)
        self._lbias = linear.bias
        self._lin_zp = linear.in_q.zero_point
        self._logit_zp = linear.logit_q.zero_point
        self._l_mant = linear.requant.mantissa
        self._l_shift = 31 + linear.requant.right_shift
        self._logit_q = linear.logit_q
        self._padded = np.zeros(flow.NUM_FEATURES + 2, dtype=np.int64)

    def forward(self, features: np.ndarray) -> tuple[np.ndarray, QLogit]:
        q = np.floor((features - self._mins) * self._inv)
        np.clip(q, 0, 127, out=q)
        p = self._padded
        p[0] = p[-1] = 0
        p[1:-1] = q
        p[1:-1] -= self._in_zp
        acc = (
            np.outer(p[:-2], self._w[:, 0])
            + np.outer(p[1:-1], self._w[:, 1])
            + np.outer(p[2:], self._w[:, 2])
            + self._bias
        )  # (28, 16)
        prod = acc * self._c_mant
        sh = self._c_shift
        half = np.int64(1) << (sh - 1)
        out = prod >> sh
        r = prod - (out << sh)
        out += ((r > half) | ((r == half) & ((out & 1) == 1))).astype(np.int64)
        out += self._out_zp
        np.clip(out, self._out_zp, 255, out=out)
        pooled = out.max(axis=0) - 128  # int64 (16,)
        acc_l = int(np.dot(pooled - self._lin_zp, self._lw)) + self._lbias
        prod_l = acc_l * self._l_mant
        sh = self._l_shift
        ql = prod_l >> sh
        rem = prod_l - (ql << sh)
        half = 1 << (sh - 1)
        if rem > half or (rem == half and (ql & 1)):
            ql += 1
        ql += self._logit_zp
        ql = max(-128, min(127, ql))
        return pooled.astype(np.int8), QLogit(q=int(ql), qparams=self._logit_q)


class DataPlaneSwitch:
    """One emulated switch: flow table plus the loaded model tensors.

    Single packet-processing context per switch; emitted reports are
    returned to the caller, which owns delivery ordering.
    """

    def __init__(self, bundle, switch_id: int = 0, thresholds: Optional[ExitThresholds] = None,
                 table_capacity: int = flow.DEFAULT_TABLE_CAPACITY):
        self.bundle = bundle
        self.switch_id = switch_id
        self.thresholds = thresholds if thresholds is not None else bundle.thresholds
        self.table = flow.FlowTable(capacity=table_capacity)
        self.scaler = bundle.scaler
        self.conv = bundle.conv
        self.linear = bundle.linear_exit
        self.map_q = bundle.map_q
        self._prepared = PreparedInference(self.scaler, self.conv, self.linear)
        self.reports_emitted = 0
        self.local_drops = 0

    def install_action(self, key: FlowKey, action: FlowAction, now: float = 0.0) -> None:
        """Install a controller action; creates the flow entry if absent."""
        entry = self.table.get_or_create(key, now)
        entry.installed_action = action.kind
        # None marks a permanent rule; an int counts remaining governed packets.
        entry.ttl_remaining = None if action.ttl_packets == 0 else action.ttl_packets
        entry.report_outstanding = False
        entry.notify_pkts = 0

    def process_packet(self, pkt: PacketRecord, now: float) -> PacketVerdict:
        key = canonical_flow_key(pkt)
        entry = self.table.get_or_create(key, now)

        rule = entry.installed_action
        if rule is ActionKind.DROP or rule is ActionKind.ALLOW:
            if self._rule_governs(entry):
                if rule is ActionKind.DROP:
                    self.local_drops += 1
                    return PacketVerdict(Verdict.DROPPED)
                return PacketVerdict(Verdict.FORWARD)
            entry.installed_action = None  # TTL spent: re-enter inference

        logit, decision = self._infer(entry, pkt)

        if entry.report_outstanding and now - entry.report_sent_at > REPORT_TIMEOUT:
            entry.report_outstanding = False

        report = None
        if entry.installed_action is ActionKind.NOTIFY:
            verdict = Verdict.FORWARD  # controller owns the call; keep forwarding
            entry.notify_pkts += 1
            if entry.notify_pkts % NOTIFY_REESCALATE_EVERY == 0 and entry.map_fill == flow.RING_SLOTS:
                report = self._make_report(entry, ReportReason.PERIODIC, logit.q, now)
        elif decision is SwitchDecision.ATTACK:
            verdict = Verdict.DROPPED  # local mitigation, no controller round-trip
            self.local_drops += 1
        else:
            verdict = Verdict.FORWARD
            if (
                decision is SwitchDecision.UNCERTAIN
                and entry.map_fill == flow.RING_SLOTS
                and not entry.report_outstanding
            ):
                report = self._make_report(entry, ReportReason.UNCERTAIN, logit.q, now)

        # Re-verification fires at exactly 500 processed packets, regardless
        # of the local decision (but still needs a full sequence).
        if (
            entry.packet_count == REVERIFY_PACKET_COUNT
            and report is None
            and entry.map_fill == flow.RING_SLOTS
        ):
            report = self._make_report(entry, ReportReason.REVERIFY_500, logit.q, now)

        return PacketVerdict(verdict, report=report, decision=decision)

    def _rule_governs(self, entry: flow.FlowEntry) -> bool:
        """Consume one TTL tick; True while the installed rule still applies."""
        if entry.ttl_remaining is None:
            return True
        if entry.ttl_remaining > 0:
            entry.ttl_remaining -= 1
            return True
        return False

    def _infer(self, entry: flow.FlowEntry, pkt: PacketRecord) -> tuple[QLogit, SwitchDecision]:
        features = flow.update_flow(entry, pkt)
        pooled, logit = self._prepared.forward(features)
        flow.push_feature_map(entry, pooled)
        return logit, classify_switch(logit, self.thresholds)

    def _make_report(self, entry: flow.FlowEntry, reason: ReportReason, logit_q: int,
                     now: float) -> FeatureReport:
        entry.report_outstanding = True
        entry.report_sent_at = now
        self.reports_emitted += 1
        return FeatureReport(
            flow_key=entry.key,
            packet_count=entry.packet_count,
            reason=reason,
            sequence=flow.snapshot_sequence(entry),
            switch_logit=logit_q,
        )
