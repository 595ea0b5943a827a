import math

import numpy as np
import pytest

from flowguard import datapath
from flowguard.bundle import DEFAULT_LOGIT_Q, make_handcrafted_bundle
from flowguard.datapath import (
    DataPlaneSwitch,
    ExitThresholds,
    FlowAction,
    InvalidThreshold,
    SwitchDecision,
    Verdict,
    classify_switch,
    precompute_thresholds,
)
from flowguard.packets import canonical_flow_key
from flowguard.protocol import ActionKind, ReportReason
from flowguard.qnn import QLogit, QuantParams
from tests.conftest import benign_stream, make_packet, syn_flood_stream

LOGIT_Q = DEFAULT_LOGIT_Q


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestThresholds:
    def test_tau_half_maps_to_zero_point(self):
        th = precompute_thresholds(0.5, 0.5, LOGIT_Q)
        assert th.t_benign_q == LOGIT_Q.zero_point
        assert th.t_attack_q == LOGIT_Q.zero_point

    def test_tau_09(self):
        th = precompute_thresholds(0.1, 0.9, LOGIT_Q)
        # ln(9)/ (10/255) = 56.03
        assert th.t_attack_q == 56
        assert th.t_benign_q == -56

    def test_rejects_bad_taus(self):
        with pytest.raises(InvalidThreshold):
            precompute_thresholds(0.9, 0.1, LOGIT_Q)
        with pytest.raises(InvalidThreshold):
            precompute_thresholds(0.0, 0.5, LOGIT_Q)
        with pytest.raises(InvalidThreshold):
            precompute_thresholds(0.5, 1.0, LOGIT_Q)

    def test_boundaries_strict(self):
        th = precompute_thresholds(0.1, 0.9, LOGIT_Q)
        assert classify_switch(QLogit(th.t_benign_q - 1, LOGIT_Q), th) is SwitchDecision.BENIGN
        assert classify_switch(QLogit(th.t_benign_q, LOGIT_Q), th) is SwitchDecision.UNCERTAIN
        assert classify_switch(QLogit(th.t_attack_q, LOGIT_Q), th) is SwitchDecision.UNCERTAIN
        assert classify_switch(QLogit(70, LOGIT_Q), th) is SwitchDecision.ATTACK

    def test_exhaustive_equivalence_with_real_rule(self):
        # over all 256 logits and tau = 0.50..0.99, the integer comparison
        # agrees with sigmoid(dequant(q)) vs tau except within one quantum
        # of the boundary
        for step in range(50):
            tau = 0.5 + step / 100.0
            th = precompute_thresholds(1.0 - tau, tau, LOGIT_Q)
            for q in range(-128, 128):
                got = classify_switch(QLogit(q, LOGIT_Q), th)
                x = LOGIT_Q.dequantize(q)
                p = sigmoid(x)
                if p < 1.0 - tau:
                    want = SwitchDecision.BENIGN
                elif p > tau:
                    want = SwitchDecision.ATTACK
                else:
                    want = SwitchDecision.UNCERTAIN
                if got != want:
                    boundary_a = math.log(tau / (1.0 - tau))
                    boundary_b = -boundary_a
                    near = min(abs(x - boundary_a), abs(x - boundary_b))
                    assert near < LOGIT_Q.scale, (tau, q, got, want)

    def test_uncertain_band_monotone_in_thresholds(self):
        taus = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]
        for lo, hi in zip(taus, taus[1:]):
            th_lo = precompute_thresholds(1 - lo, lo, LOGIT_Q)
            th_hi = precompute_thresholds(1 - hi, hi, LOGIT_Q)
            for q in range(-128, 128):
                d_lo = classify_switch(QLogit(q, LOGIT_Q), th_lo)
                d_hi = classify_switch(QLogit(q, LOGIT_Q), th_hi)
                if d_lo is SwitchDecision.UNCERTAIN:
                    assert d_hi is SwitchDecision.UNCERTAIN


class TestPipeline:
    def test_installed_drop_wins_without_inference(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        pkt = make_packet(ts=0.0)
        key = canonical_flow_key(pkt)
        sw.install_action(key, FlowAction(ActionKind.DROP, 0))
        v = sw.process_packet(pkt, 0.0)
        assert v.verdict is Verdict.DROPPED
        assert sw.table.peek(key).packet_count == 0  # model never ran

    def test_allow_ttl_countdown(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        pkt = make_packet(ts=0.0)
        key = canonical_flow_key(pkt)
        sw.install_action(key, FlowAction(ActionKind.ALLOW, 3))
        for i in range(3):
            v = sw.process_packet(make_packet(ts=0.1 * i), 0.1 * i)
            assert v.forwarded and v.decision is None
        v = sw.process_packet(make_packet(ts=0.4), 0.4)
        assert v.decision is not None  # rule expired, inference resumed
        assert sw.table.peek(key).packet_count == 1

    def test_no_report_below_ten_packets(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        # force uncertain decisions with a widened band
        sw.thresholds = ExitThresholds(0.0001, 0.9999, -128, 127)
        for i, pkt in enumerate(syn_flood_stream(n=9)):
            v = sw.process_packet(pkt, pkt.timestamp)
            assert v.report is None

    def test_uncertain_report_once_outstanding(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        sw.thresholds = ExitThresholds(0.0001, 0.9999, -128, 127)  # always uncertain
        reports = []
        for pkt in syn_flood_stream(n=30, gap=0.01):
            v = sw.process_packet(pkt, pkt.timestamp)
            if v.report:
                reports.append((v.report.reason, v.report.packet_count))
        assert reports == [(ReportReason.UNCERTAIN, 10)]

    def test_outstanding_clears_after_timeout(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        sw.thresholds = ExitThresholds(0.0001, 0.9999, -128, 127)
        reports = []
        for pkt in syn_flood_stream(n=30, gap=1.0):  # slow: 1 pkt/s
            v = sw.process_packet(pkt, pkt.timestamp)
            if v.report:
                reports.append(v.report.packet_count)
        # first at 10, then every ~6 packets once the 5 s timeout lapses
        assert reports[0] == 10
        assert len(reports) >= 3

    def test_local_attack_drop(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        dropped = 0
        for pkt in syn_flood_stream(n=30):
            v = sw.process_packet(pkt, pkt.timestamp)
            dropped += v.verdict is Verdict.DROPPED
        assert dropped >= 15  # flood is killed locally well before packet 30
        assert sw.reports_emitted == 0  # confident before the ring fills

    def test_reverify_at_500_even_when_benign(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        reports = []
        for pkt in benign_stream(n_data=400):
            v = sw.process_packet(pkt, pkt.timestamp)
            assert v.forwarded
            if v.report:
                reports.append(v.report)
        assert len(reports) == 1
        rep = reports[0]
        assert rep.reason is ReportReason.REVERIFY_500
        assert rep.packet_count == 500
        assert rep.sequence.shape == (10, 16)

    def test_notify_reescalates_every_tenth(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        pkt0 = make_packet(ts=0.0)
        key = canonical_flow_key(pkt0)
        sw.install_action(key, FlowAction(ActionKind.NOTIFY, 0))
        reports = 0
        forwarded = 0
        for i in range(40):
            v = sw.process_packet(make_packet(ts=0.01 * i, ack=True, total_len=1460), 0.01 * i)
            forwarded += v.forwarded
            reports += v.report is not None
        assert forwarded == 40  # notify keeps forwarding
        assert reports == 4  # packets 10, 20, 30, 40 (ring fills at packet 10)

    def test_install_clears_outstanding(self, handcrafted_bundle):
        sw = DataPlaneSwitch(handcrafted_bundle)
        sw.thresholds = ExitThresholds(0.0001, 0.9999, -128, 127)
        pkts = list(syn_flood_stream(n=12, gap=0.01))
        for pkt in pkts[:11]:
            sw.process_packet(pkt, pkt.timestamp)
        key = canonical_flow_key(pkts[0])
        assert sw.table.peek(key).report_outstanding
        sw.install_action(key, FlowAction(ActionKind.ALLOW, 1))
        assert not sw.table.peek(key).report_outstanding
