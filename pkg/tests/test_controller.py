import numpy as np
import pytest

from flowguard.controller import (
    ClassifierHead,
    Controller,
    ControllerConfig,
    GruWeights,
    MalformedReport,
    ShapeMismatch,
    controller_classify,
    decide_action,
    dequantize_sequence,
    gru_forward,
)
from flowguard.packets import FlowKey
from flowguard.protocol import ActionInstall, ActionKind, FeatureReport, ReportReason
from flowguard.qnn import QuantParams


def zero_gru():
    z = lambda *s: np.zeros(s)  # noqa: E731
    return GruWeights(
        w_z=z(64, 16), w_r=z(64, 16), w_n=z(64, 16),
        u_z=z(64, 64), u_r=z(64, 64), u_n=z(64, 64),
        b_iz=z(64), b_ir=z(64), b_in=z(64),
        b_hz=z(64), b_hr=z(64), b_hn=z(64),
    )


def zero_head():
    return ClassifierHead(
        dense1_w=np.zeros((32, 64)), dense1_b=np.zeros(32),
        dense2_w=np.zeros((1, 32)), dense2_b=np.zeros(1),
    )


def head_oracle(h, head):
    """Independent matrix-arithmetic check (einsum path, no shared code)."""
    hidden = np.einsum("ij,j->i", head.dense1_w, h) + head.dense1_b
    hidden[hidden < 0] = 0.0
    logit = np.einsum("ij,j->i", head.dense2_w, hidden)[0] + head.dense2_b[0]
    return 1.0 / (1.0 + np.exp(-logit))


class TestDequantize:
    def test_zero_point_maps_to_zero(self):
        q = QuantParams(scale=0.3, zero_point=-7)
        seq = np.full((10, 16), -7, dtype=np.int8)
        assert np.all(dequantize_sequence(seq, q) == 0.0)

    def test_affine(self):
        q = QuantParams(scale=0.1, zero_point=0)
        seq = np.zeros((10, 16), dtype=np.int8)
        seq[0, 0] = 50
        assert dequantize_sequence(seq, q)[0, 0] == pytest.approx(5.0)

    def test_round_trip_exhaustive(self):
        q = QuantParams(scale=0.05, zero_point=3)
        for v in range(-128, 128):
            seq = np.full((10, 16), v, dtype=np.int8)
            real = dequantize_sequence(seq, q)
            back = np.clip(np.round(real / q.scale) + q.zero_point, -128, 127)
            assert np.all(back == v)


class TestGru:
    def test_zero_weights_fixed_point(self):
        h = gru_forward(np.random.default_rng(0).random((10, 16)), zero_gru())
        assert np.all(h == 0.0)

    def test_scalar_hand_computation(self):
        # 1 step with a single live lane: z = sigmoid(0.5), r = sigmoid(0.25),
        # n = tanh(0.8*x + r*0.3), h = (1-z)*n -- checked by hand below
        w = zero_gru()
        w.w_z[0, 0] = 0.0
        w.b_iz[0] = 0.2
        w.b_hz[0] = 0.3
        w.b_ir[0] = 0.25
        w.w_n[0, 0] = 0.8
        w.b_hn[0] = 0.3
        x = np.zeros((1, 16))
        x[0, 0] = 1.5
        h = gru_forward(x, w)
        z = 1 / (1 + np.exp(-0.5))
        r = 1 / (1 + np.exp(-0.25))
        n = np.tanh(0.8 * 1.5 + r * 0.3)
        assert h[0] == pytest.approx((1 - z) * n, abs=1e-12)
        assert np.all(h[1:] == 0.0)

    def test_order_sensitivity(self):
        rng = np.random.default_rng(42)
        w = GruWeights(
            w_z=rng.standard_normal((64, 16)) * 0.3,
            w_r=rng.standard_normal((64, 16)) * 0.3,
            w_n=rng.standard_normal((64, 16)) * 0.3,
            u_z=rng.standard_normal((64, 64)) * 0.2,
            u_r=rng.standard_normal((64, 64)) * 0.2,
            u_n=rng.standard_normal((64, 64)) * 0.2,
            b_iz=rng.standard_normal(64) * 0.1,
            b_ir=rng.standard_normal(64) * 0.1,
            b_in=rng.standard_normal(64) * 0.1,
            b_hz=rng.standard_normal(64) * 0.1,
            b_hr=rng.standard_normal(64) * 0.1,
            b_hn=rng.standard_normal(64) * 0.1,
        )
        x = rng.standard_normal((10, 16))
        h1 = gru_forward(x, w)
        h2 = gru_forward(x[::-1], w)
        assert not np.allclose(h1, h2)

    def test_outputs_bounded(self):
        # exact arithmetic keeps h in (-1, 1); float64 tanh saturates to
        # exactly 1.0 for huge arguments, so assert the closed bound plus
        # strictness whenever saturation cannot occur
        rng = np.random.default_rng(1)
        for scale in (0.2, 1.0, 5.0):
            w = GruWeights(
                *(rng.standard_normal(s) * scale for s in
                  [(64, 16)] * 3 + [(64, 64)] * 3 + [(64,)] * 6)
            )
            h = gru_forward(rng.standard_normal((10, 16)), w)
            assert np.all(np.abs(h) <= 1.0)
            if scale <= 0.2:
                assert np.all(np.abs(h) < 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            gru_forward(np.zeros((10, 15)), zero_gru())


class TestHead:
    def test_zero_weights_give_half(self):
        p = controller_classify(np.zeros(64), zero_head())
        assert p == 0.5

    def test_bias_dominates(self):
        head = zero_head()
        head.dense2_b[0] = 10.0
        p = controller_classify(np.random.default_rng(0).random(64), head)
        assert p == pytest.approx(1 / (1 + np.exp(-10.0)))

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            head = ClassifierHead(
                dense1_w=rng.standard_normal((32, 64)),
                dense1_b=rng.standard_normal(32),
                dense2_w=rng.standard_normal((1, 32)),
                dense2_b=rng.standard_normal(1),
            )
            h = rng.standard_normal(64)
            assert controller_classify(h, head) == pytest.approx(head_oracle(h, head))


class TestDecide:
    CFG = ControllerConfig(tau_benign=0.1, tau_attack=0.9, reverify_period_packets=2000)

    def test_allow(self):
        a = decide_action(0.01, self.CFG)
        assert a.kind is ActionKind.ALLOW
        assert a.ttl_packets == 2000

    def test_drop(self):
        a = decide_action(0.95, self.CFG)
        assert a.kind is ActionKind.DROP

    def test_notify_band(self):
        a = decide_action(0.5, self.CFG)
        assert a.kind is ActionKind.NOTIFY
        assert a.ttl_packets == 0

    def test_monotone(self):
        order = {ActionKind.ALLOW: 0, ActionKind.NOTIFY: 1, ActionKind.DROP: 2}
        prev = -1
        for p in np.linspace(0.001, 0.999, 200):
            rank = order[decide_action(float(p), self.CFG).kind]
            assert rank >= prev
            prev = rank

    def test_explicit_ttl_override(self):
        cfg = ControllerConfig(action_ttl_packets=50)
        assert decide_action(0.01, cfg).ttl_packets == 50


class TestHandleReport:
    def report(self, seq):
        key = FlowKey(ip_a=1, port_a=2, ip_b=3, port_b=4, protocol=6)
        return FeatureReport(flow_key=key, packet_count=20,
                             reason=ReportReason.UNCERTAIN,
                             sequence=seq, switch_logit=0)

    def test_zero_weight_bundle_notifies(self, handcrafted_bundle):
        from dataclasses import replace

        b = replace(handcrafted_bundle, gru=zero_gru(), head=zero_head())
        ctl = Controller(bundle=b)
        inst = ctl.handle_feature_report(self.report(np.zeros((10, 16), dtype=np.int8)))
        assert inst.action is ActionKind.NOTIFY

    def test_statelessness(self, handcrafted_bundle):
        ctl = Controller(bundle=handcrafted_bundle)
        seq = np.random.default_rng(4).integers(-128, 128, (10, 16)).astype(np.int8)
        a = ctl.handle_feature_report(self.report(seq))
        b = ctl.handle_feature_report(self.report(seq))
        assert a == b

    def test_attack_sequence_drops(self, handcrafted_bundle):
        ctl = Controller(bundle=handcrafted_bundle)
        seq = np.zeros((10, 16), dtype=np.int8)
        seq[:, :2] = 80  # sustained high attack-marker statistic
        inst = ctl.handle_feature_report(self.report(seq))
        assert inst.action is ActionKind.DROP

    def test_benign_sequence_allows(self, handcrafted_bundle):
        ctl = Controller(bundle=handcrafted_bundle)
        seq = np.zeros((10, 16), dtype=np.int8)
        seq[:, :2] = 12  # the steady benign level (one handshake SYN)
        inst = ctl.handle_feature_report(self.report(seq))
        assert inst.action is ActionKind.ALLOW

    def test_malformed_report(self, handcrafted_bundle):
        ctl = Controller(bundle=handcrafted_bundle)
        with pytest.raises(MalformedReport):
            ctl.handle_feature_report(self.report(np.zeros((9, 16), dtype=np.int8)))

    def test_addressing(self, handcrafted_bundle):
        ctl = Controller(bundle=handcrafted_bundle)
        rep = self.report(np.zeros((10, 16), dtype=np.int8))
        inst = ctl.handle_feature_report(rep)
        assert isinstance(inst, ActionInstall)
        assert inst.flow_key == rep.flow_key
