"""Control-plane inference: full-precision GRU over escalated feature-map
sequences, a two-layer classifier head, and the allow/drop/notify policy.

The hidden state starts at zero for every report, so handling is pure:
the same report always yields the same action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datapath import FlowAction
from .protocol import ActionInstall, ActionKind, FeatureReport
from .qnn import QuantParams

INPUT_SIZE = 16
HIDDEN_SIZE = 64
HEAD_HIDDEN = 32  # half the GRU latent width
SEQ_LEN = 10


class ControllerError(Exception):
    pass


class ShapeMismatch(ControllerError):
    pass


class MalformedReport(ControllerError):
    pass


@dataclass(frozen=True)
class GruWeights:
    """Gate matrices and biases; reset gate applies to the recurrent
    candidate term (separate input/recurrent biases)."""

    w_z: np.ndarray  # (64, 16)
    w_r: np.ndarray
    w_n: np.ndarray
    u_z: np.ndarray  # (64, 64)
    u_r: np.ndarray
    u_n: np.ndarray
    b_iz: np.ndarray  # (64,)
    b_ir: np.ndarray
    b_in: np.ndarray
    b_hz: np.ndarray
    b_hr: np.ndarray
    b_hn: np.ndarray

    def __post_init__(self):
        for name in ("w_z", "w_r", "w_n"):
            if getattr(self, name).shape != (HIDDEN_SIZE, INPUT_SIZE):
                raise ShapeMismatch(f"{name} must be (64, 16)")
        for name in ("u_z", "u_r", "u_n"):
            if getattr(self, name).shape != (HIDDEN_SIZE, HIDDEN_SIZE):
                raise ShapeMismatch(f"{name} must be (64, 64)")
        for name in ("b_iz", "b_ir", "b_in", "b_hz", "b_hr", "b_hn"):
            if getattr(self, name).shape != (HIDDEN_SIZE,):
                raise ShapeMismatch(f"{name} must be (64,)")


@dataclass(frozen=True)
class ClassifierHead:
    dense1_w: np.ndarray  # (32, 64)
    dense1_b: np.ndarray  # (32,)
    dense2_w: np.ndarray  # (1, 32)
    dense2_b: np.ndarray  # (1,)

    def __post_init__(self):
        if self.dense1_w.shape != (HEAD_HIDDEN, HIDDEN_SIZE) or self.dense1_b.shape != (HEAD_HIDDEN,):
            raise ShapeMismatch("dense1 must be (32, 64) with (32,) bias")
        if self.dense2_w.shape != (1, HEAD_HIDDEN) or self.dense2_b.shape != (1,):
            raise ShapeMismatch("dense2 must be (1, 32) with (1,) bias")


@dataclass(frozen=True)
class ControllerConfig:
    tau_benign: float = 0.1
    tau_attack: float = 0.9
    reverify_period_packets: int = 2000
    action_ttl_packets: int = 0  # 0 = use the re-verification period

    def __post_init__(self):
        if not (0.0 < self.tau_benign <= self.tau_attack < 1.0):
            raise ControllerError("need 0 < tau_benign <= tau_attack < 1")

    @property
    def effective_ttl(self) -> int:
        """TTL stamped on Allow/Drop installs so periodic re-checks happen."""
        return self.action_ttl_packets if self.action_ttl_packets > 0 else self.reverify_period_packets


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def dequantize_sequence(seq: np.ndarray, map_q: QuantParams) -> np.ndarray:
    """Affine dequantization of a 10x16 int8 escalated sequence."""
    seq = np.asarray(seq)
    if seq.shape != (SEQ_LEN, INPUT_SIZE):
        raise ShapeMismatch(f"sequence shape {seq.shape} != (10, 16)")
    return map_q.scale * (seq.astype(np.float64) - map_q.zero_point)


def gru_forward(x: np.ndarray, w: GruWeights) -> np.ndarray:
    """Run the GRU over a 10x16 real sequence from a zero hidden state."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != INPUT_SIZE:
        raise ShapeMismatch(f"input shape {x.shape} != (T, 16)")
    h = np.zeros(HIDDEN_SIZE)
    for t in range(x.shape[0]):
        xt = x[t]
        z = _sigmoid(w.w_z @ xt + w.b_iz + w.u_z @ h + w.b_hz)
        r = _sigmoid(w.w_r @ xt + w.b_ir + w.u_r @ h + w.b_hr)
        n = np.tanh(w.w_n @ xt + w.b_in + r * (w.u_n @ h + w.b_hn))
        h = (1.0 - z) * n + z * h
    return h


def controller_classify(h: np.ndarray, head: ClassifierHead) -> float:
    """Attack probability from the final hidden state."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (HIDDEN_SIZE,):
        raise ShapeMismatch(f"hidden shape {h.shape} != (64,)")
    hidden = np.maximum(head.dense1_w @ h + head.dense1_b, 0.0)
    logit = float((head.dense2_w @ hidden)[0] + head.dense2_b[0])
    return float(_sigmoid(logit))


def decide_action(p: float, cfg: ControllerConfig) -> FlowAction:
    """Allow below tau_benign, Drop above tau_attack, Notify in between."""
    if p < cfg.tau_benign:
        return FlowAction(ActionKind.ALLOW, ttl_packets=cfg.effective_ttl)
    if p > cfg.tau_attack:
        return FlowAction(ActionKind.DROP, ttl_packets=cfg.effective_ttl)
    return FlowAction(ActionKind.NOTIFY, ttl_packets=0)


@dataclass
class Controller:
    """Stateless-per-report GRU classifier serving one or more switches."""

    bundle: "object"
    cfg: ControllerConfig = field(default_factory=ControllerConfig)
    reports_handled: int = 0

    def handle_feature_report(self, report: FeatureReport) -> ActionInstall:
        """Full controller path: dequantize, GRU, head, threshold policy.

        Re-verification reports follow the identical path; the controller
        simply re-checks the switch-level decision with its own model.
        """
        seq = np.asarray(report.sequence)
        if seq.shape != (SEQ_LEN, INPUT_SIZE):
            raise MalformedReport(f"sequence shape {seq.shape}")
        reals = dequantize_sequence(seq, self.bundle.map_q)
        h = gru_forward(reals, self.bundle.gru)
        p = controller_classify(h, self.bundle.head)
        action = decide_action(p, self.cfg)
        self.reports_handled += 1
        return ActionInstall(
            flow_key=report.flow_key,
            action=action.kind,
            ttl_packets=action.ttl_packets,
        )
