"""Synthetic labeled traffic: packet-level flow profiles covering common
benign shapes and flood shapes, rendered through the real feature
extractor so the training data obeys the deployed feature semantics.

Every flow is exactly FLOW_LEN packets long; the controller branch trains
on the last CONTROLLER_WINDOW of them.  Deterministic for a fixed seed.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

import numpy as np

from .features import NUM_FEATURES, Pkt, flow_feature_matrix

FLOW_LEN = 20
CONTROLLER_WINDOW = 10
SWITCH_SNAPSHOTS = (0, 4, 9, 19)  # packets 1, 5, 10, 20

F_SYN = 1 << 1
F_RST = 1 << 2
F_PSH = 1 << 3
F_ACK = 1 << 4

CLIENT = (0x0A000001, 40001)
SERVER = (0x0A000004, 443)


def _tcp(ts, src, dst, total, flags=0, window=8192, opt=0):
    return Pkt(ts=ts, src=src, dst=dst, proto=6, total_len=total,
               header_len=40 + opt, flags=flags, window=window)


def _udp(ts, src, dst, total):
    return Pkt(ts=ts, src=src, dst=dst, proto=17, total_len=total, header_len=28)


def _benign_upload(rng):
    t = rng.uniform(0, 1)
    pkts = [_tcp(t, CLIENT, SERVER, 1460, F_SYN)]
    fwd = 1
    while len(pkts) < FLOW_LEN:
        t += rng.uniform(0.002, 0.02)
        pkts.append(_tcp(t, CLIENT, SERVER, rng.randint(1200, 1460), F_ACK))
        fwd += 1
        if fwd % rng.choice([2, 3]) == 0 and len(pkts) < FLOW_LEN:
            pkts.append(_tcp(t + 0.0005, SERVER, CLIENT, 40, F_ACK))
    return pkts


def _benign_web(rng):
    t = rng.uniform(0, 1)
    pkts = [
        _tcp(t, CLIENT, SERVER, 60, F_SYN, opt=12),
        _tcp(t + 0.01, SERVER, CLIENT, 60, F_SYN | F_ACK, opt=12),
        _tcp(t + 0.02, CLIENT, SERVER, 40, F_ACK),
    ]
    t += 0.02
    while len(pkts) < FLOW_LEN:
        t += rng.uniform(0.005, 0.05)
        pkts.append(_tcp(t, CLIENT, SERVER, rng.randint(100, 600), F_ACK | F_PSH))
        for _ in range(rng.randint(1, 3)):
            if len(pkts) >= FLOW_LEN:
                break
            t += rng.uniform(0.001, 0.01)
            pkts.append(_tcp(t, SERVER, CLIENT, rng.randint(400, 1460), F_ACK))
    return pkts


def _benign_interactive(rng):
    t = rng.uniform(0, 1)
    pkts = [_tcp(t, CLIENT, SERVER, 48, F_SYN)]
    side = 0
    while len(pkts) < FLOW_LEN:
        t += rng.uniform(0.02, 0.25)
        side = rng.choice([0, 1])
        a, b = (CLIENT, SERVER) if side == 0 else (SERVER, CLIENT)
        pkts.append(_tcp(t, a, b, rng.randint(41, 120), F_ACK | F_PSH))
    return pkts


def _benign_bursty(rng):
    # one-sided burst before the first ACKs land: early packets of this
    # profile resemble a flood and exercise the escalation path
    t = rng.uniform(0, 1)
    pkts = [_tcp(t, CLIENT, SERVER, 1460, F_SYN)]
    for _ in range(rng.randint(8, 11)):
        t += rng.uniform(0.0005, 0.004)
        pkts.append(_tcp(t, CLIENT, SERVER, 1460, F_ACK))
    while len(pkts) < FLOW_LEN:
        t += rng.uniform(0.002, 0.02)
        pkts.append(_tcp(t + 0.0005, SERVER, CLIENT, 40, F_ACK))
        if len(pkts) < FLOW_LEN:
            pkts.append(_tcp(t, CLIENT, SERVER, 1460, F_ACK))
    return pkts


def _syn_flood(rng):
    t = rng.uniform(0, 1)
    pkts = []
    for _ in range(FLOW_LEN):
        t += rng.uniform(0.001, 0.06)
        pkts.append(_tcp(t, CLIENT, SERVER, 40, F_SYN, window=rng.choice([512, 1024])))
    return pkts


def _udp_flood(rng):
    t = rng.uniform(0, 1)
    size = rng.randint(128, 1024)
    pkts = []
    for _ in range(FLOW_LEN):
        t += rng.uniform(0.0005, 0.05)
        pkts.append(_udp(t, CLIENT, SERVER, size))
    return pkts


def _mixed_flood(rng):
    t = rng.uniform(0, 1)
    pkts = []
    fwd = 0
    while len(pkts) < FLOW_LEN:
        t += rng.uniform(0.01, 0.08)
        fwd += 1
        pkts.append(_tcp(t, CLIENT, SERVER, rng.randint(40, 400),
                         F_SYN if fwd % 2 else F_ACK))
        if fwd % 5 == 0 and len(pkts) < FLOW_LEN:
            pkts.append(_tcp(t + 0.002, SERVER, CLIENT, 40, F_ACK | F_RST))
    return pkts


def _slow_syn_drizzle(rng):
    t = rng.uniform(0, 1)
    pkts = []
    for _ in range(FLOW_LEN):
        t += rng.uniform(0.1, 0.5)
        pkts.append(_tcp(t, CLIENT, SERVER, 40, F_SYN, window=2048))
    return pkts


PROFILES = (
    ("benign_upload", _benign_upload, 0, 0.25),
    ("benign_web", _benign_web, 0, 0.20),
    ("benign_interactive", _benign_interactive, 0, 0.10),
    ("benign_bursty", _benign_bursty, 0, 0.05),
    ("syn_flood", _syn_flood, 1, 0.15),
    ("udp_flood", _udp_flood, 1, 0.15),
    ("mixed_flood", _mixed_flood, 1, 0.05),
    ("slow_syn_drizzle", _slow_syn_drizzle, 1, 0.05),
)


@dataclass
class Dataset:
    features: np.ndarray  # (n_flows, FLOW_LEN, 28) raw float64
    labels: np.ndarray  # (n_flows,) 0 benign / 1 attack
    profiles: np.ndarray  # profile index per flow
    seed: int

    @property
    def n_flows(self) -> int:
        return self.features.shape[0]

    @property
    def class_ratio(self) -> float:
        """benign count over attack count (the positive-class weight)."""
        n_attack = int(self.labels.sum())
        return (len(self.labels) - n_attack) / max(1, n_attack)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]

    def split(self, test_fraction: float = 0.2):
        """Deterministic interleaved split (profiles stay balanced)."""
        idx = np.arange(self.n_flows)
        test = idx[idx % int(round(1 / test_fraction)) == 0]
        train = idx[idx % int(round(1 / test_fraction)) != 0]
        return train, test


def generate_dataset(n_flows: int = 20_000, seed: int = 7) -> Dataset:
    rng = random.Random(seed)
    feats = np.empty((n_flows, FLOW_LEN, NUM_FEATURES))
    labels = np.empty(n_flows, dtype=np.int64)
    profile_ids = np.empty(n_flows, dtype=np.int64)
    names, builders, flow_labels, weights = zip(*PROFILES)
    cum = np.cumsum(weights)
    assert abs(cum[-1] - 1.0) < 1e-9
    for i in range(n_flows):
        u = rng.random()
        pid = int(np.searchsorted(cum, u))
        pkts = builders[pid](rng)[:FLOW_LEN]
        feats[i] = flow_feature_matrix(pkts)
        labels[i] = flow_labels[pid]
        profile_ids[i] = pid
    return Dataset(features=feats, labels=labels, profiles=profile_ids, seed=seed)
