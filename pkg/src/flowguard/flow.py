"""Per-flow state: 28 real-time features, input quantization, feature-map ring.

Every feature is computable from the current packet plus O(1) stored flow
state; there are no per-flow history arrays.  Times are carried in
microseconds so scaler ranges stay well conditioned.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .packets import FlowKey, PacketRecord, canonical_flow_key

NUM_FEATURES = 28
RING_SLOTS = 10
MAP_WIDTH = 16

# Binding order contract, shared with the model bundle and the trainer.
FEATURE_NAMES = (
    "fwd_pkt_count",
    "bwd_pkt_count",
    "fwd_byte_count",
    "bwd_byte_count",
    "last_pkt_len",
    "min_pkt_len",
    "max_pkt_len",
    "last_fwd_header_len",
    "last_bwd_header_len",
    "flow_duration",
    "flow_iat_last",
    "fwd_iat_last",
    "bwd_iat_last",
    "min_flow_iat",
    "max_flow_iat",
    "fin_count",
    "syn_count",
    "rst_count",
    "psh_count",
    "ack_count",
    "urg_count",
    "ece_count",
    "cwr_count",
    "protocol",
    "dst_port",
    "last_tcp_window",
    "last_payload_len",
    "current_direction",
)

F = {name: i for i, name in enumerate(FEATURE_NAMES)}


class FlowError(Exception):
    pass


class InsufficientHistory(FlowError):
    pass


@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature min/max observed during training (28 of each)."""

    mins: np.ndarray  # float64 (28,)
    maxs: np.ndarray  # float64 (28,)

    def __post_init__(self):
        if self.mins.shape != (NUM_FEATURES,) or self.maxs.shape != (NUM_FEATURES,):
            raise FlowError("scaler arrays must have shape (28,)")
        if np.any(self.mins > self.maxs):
            raise FlowError("scaler min > max")


def quantize_features(features: np.ndarray, scaler: FeatureScaler) -> np.ndarray:
    """Min-max scale each feature into an unsigned 8-bit value in [0, 127].

    q_i = clamp(floor(127 * (f_i - min_i) / (max_i - min_i)), 0, 127);
    a degenerate scaler (max == min) maps to 0.
    """
    span = scaler.maxs - scaler.mins
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(span > 0, (features - scaler.mins) / span, 0.0)
    q = np.floor(127.0 * ratio)
    return np.clip(q, 0, 127).astype(np.uint8)


class FlowEntry:
    """Mutable per-flow record: accumulators, ring of feature maps, actions.

    Size is constant no matter how many packets the flow has carried.
    """

    __slots__ = (
        "key",
        "initiator",
        "resp_port",
        "first_ts",
        "last_ts",
        "last_fwd_ts",
        "last_bwd_ts",
        "packet_count",
        "fwd_pkts",
        "bwd_pkts",
        "fwd_bytes",
        "bwd_bytes",
        "min_pkt_len",
        "max_pkt_len",
        "last_fwd_header_len",
        "last_bwd_header_len",
        "flow_iat_last",
        "fwd_iat_last",
        "bwd_iat_last",
        "min_flow_iat",
        "max_flow_iat",
        "flag_counts",
        "map_ring",
        "map_head",
        "map_fill",
        "installed_action",
        "ttl_remaining",
        "report_outstanding",
        "report_sent_at",
        "notify_pkts",
    )

    def __init__(self, key: FlowKey):
        self.key = key
        self.initiator: Optional[tuple[int, int]] = None
        self.resp_port = 0
        self.first_ts = 0.0
        self.last_ts = 0.0
        self.last_fwd_ts: Optional[float] = None
        self.last_bwd_ts: Optional[float] = None
        self.packet_count = 0
        self.fwd_pkts = 0
        self.bwd_pkts = 0
        self.fwd_bytes = 0
        self.bwd_bytes = 0
        self.min_pkt_len = 0
        self.max_pkt_len = 0
        self.last_fwd_header_len = 0
        self.last_bwd_header_len = 0
        self.flow_iat_last = 0.0
        self.fwd_iat_last = 0.0
        self.bwd_iat_last = 0.0
        self.min_flow_iat = 0.0
        self.max_flow_iat = 0.0
        self.flag_counts = [0] * 8  # fin syn rst psh ack urg ece cwr
        self.map_ring = np.zeros((RING_SLOTS, MAP_WIDTH), dtype=np.int8)
        self.map_head = 0  # next slot to overwrite
        self.map_fill = 0
        self.installed_action = None  # set by the data-plane switch
        self.ttl_remaining = None  # None = permanent rule, int = ticks left
        self.report_outstanding = False
        self.report_sent_at = 0.0
        self.notify_pkts = 0


def update_flow(entry: FlowEntry, pkt: PacketRecord) -> np.ndarray:
    """Fold one packet into the entry; return the 28 features valid after it.

    Direction is forward iff the packet's source endpoint equals the flow
    initiator (first observed sender).  IAT features stay 0 until a second
    packet exists at flow level / in the packet's direction.
    """
    first = entry.packet_count == 0
    if first:
        entry.initiator = (pkt.src_ip, pkt.src_port)
        entry.resp_port = pkt.dst_port
        entry.first_ts = pkt.timestamp
        entry.min_pkt_len = pkt.total_len
        entry.max_pkt_len = pkt.total_len
    forward = (pkt.src_ip, pkt.src_port) == entry.initiator

    if not first:
        iat_us = (pkt.timestamp - entry.last_ts) * 1e6
        entry.flow_iat_last = iat_us
        if entry.packet_count == 1:
            entry.min_flow_iat = iat_us
            entry.max_flow_iat = iat_us
        else:
            entry.min_flow_iat = min(entry.min_flow_iat, iat_us)
            entry.max_flow_iat = max(entry.max_flow_iat, iat_us)

    if forward:
        if entry.last_fwd_ts is not None:
            entry.fwd_iat_last = (pkt.timestamp - entry.last_fwd_ts) * 1e6
        entry.last_fwd_ts = pkt.timestamp
        entry.fwd_pkts += 1
        entry.fwd_bytes += pkt.total_len
        entry.last_fwd_header_len = pkt.header_len
    else:
        if entry.last_bwd_ts is not None:
            entry.bwd_iat_last = (pkt.timestamp - entry.last_bwd_ts) * 1e6
        entry.last_bwd_ts = pkt.timestamp
        entry.bwd_pkts += 1
        entry.bwd_bytes += pkt.total_len
        entry.last_bwd_header_len = pkt.header_len

    entry.min_pkt_len = min(entry.min_pkt_len, pkt.total_len)
    entry.max_pkt_len = max(entry.max_pkt_len, pkt.total_len)
    fl = pkt.tcp_flags
    for i, on in enumerate((fl.fin, fl.syn, fl.rst, fl.psh, fl.ack, fl.urg, fl.ece, fl.cwr)):
        if on:
            entry.flag_counts[i] += 1
    entry.last_ts = pkt.timestamp
    entry.packet_count += 1

    out = np.empty(NUM_FEATURES, dtype=np.float64)
    out[0] = entry.fwd_pkts
    out[1] = entry.bwd_pkts
    out[2] = entry.fwd_bytes
    out[3] = entry.bwd_bytes
    out[4] = pkt.total_len
    out[5] = entry.min_pkt_len
    out[6] = entry.max_pkt_len
    out[7] = entry.last_fwd_header_len
    out[8] = entry.last_bwd_header_len
    out[9] = (pkt.timestamp - entry.first_ts) * 1e6
    out[10] = entry.flow_iat_last
    out[11] = entry.fwd_iat_last
    out[12] = entry.bwd_iat_last
    out[13] = entry.min_flow_iat
    out[14] = entry.max_flow_iat
    out[15:23] = entry.flag_counts
    out[23] = pkt.protocol
    out[24] = entry.resp_port
    out[25] = pkt.tcp_window
    out[26] = pkt.payload_len
    out[27] = 0.0 if forward else 1.0
    return out


def push_feature_map(entry: FlowEntry, map16: np.ndarray) -> None:
    """Append one 16-value int8 max-pool output, overwriting the oldest slot."""
    entry.map_ring[entry.map_head] = map16
    entry.map_head = (entry.map_head + 1) % RING_SLOTS
    if entry.map_fill < RING_SLOTS:
        entry.map_fill += 1


def snapshot_sequence(entry: FlowEntry) -> np.ndarray:
    """Return the last 10 feature maps oldest-first (copy; ring untouched)."""
    if entry.map_fill < RING_SLOTS:
        raise InsufficientHistory(
            f"flow has {entry.map_fill} feature maps, sequence needs {RING_SLOTS}"
        )
    return np.roll(entry.map_ring, -entry.map_head, axis=0).copy()


DEFAULT_TABLE_CAPACITY = 65_536
DEFAULT_IDLE_TIMEOUT = 120.0  # seconds


class FlowTable:
    """Bounded flow map: LRU eviction at capacity, idle entries reclaimed.

    Single-writer by contract: one packet-processing context mutates it.
    """

    def __init__(self, capacity: int = DEFAULT_TABLE_CAPACITY, idle_timeout: float = DEFAULT_IDLE_TIMEOUT):
        if capacity < 1:
            raise FlowError("table capacity must be >= 1")
        self.capacity = capacity
        self.idle_timeout = idle_timeout
        self._entries: "OrderedDict[FlowKey, tuple[FlowEntry, float]]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self._entries

    def get_or_create(self, key: FlowKey, now: float) -> FlowEntry:
        self._expire_idle(now)
        hit = self._entries.get(key)
        if hit is not None:
            self._entries[key] = (hit[0], now)
            self._entries.move_to_end(key)
            return hit[0]
        if len(self._entries) >= self.capacity:
            self._entries.popitem(last=False)  # least recently updated
        entry = FlowEntry(key)
        self._entries[key] = (entry, now)
        return entry

    def peek(self, key: FlowKey) -> Optional[FlowEntry]:
        hit = self._entries.get(key)
        return hit[0] if hit is not None else None

    def _expire_idle(self, now: float) -> None:
        # LRU order means stale entries cluster at the front.
        while self._entries:
            _, (entry, touched) = next(iter(self._entries.items()))
            if now - touched <= self.idle_timeout:
                break
            self._entries.popitem(last=False)

    def entries(self):
        return [e for e, _ in self._entries.values()]


def flow_key_of(pkt: PacketRecord) -> FlowKey:
    return canonical_flow_key(pkt)
