"""Southbound wire protocol: switch <-> controller message codec and framing.

Layout (all multi-byte fields big-endian):

    header (8 bytes):
        magic      u16 = 0x4545
        version    u8  = 1
        msg_type   u8  (1 FEATURE_REPORT, 2 ACTION_INSTALL)
        payload_len u16
        switch_id  u16

    FEATURE_REPORT payload (179 bytes):
        flow key: ip_a u32, ip_b u32, port_a u16, port_b u16, protocol u8
        packet_count u32
        reason u8 (0 uncertain, 1 reverify500, 2 periodic)
        sequence: 10*16 int8, oldest timestep first, channel-major per step
        switch_logit s8

    ACTION_INSTALL payload (18 bytes):
        flow key (13 bytes as above)
        action u8 (0 Allow, 1 Drop, 2 Notify)
        ttl_packets u32

The transport is a reliable ordered byte stream per switch/controller
pair; a framing error poisons the connection, resynchronization is not
attempted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .packets import FlowKey

MAGIC = 0x4545
VERSION = 1
HEADER_LEN = 8
TYPE_FEATURE_REPORT = 1
TYPE_ACTION_INSTALL = 2
REPORT_PAYLOAD_LEN = 179
INSTALL_PAYLOAD_LEN = 18
SEQ_BYTES = 160  # 10 timesteps * 16 channels


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class ReportReason(IntEnum):
    UNCERTAIN = 0
    REVERIFY_500 = 1
    PERIODIC = 2


class ActionKind(IntEnum):
    ALLOW = 0
    DROP = 1
    NOTIFY = 2


@dataclass(frozen=True)
class FeatureReport:
    flow_key: FlowKey
    packet_count: int
    reason: ReportReason
    sequence: np.ndarray  # int8, shape (10, 16), oldest first
    switch_logit: int  # signed 8-bit, diagnostic only

    def __eq__(self, other):
        if not isinstance(other, FeatureReport):
            return NotImplemented
        return (
            self.flow_key == other.flow_key
            and self.packet_count == other.packet_count
            and self.reason == other.reason
            and self.switch_logit == other.switch_logit
            and np.array_equal(self.sequence, other.sequence)
        )


@dataclass(frozen=True)
class ActionInstall:
    flow_key: FlowKey
    action: ActionKind
    ttl_packets: int  # 0 = permanent


def _pack_key(key: FlowKey) -> bytes:
    return struct.pack("!IIHHB", key.ip_a, key.ip_b, key.port_a, key.port_b, key.protocol)


def _unpack_key(buf: bytes, off: int) -> FlowKey:
    ip_a, ip_b, port_a, port_b, proto = struct.unpack_from("!IIHHB", buf, off)
    return FlowKey(ip_a=ip_a, port_a=port_a, ip_b=ip_b, port_b=port_b, protocol=proto)


def encode(msg, switch_id: int) -> bytes:
    """Serialize a FeatureReport or ActionInstall with its header."""
    if isinstance(msg, FeatureReport):
        seq = np.asarray(msg.sequence, dtype=np.int8)
        if seq.shape != (10, 16):
            raise ProtocolError(f"sequence shape {seq.shape} != (10, 16)")
        payload = (
            _pack_key(msg.flow_key)
            + struct.pack("!IB", msg.packet_count & 0xFFFFFFFF, int(msg.reason))
            + seq.tobytes()
            + struct.pack("!b", msg.switch_logit)
        )
        msg_type = TYPE_FEATURE_REPORT
    elif isinstance(msg, ActionInstall):
        payload = _pack_key(msg.flow_key) + struct.pack(
            "!BI", int(msg.action), msg.ttl_packets & 0xFFFFFFFF
        )
        msg_type = TYPE_ACTION_INSTALL
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    header = struct.pack("!HBBHH", MAGIC, VERSION, msg_type, len(payload), switch_id)
    return header + payload


def decode(buf: bytes):
    """Inverse of encode.  Returns (message, switch_id).

    Raises a typed ProtocolError naming the violated field; never aborts.
    """
    if len(buf) < HEADER_LEN:
        raise Truncated(f"{len(buf)} bytes, header needs {HEADER_LEN}")
    magic, version, msg_type, payload_len, switch_id = struct.unpack_from("!HBBHH", buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"magic 0x{magic:04x} != 0x{MAGIC:04x}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} != {VERSION}")
    if msg_type == TYPE_FEATURE_REPORT:
        expect = REPORT_PAYLOAD_LEN
    elif msg_type == TYPE_ACTION_INSTALL:
        expect = INSTALL_PAYLOAD_LEN
    else:
        raise UnknownType(f"msg_type {msg_type}")
    if payload_len != expect:
        raise LengthMismatch(f"payload_len {payload_len}, type {msg_type} requires {expect}")
    if len(buf) < HEADER_LEN + payload_len:
        raise Truncated(f"payload has {len(buf) - HEADER_LEN} of {payload_len} bytes")
    off = HEADER_LEN
    key = _unpack_key(buf, off)
    off += 13
    if msg_type == TYPE_FEATURE_REPORT:
        packet_count, reason = struct.unpack_from("!IB", buf, off)
        off += 5
        if reason > 2:
            raise ProtocolError(f"reason {reason} out of range")
        seq = np.frombuffer(buf, dtype=np.int8, count=SEQ_BYTES, offset=off).reshape(10, 16)
        off += SEQ_BYTES
        (switch_logit,) = struct.unpack_from("!b", buf, off)
        msg = FeatureReport(
            flow_key=key,
            packet_count=packet_count,
            reason=ReportReason(reason),
            sequence=seq.copy(),
            switch_logit=switch_logit,
        )
    else:
        action, ttl = struct.unpack_from("!BI", buf, off)
        if action > 2:
            raise ProtocolError(f"action {action} out of range")
        msg = ActionInstall(flow_key=key, action=ActionKind(action), ttl_packets=ttl)
    return msg, switch_id


class FrameDecoder:
    """Incremental framer over a reliable byte stream, one per connection.

    Feed arbitrary chunks; complete messages come out in order.  Any
    framing error poisons the decoder permanently (the connection must be
    re-established), matching the no-resynchronization contract.
    """

    def __init__(self):
        self._buf = bytearray()
        self._poisoned = False

    @property
    def poisoned(self) -> bool:
        return self._poisoned

    def feed(self, chunk: bytes):
        """Consume a chunk, return the list of (message, switch_id) completed."""
        if self._poisoned:
            raise ProtocolError("connection poisoned by an earlier framing error")
        self._buf.extend(chunk)
        out = []
        while True:
            if len(self._buf) < HEADER_LEN:
                return out
            payload_len = struct.unpack_from("!H", self._buf, 4)[0]
            total = HEADER_LEN + payload_len
            if len(self._buf) < total:
                return out
            try:
                out.append(decode(bytes(self._buf[:total])))
            except ProtocolError:
                self._poisoned = True
                raise
            del self._buf[:total]


def frame_stream(chunks):
    """Decode a whole chunk iterable; yields messages in order."""
    dec = FrameDecoder()
    for chunk in chunks:
        yield from dec.feed(chunk)
