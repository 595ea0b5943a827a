"""Packet parsing, canonical bidirectional flow keys, and classic pcap I/O.

Only Ethernet + IPv4 + TCP/UDP frames enter the pipeline; everything else
(ARP, IPv6, ICMP, truncated junk) is silently skipped.  Skipping is a
value, never an exception: arbitrary bytes must not abort a capture read.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

ETHERTYPE_IPV4 = 0x0800
PROTO_TCP = 6
PROTO_UDP = 17

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_SWAPPED = 0xD4C3B2A1
LINKTYPE_ETHERNET = 1


class TraceError(Exception):
    pass


class BadMagic(TraceError):
    pass


class UnsupportedLinkType(TraceError):
    pass


class TruncatedRecord(TraceError):
    pass


@dataclass(frozen=True)
class TcpFlags:
    fin: bool = False
    syn: bool = False
    rst: bool = False
    psh: bool = False
    ack: bool = False
    urg: bool = False
    ece: bool = False
    cwr: bool = False

    @classmethod
    def from_byte(cls, b: int) -> "TcpFlags":
        return cls(
            fin=bool(b & 0x01),
            syn=bool(b & 0x02),
            rst=bool(b & 0x04),
            psh=bool(b & 0x08),
            ack=bool(b & 0x10),
            urg=bool(b & 0x20),
            ece=bool(b & 0x40),
            cwr=bool(b & 0x80),
        )

    def to_byte(self) -> int:
        b = 0
        for bit, on in enumerate(
            (self.fin, self.syn, self.rst, self.psh, self.ack, self.urg, self.ece, self.cwr)
        ):
            if on:
                b |= 1 << bit
        return b


NO_FLAGS = TcpFlags()


@dataclass(frozen=True)
class PacketRecord:
    """One parsed IPv4 TCP/UDP packet.

    total_len is the IP total length; header_len counts IP plus transport
    header bytes, so payload_len = total_len - header_len always holds.
    """

    timestamp: float  # seconds
    src_ip: int  # 32-bit
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: int  # 6 or 17
    total_len: int
    header_len: int
    payload_len: int
    tcp_flags: TcpFlags = NO_FLAGS
    tcp_window: int = 0

    def reversed(self) -> "PacketRecord":
        return PacketRecord(
            timestamp=self.timestamp,
            src_ip=self.dst_ip,
            dst_ip=self.src_ip,
            src_port=self.dst_port,
            dst_port=self.src_port,
            protocol=self.protocol,
            total_len=self.total_len,
            header_len=self.header_len,
            payload_len=self.payload_len,
            tcp_flags=self.tcp_flags,
            tcp_window=self.tcp_window,
        )

    @property
    def wire_len(self) -> int:
        """Bytes the frame occupies on an Ethernet link (14-byte header)."""
        return 14 + self.total_len


@dataclass(frozen=True, order=True)
class FlowKey:
    """Canonical bidirectional 5-tuple: (ip_a, port_a) <= (ip_b, port_b)."""

    ip_a: int
    port_a: int
    ip_b: int
    port_b: int
    protocol: int


def ip_to_int(dotted: str) -> int:
    parts = dotted.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address {dotted!r}")
    val = 0
    for p in parts:
        n = int(p)
        if not 0 <= n <= 255:
            raise ValueError(f"bad IPv4 address {dotted!r}")
        val = (val << 8) | n
    return val


def int_to_ip(val: int) -> str:
    return ".".join(str((val >> s) & 0xFF) for s in (24, 16, 8, 0))


def canonical_flow_key(rec: PacketRecord) -> FlowKey:
    """Direction-independent key; both directions of a flow map to one entry."""
    a = (rec.src_ip, rec.src_port)
    b = (rec.dst_ip, rec.dst_port)
    if a <= b:
        return FlowKey(a[0], a[1], b[0], b[1], rec.protocol)
    return FlowKey(b[0], b[1], a[0], a[1], rec.protocol)


def parse_packet(frame: bytes, link_type: int = LINKTYPE_ETHERNET, timestamp: float = 0.0):
    """Parse one captured frame.  Returns a PacketRecord or None (skip).

    Never raises on arbitrary input: anything that is not a well-formed
    Ethernet + IPv4 + TCP/UDP frame is skipped.
    """
    if link_type != LINKTYPE_ETHERNET:
        return None
    if len(frame) < 34:  # eth(14) + minimal ipv4(20)
        return None
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    if ethertype != ETHERTYPE_IPV4:
        return None
    ip_off = 14
    vihl = frame[ip_off]
    if vihl >> 4 != 4:
        return None
    ihl = (vihl & 0x0F) * 4
    if ihl < 20 or len(frame) < ip_off + ihl:
        return None
    total_len, = struct.unpack_from("!H", frame, ip_off + 2)
    flags_frag, = struct.unpack_from("!H", frame, ip_off + 6)
    if flags_frag & 0x1FFF:  # non-first fragment: no transport header
        return None
    proto = frame[ip_off + 9]
    if proto not in (PROTO_TCP, PROTO_UDP):
        return None
    if total_len < ihl or len(frame) < ip_off + total_len:
        return None  # claimed length inconsistent with capture: truncated
    src_ip, dst_ip = struct.unpack_from("!II", frame, ip_off + 12)
    t_off = ip_off + ihl
    if proto == PROTO_TCP:
        if len(frame) < t_off + 20:
            return None
        src_port, dst_port = struct.unpack_from("!HH", frame, t_off)
        data_off = (frame[t_off + 12] >> 4) * 4
        if data_off < 20 or total_len < ihl + data_off:
            return None
        flags = TcpFlags.from_byte(frame[t_off + 13])
        window, = struct.unpack_from("!H", frame, t_off + 14)
        header_len = ihl + data_off
    else:
        if len(frame) < t_off + 8:
            return None
        src_port, dst_port = struct.unpack_from("!HH", frame, t_off)
        if total_len < ihl + 8:
            return None
        flags = NO_FLAGS
        window = 0
        header_len = ihl + 8
    return PacketRecord(
        timestamp=timestamp,
        src_ip=src_ip,
        dst_ip=dst_ip,
        src_port=src_port,
        dst_port=dst_port,
        protocol=proto,
        total_len=total_len,
        header_len=header_len,
        payload_len=total_len - header_len,
        tcp_flags=flags,
        tcp_window=window,
    )


def build_frame(rec: PacketRecord) -> bytes:
    """Emit a minimal Ethernet frame encoding the record (round-trip inverse).

    Options and payload bytes are zero-filled; only the fields a
    PacketRecord carries are meaningful.
    """
    if rec.protocol == PROTO_TCP:
        transport_len = rec.header_len - 20
        if transport_len < 20:
            raise ValueError("TCP header_len must be >= 40 (20 IP + 20 TCP)")
        transport = struct.pack(
            "!HHIIBBHHH",
            rec.src_port,
            rec.dst_port,
            0,
            0,
            (transport_len // 4) << 4,
            rec.tcp_flags.to_byte(),
            rec.tcp_window,
            0,
            0,
        )
        transport += b"\x00" * (transport_len - 20)
    elif rec.protocol == PROTO_UDP:
        if rec.header_len != 28:
            raise ValueError("UDP header_len must be 28 (20 IP + 8 UDP)")
        transport = struct.pack("!HHHH", rec.src_port, rec.dst_port, 8 + rec.payload_len, 0)
    else:
        raise ValueError(f"unsupported protocol {rec.protocol}")
    ip = struct.pack(
        "!BBHHHBBHII",
        0x45,
        0,
        rec.total_len,
        0,
        0,
        64,
        rec.protocol,
        0,
        rec.src_ip,
        rec.dst_ip,
    )
    eth = b"\x02" * 6 + b"\x04" * 6 + struct.pack("!H", ETHERTYPE_IPV4)
    return eth + ip + transport + b"\x00" * rec.payload_len


def read_trace(path) -> Iterator[PacketRecord]:
    """Yield records from a classic pcap file in capture order.

    Non-IP/v6/ICMP frames are dropped without notice; structural damage to
    the file itself (bad magic, unknown link type, short record) raises.
    """
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) < 24:
            raise BadMagic("file shorter than pcap global header")
        magic = struct.unpack_from("<I", header, 0)[0]
        if magic == PCAP_MAGIC:
            endian = "<"
        elif magic == PCAP_MAGIC_SWAPPED:
            endian = ">"
        else:
            raise BadMagic(f"magic 0x{magic:08x} is not a classic pcap magic")
        link_type = struct.unpack(endian + "I", header[20:24])[0]
        if link_type != LINKTYPE_ETHERNET:
            raise UnsupportedLinkType(f"link type {link_type} (only Ethernet supported)")
        while True:
            rec_hdr = fh.read(16)
            if not rec_hdr:
                return
            if len(rec_hdr) < 16:
                raise TruncatedRecord("short packet record header")
            ts_sec, ts_usec, incl_len, orig_len = struct.unpack(endian + "IIII", rec_hdr)
            data = fh.read(incl_len)
            if len(data) < incl_len:
                raise TruncatedRecord("packet data shorter than incl_len")
            rec = parse_packet(data, LINKTYPE_ETHERNET, ts_sec + ts_usec / 1e6)
            if rec is not None:
                yield rec


def write_pcap(path, records) -> None:
    """Write records as a classic little-endian pcap (test fixtures, replays)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        for rec in records:
            frame = build_frame(rec)
            ts_sec = int(rec.timestamp)
            ts_usec = int(round((rec.timestamp - ts_sec) * 1e6))
            if ts_usec >= 1_000_000:
                ts_sec += 1
                ts_usec -= 1_000_000
            fh.write(struct.pack("<IIII", ts_sec, ts_usec, len(frame), len(frame)))
            fh.write(frame)
