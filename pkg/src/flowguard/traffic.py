"""Deterministic traffic generators for the simulation scenario.

Each generator yields (inject_time, PacketRecord) pairs sorted by time.
Hosts are identified by the scenario's fixed addresses; the simulator
infers injection and delivery points from the IP fields.
"""

from __future__ import annotations

import random

from .packets import PacketRecord, TcpFlags, ip_to_int, read_trace

C1 = ip_to_int("10.0.0.1")
C2 = ip_to_int("10.0.0.2")
C3 = ip_to_int("10.0.0.3")
C4 = ip_to_int("10.0.0.4")

DATA_TOTAL_LEN = 1460  # IP total length of one upload segment
ACK_TOTAL_LEN = 40
SYN_TOTAL_LEN = 40  # 54 bytes on the wire with the Ethernet header
UDP_FLOOD_TOTAL_LEN = 300
STEALTH_TOTAL_LEN = 200

BENIGN_PORT = 40000
BENIGN_DST_PORT = 5001


def _tcp(ts, src, sport, dst, dport, total_len, syn=False, ack=False, window=8192):
    hl = 40
    return PacketRecord(
        timestamp=ts, src_ip=src, dst_ip=dst, src_port=sport, dst_port=dport,
        protocol=6, total_len=total_len, header_len=hl, payload_len=total_len - hl,
        tcp_flags=TcpFlags(syn=syn, ack=ack), tcp_window=window,
    )


def _udp(ts, src, sport, dst, dport, total_len):
    return PacketRecord(
        timestamp=ts, src_ip=src, dst_ip=dst, src_port=sport, dst_port=dport,
        protocol=17, total_len=total_len, header_len=28, payload_len=total_len - 28,
        tcp_flags=TcpFlags(), tcp_window=0,
    )


def generate_benign(rate_bps: float, duration: float, seed: int, start: float = 0.0,
                    ack_delay: float = 0.021) -> list[tuple[float, PacketRecord]]:
    """One open-loop bidirectional upload: jittered 1460-byte data from C1,
    a 40-byte reverse ACK from C4 after every second data packet.

    No congestion-control loop: goodput degradation under attack emerges
    from drop-tail queue competition measured at the receiver.
    """
    rng = random.Random(seed)
    wire_bits = 8 * (14 + DATA_TOTAL_LEN)
    base_gap = wire_bits / rate_bps
    out = []
    t = start
    n = 0
    while True:
        t += base_gap * rng.uniform(0.8, 1.2)
        if t >= start + duration:
            break
        n += 1
        out.append((t, _tcp(t, C1, BENIGN_PORT, C4, BENIGN_DST_PORT, DATA_TOTAL_LEN,
                            syn=(n == 1), ack=(n > 1))))
        if n % 2 == 0:
            ta = t + ack_delay
            out.append((ta, _tcp(ta, C4, BENIGN_DST_PORT, C1, BENIGN_PORT,
                                 ACK_TOTAL_LEN, ack=True)))
    out.sort(key=lambda p: p[0])
    return out


def generate_syn_flood(rate_pps: float, source_count: int, duration: float, seed: int,
                       start: float = 0.0, src_ip: int = C3, dst_ip: int = C4,
                       dst_port: int = 80, base_port: int = 20000) -> list[tuple[float, PacketRecord]]:
    """SYN-only 54-byte packets, exponential inter-arrivals, source ports
    cycling over source_count distinct flows."""
    if rate_pps <= 0:
        raise ValueError("rate must be positive")
    rng = random.Random(seed)
    out = []
    t = start
    i = 0
    while True:
        t += rng.expovariate(rate_pps)
        if t >= start + duration:
            break
        sport = base_port + (i % source_count)
        i += 1
        out.append((t, _tcp(t, src_ip, sport, dst_ip, dst_port, SYN_TOTAL_LEN, syn=True,
                            window=1024)))
    return out


def generate_udp_flood(rate_pps: float, source_count: int, duration: float, seed: int,
                       start: float = 0.0, src_ip: int = C2, dst_ip: int = C4,
                       dst_port: int = 80, base_port: int = 25000) -> list[tuple[float, PacketRecord]]:
    rng = random.Random(seed)
    out = []
    t = start
    i = 0
    while True:
        t += rng.expovariate(rate_pps)
        if t >= start + duration:
            break
        sport = base_port + (i % source_count)
        i += 1
        out.append((t, _udp(t, src_ip, sport, dst_ip, dst_port, UDP_FLOOD_TOTAL_LEN)))
    return out


def generate_stealth_flows(flow_count: int, per_flow_pps: float, duration: float, seed: int,
                           start: float = 0.0, src_ip: int = C2, dst_ip: int = C4,
                           dst_port: int = 80, base_port: int = 28000) -> list[tuple[float, PacketRecord]]:
    """Low-and-slow TCP floods: a SYN every second packet, with a sparse
    reverse ACK from the victim, so the switch stays uncertain long enough
    to escalate before the statistic crosses the attack threshold."""
    out = []
    for k in range(flow_count):
        rng = random.Random(seed * 1000 + k)
        sport = base_port + k
        t = start + rng.uniform(0.0, 0.5)
        fwd = 0
        while t < start + duration:
            fwd += 1
            out.append((t, _tcp(t, src_ip, sport, dst_ip, dst_port, STEALTH_TOTAL_LEN,
                                syn=(fwd % 2 == 1), ack=(fwd % 2 == 0), window=2048)))
            if fwd % 3 == 0:
                ta = t + 0.021
                out.append((ta, _tcp(ta, dst_ip, dst_port, src_ip, sport, ACK_TOTAL_LEN,
                                     ack=True)))
            t += rng.uniform(0.8, 1.2) / per_flow_pps
    out.sort(key=lambda p: p[0])
    return out


def generate_mixed_flood(duration: float, seed: int, start: float = 0.0,
                         udp_pps: float = 500.0, udp_sources: int = 40,
                         syn_pps: float = 1200.0, syn_sources: int = 60,
                         stealth_flows: int = 4, stealth_pps: float = 30.0,
                         src_ip: int = C2, dst_ip: int = C4) -> list[tuple[float, PacketRecord]]:
    """The first attack wave: UDP flood plus SYN burst plus stealth TCP
    flows, all from one host, flows starting at staggered times."""
    out = []
    out += generate_udp_flood(udp_pps, udp_sources, duration, seed + 1, start=start,
                              src_ip=src_ip, dst_ip=dst_ip)
    out += generate_syn_flood(syn_pps, syn_sources, duration, seed + 2, start=start + 0.5,
                              src_ip=src_ip, dst_ip=dst_ip, base_port=22000)
    out += generate_stealth_flows(stealth_flows, stealth_pps, duration, seed + 3,
                                  start=start + 0.2, src_ip=src_ip, dst_ip=dst_ip)
    out.sort(key=lambda p: p[0])
    return out


def replay_attack_trace(path, time_offset: float, src_ip: int = C2, dst_ip: int = C4,
                        base_port: int = 22000) -> list[tuple[float, PacketRecord]]:
    """Replay a pcap as attack traffic: re-timed by the offset, addresses
    rewritten onto the attacker/victim pair, one distinct source port per
    original flow so flow identities survive the rewrite."""
    from dataclasses import replace

    from .packets import canonical_flow_key

    out = []
    t0 = None
    port_of: dict = {}
    initiator_of: dict = {}
    for rec in read_trace(path):
        if t0 is None:
            t0 = rec.timestamp
        key = canonical_flow_key(rec)
        if key not in port_of:
            port_of[key] = base_port + len(port_of)
            initiator_of[key] = (rec.src_ip, rec.src_port)
        sport = port_of[key]
        forward = (rec.src_ip, rec.src_port) == initiator_of[key]
        ts = rec.timestamp - t0 + time_offset
        if forward:
            rewritten = replace(rec, timestamp=ts, src_ip=src_ip, src_port=sport,
                                dst_ip=dst_ip)
        else:
            rewritten = replace(rec, timestamp=ts, src_ip=dst_ip,
                                dst_ip=src_ip, dst_port=sport)
        out.append((ts, rewritten))
    return out
