import numpy as np
import pytest

from flowguard.packets import PacketRecord, TcpFlags, ip_to_int


def make_packet(
    ts=0.0,
    src="10.0.0.1",
    sport=40000,
    dst="10.0.0.4",
    dport=5001,
    proto=6,
    total_len=40,
    header_len=None,
    syn=False,
    ack=False,
    fin=False,
    rst=False,
    psh=False,
    window=8192,
):
    if header_len is None:
        header_len = 40 if proto == 6 else 28
    flags = TcpFlags(syn=syn, ack=ack, fin=fin, rst=rst, psh=psh) if proto == 6 else TcpFlags()
    return PacketRecord(
        timestamp=ts,
        src_ip=ip_to_int(src) if isinstance(src, str) else src,
        dst_ip=ip_to_int(dst) if isinstance(dst, str) else dst,
        src_port=sport,
        dst_port=dport,
        protocol=proto,
        total_len=total_len,
        header_len=header_len,
        payload_len=total_len - header_len,
        tcp_flags=flags,
        tcp_window=window if proto == 6 else 0,
    )


@pytest.fixture
def handcrafted_bundle():
    from flowguard.bundle import make_handcrafted_bundle

    return make_handcrafted_bundle()


@pytest.fixture(scope="session")
def scenario_off_run():
    """Full 30 s staged scenario, mitigation off: (timeline, elapsed seconds)."""
    import time

    from flowguard.simulation import Scenario, run_scenario

    t0 = time.perf_counter()
    timeline = run_scenario(Scenario(mitigation=False, seed=1))
    return timeline, time.perf_counter() - t0


@pytest.fixture(scope="session")
def scenario_on_run():
    """Full 30 s staged scenario, mitigation on: (timeline, elapsed seconds)."""
    import time

    from flowguard.bundle import make_handcrafted_bundle
    from flowguard.simulation import Scenario, run_scenario

    t0 = time.perf_counter()
    timeline = run_scenario(Scenario(mitigation=True, seed=1), make_handcrafted_bundle())
    return timeline, time.perf_counter() - t0


def benign_stream(n_data=60, start=0.0, data_gap=0.0058, src="10.0.0.1", sport=40000,
                  dst="10.0.0.4", dport=5001):
    """Strict data-data-ack cycle: 1460-byte uploads, 40-byte reverse ACKs."""
    t = start
    for i in range(n_data):
        t += data_gap
        yield make_packet(ts=t, src=src, sport=sport, dst=dst, dport=dport,
                          total_len=1460, syn=(i == 0), ack=(i > 0))
        if (i + 1) % 2 == 0:
            yield make_packet(ts=t + 1e-4, src=dst, sport=dport, dst=src, dport=sport,
                              total_len=40, ack=True)


def syn_flood_stream(n=30, start=10.0, gap=0.0625, src="10.0.0.2", sport=1000,
                     dst="10.0.0.4", dport=80):
    for i in range(n):
        yield make_packet(ts=start + i * gap, src=src, sport=sport, dst=dst, dport=dport,
                          total_len=40, syn=True)


def build_eval_fixture(tmp_path, n_benign=6, n_syn=10, n_udp=8, n_stealth=4):
    """A labeled mixed trace: every flow runs long enough to either exit
    confidently at the switch or escalate at least once."""
    from flowguard import traffic
    from flowguard.evaluate import format_label_line
    from flowguard.packets import canonical_flow_key, write_pcap

    packets = []
    labels = {}
    for i in range(n_benign):
        flow_pkts = [
            rec for _, rec in traffic.generate_benign(1e6, 3.0, seed=100 + i)
        ]
        rebased = []
        for rec in flow_pkts:
            from dataclasses import replace

            sport = 40000 + i if rec.src_port == traffic.BENIGN_PORT else rec.src_port
            dport = 40000 + i if rec.dst_port == traffic.BENIGN_PORT else rec.dst_port
            rebased.append(replace(rec, src_port=sport, dst_port=dport))
        packets += rebased
        labels[canonical_flow_key(rebased[0])] = "benign"
    for t, rec in traffic.generate_syn_flood(400.0, n_syn, 3.0, seed=7, start=0.2):
        packets.append(rec)
        labels[canonical_flow_key(rec)] = "attack"
    for t, rec in traffic.generate_udp_flood(300.0, n_udp, 3.0, seed=8, start=0.1):
        packets.append(rec)
        labels[canonical_flow_key(rec)] = "attack"
    for t, rec in traffic.generate_stealth_flows(n_stealth, 30.0, 3.0, seed=9, start=0.3):
        packets.append(rec)
        labels[canonical_flow_key(rec)] = "attack"
    packets.sort(key=lambda r: r.timestamp)
    pcap = tmp_path / "eval.pcap"
    write_pcap(pcap, packets)
    label_path = tmp_path / "eval.labels"
    label_path.write_text(
        "\n".join(format_label_line(k, v) for k, v in labels.items()) + "\n"
    )
    return pcap, label_path, labels
