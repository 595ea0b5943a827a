import threading
import time

import pytest

from flowguard.daemons import ControllerDaemon, SwitchDaemon
from flowguard.protocol import ActionKind
from tests.conftest import benign_stream, make_packet, syn_flood_stream


def stealth_stream(n_fwd=40, start=0.0):
    """Escalation-triggering flow: SYN every 2nd packet, sparse reverse ACKs."""
    t = start
    fwd = 0
    for _ in range(n_fwd):
        fwd += 1
        t += 0.03
        yield make_packet(ts=t, src="10.0.0.2", sport=3000, dst="10.0.0.4", dport=80,
                          total_len=200, syn=(fwd % 2 == 1), ack=(fwd % 2 == 0))
        if fwd % 3 == 0:
            yield make_packet(ts=t + 0.001, src="10.0.0.4", sport=80, dst="10.0.0.2",
                              dport=3000, total_len=40, ack=True)


@pytest.fixture()
def controller(handcrafted_bundle):
    daemon = ControllerDaemon(handcrafted_bundle, "127.0.0.1", 0)
    thread = threading.Thread(target=daemon.serve_forever, daemon=True)
    thread.start()
    yield daemon
    daemon.shutdown()
    thread.join(timeout=2.0)


class TestLoopback:
    def test_escalation_round_trip(self, handcrafted_bundle, controller):
        sw = SwitchDaemon(handcrafted_bundle, controller.address, switch_id=1)
        assert sw.connect(max_attempts=3)
        stats = sw.process(stealth_stream())
        deadline = time.time() + 5.0
        while sw.stats["installs"] < stats["reports"] and time.time() < deadline:
            time.sleep(0.02)
        sw.close()
        assert stats["reports"] >= 1
        assert sw.stats["installs"] >= 1
        # the controller's verdict for the stealth flow is Drop
        from flowguard.packets import canonical_flow_key

        key = canonical_flow_key(next(iter(stealth_stream())))
        entry = sw.switch.table.peek(key)
        assert entry is not None and entry.installed_action is ActionKind.DROP

    def test_benign_traffic_generates_no_reports(self, handcrafted_bundle, controller):
        sw = SwitchDaemon(handcrafted_bundle, controller.address, switch_id=2)
        assert sw.connect(max_attempts=3)
        stats = sw.process(benign_stream(n_data=60))
        sw.close()
        assert stats["reports"] == 0
        assert stats["dropped"] == 0

    def test_controller_serves_two_switches(self, handcrafted_bundle, controller):
        daemons = [SwitchDaemon(handcrafted_bundle, controller.address, switch_id=i)
                   for i in (1, 2)]
        for d in daemons:
            assert d.connect(max_attempts=3)
        for d in daemons:
            d.process(stealth_stream())
        deadline = time.time() + 5.0
        while controller.reports_seen < 2 and time.time() < deadline:
            time.sleep(0.02)
        for d in daemons:
            d.close()
        assert controller.reports_seen >= 2


class TestAutonomy:
    def test_local_drops_without_controller(self, handcrafted_bundle):
        # no controller anywhere: escalations are lost, mitigation still works
        sw = SwitchDaemon(handcrafted_bundle, ("127.0.0.1", 1), switch_id=1)
        assert not sw._connect_once()
        stats = sw.process(syn_flood_stream(n=40))
        assert stats["dropped"] >= 25
        sw.close()
