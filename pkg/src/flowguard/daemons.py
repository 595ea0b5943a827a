"""Live split deployment: a data-plane switch process and a controller
process exchanging wire-protocol messages over a stream socket.

The switch stays autonomous when the controller is unreachable: local
Attack drops keep working, escalations are simply lost until the
connection (re)establishes.  Framing errors poison a connection, which is
then closed and re-established, matching the protocol contract.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Iterable, Optional

from .bundle import ModelBundle
from .controller import Controller, ControllerConfig
from .datapath import DataPlaneSwitch, FlowAction
from .packets import PacketRecord
from .protocol import ActionInstall, FrameDecoder, ProtocolError, encode

log = logging.getLogger("flowguard")

RECONNECT_BACKOFF = (0.2, 0.5, 1.0, 2.0, 5.0)  # bounded, then stays at the cap


class SwitchDaemon:
    """Feeds a packet stream through the pipeline, escalating over TCP."""

    def __init__(self, bundle: ModelBundle, controller_addr: Optional[tuple[str, int]],
                 switch_id: int = 1):
        self.switch = DataPlaneSwitch(bundle, switch_id=switch_id)
        self.addr = controller_addr
        self._sock: Optional[socket.socket] = None
        self._reader: Optional[threading.Thread] = None
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self.stats = {"processed": 0, "forwarded": 0, "dropped": 0, "reports": 0,
                      "installs": 0, "send_failures": 0}

    # -- connection management ------------------------------------------------

    def _connect_once(self) -> bool:
        try:
            sock = socket.create_connection(self.addr, timeout=5.0)
        except OSError as exc:
            log.warning("controller %s unreachable: %s", self.addr, exc)
            return False
        sock.settimeout(None)
        self._sock = sock
        self._reader = threading.Thread(target=self._read_installs, daemon=True)
        self._reader.start()
        log.info("connected to controller at %s:%d", *self.addr)
        return True

    def connect(self, max_attempts: int = 5) -> bool:
        if self.addr is None:
            return False
        for attempt in range(max_attempts):
            if self._connect_once():
                return True
            delay = RECONNECT_BACKOFF[min(attempt, len(RECONNECT_BACKOFF) - 1)]
            time.sleep(delay)
        log.error("giving up on controller after %d attempts; running autonomously",
                  max_attempts)
        return False

    def close(self) -> None:
        self._stop.set()
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
            self._sock = None

    def _read_installs(self) -> None:
        decoder = FrameDecoder()
        sock = self._sock
        while not self._stop.is_set():
            try:
                chunk = sock.recv(4096)
            except OSError:
                return
            if not chunk:
                return
            try:
                msgs = decoder.feed(chunk)
            except ProtocolError as exc:
                log.error("poisoned control connection: %s", exc)
                return
            for msg, _ in msgs:
                if isinstance(msg, ActionInstall):
                    with self._lock:
                        self.switch.install_action(
                            msg.flow_key, FlowAction(msg.action, msg.ttl_packets),
                            time.monotonic(),
                        )
                    self.stats["installs"] += 1

    # -- packet loop --------------------------------------------------------

    def process(self, packets: Iterable[PacketRecord]) -> dict:
        for rec in packets:
            with self._lock:
                verdict = self.switch.process_packet(rec, rec.timestamp)
            self.stats["processed"] += 1
            if verdict.forwarded:
                self.stats["forwarded"] += 1
            else:
                self.stats["dropped"] += 1
            if verdict.report is not None:
                self.stats["reports"] += 1
                self._send(encode(verdict.report, self.switch.switch_id))
        return dict(self.stats)

    def _send(self, wire: bytes) -> None:
        if self._sock is None:
            self.stats["send_failures"] += 1
            return
        try:
            self._sock.sendall(wire)
        except OSError as exc:
            log.warning("report send failed (%s); reconnecting", exc)
            self.stats["send_failures"] += 1
            self.close()
            self._stop.clear()
            self.connect(max_attempts=2)


class ControllerDaemon:
    """Serves any number of switches; per-connection ordered handling."""

    def __init__(self, bundle: ModelBundle, host: str = "127.0.0.1", port: int = 0,
                 cfg: Optional[ControllerConfig] = None):
        self.controller = Controller(bundle=bundle, cfg=cfg or ControllerConfig())
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.reports_seen = 0
        self._count_lock = threading.Lock()

    def serve_forever(self, max_reports: Optional[int] = None) -> None:
        """Accept loop; returns after max_reports when given (test hook)."""
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            if max_reports is not None and self.reports_seen >= max_reports:
                break
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_one, args=(conn, peer), daemon=True)
            t.start()
            self._threads.append(t)
        self.shutdown()

    def _serve_one(self, conn: socket.socket, peer) -> None:
        log.info("switch connected from %s", peer)
        decoder = FrameDecoder()
        with conn:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(4096)
                except OSError:
                    return
                if not chunk:
                    return
                try:
                    msgs = decoder.feed(chunk)
                except ProtocolError as exc:
                    log.error("dropping poisoned connection from %s: %s", peer, exc)
                    return
                for report, switch_id in msgs:
                    install = self.controller.handle_feature_report(report)
                    try:
                        conn.sendall(encode(install, switch_id))
                    except OSError:
                        return
                    with self._count_lock:
                        self.reports_seen += 1

    def shutdown(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
