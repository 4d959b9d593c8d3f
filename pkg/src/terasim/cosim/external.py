"""Engine-side adapter for an external RESP server.

Instead of embedding its own server, the engine can point at any reachable
RESP-speaking store (a stock Redis instance included) and drive the same
publish/await cycle through plain SET/PUBLISH/GET commands. Semantics match
the embedded server: registered payloads are validated before transmission,
world timestamps are monotone, and control is polled until fresh or the
step deadline lapses.
"""

from __future__ import annotations

import socket
import threading
import time

from . import resp
from .schema import (
    KEY_ACTOR_INFO,
    KEY_AV_STATE,
    KEY_CONTROL,
    KEY_HEARTBEAT,
    ValidationError,
    canonical_payload,
    heartbeat_message,
    validate_message,
)

CONTROL_POLL_S = 0.005


class RespConnection:
    """Minimal blocking RESP client connection."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.parser = resp.ReplyParser()
        self.lock = threading.Lock()

    def command(self, *args: bytes | str):
        frame = resp.encode_array([
            a if isinstance(a, bytes) else a.encode() for a in args
        ])
        with self.lock:
            self.sock.sendall(frame)
            while True:
                reply = self.parser.next_reply()
                if reply is not None:
                    if isinstance(reply, tuple) and reply and reply[0] == "error":
                        raise RuntimeError(f"server error: {reply[1]}")
                    return reply
                data = self.sock.recv(65536)
                if not data:
                    raise ConnectionError("server closed the connection")
                self.parser.feed(data)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class ExternalCosim:
    """Drop-in replacement for the embedded server's engine-facing API."""

    def __init__(self, address: str, password: str | None = None):
        host, _, port = address.partition(":")
        self.host = host
        self.port = int(port or 6379)
        self.password = password
        # the engine acts as the traffic simulator and, absent a physics
        # simulator, as the physics host; each identity gets its own
        # authenticated connection so the ownership rule stays meaningful
        self._conns: dict[str, RespConnection] = {}
        self._last_world_ts = -1.0
        self.invalid_messages = 0
        self.status = "idle"
        self._heartbeat_stop = threading.Event()
        self._heartbeat_thread: threading.Thread | None = None

    def start_heartbeat(self) -> None:
        if self._heartbeat_thread is not None:
            return

        def beat():
            while not self._heartbeat_stop.wait(1.0):
                try:
                    self.publish_heartbeat(self.status)
                except (OSError, RuntimeError, ConnectionError):
                    return

        self._heartbeat_thread = threading.Thread(target=beat, daemon=True)
        self._heartbeat_thread.start()

    def _connection(self, platform: str = "terasim") -> RespConnection:
        conn = self._conns.get(platform)
        if conn is None:
            conn = RespConnection(self.host, self.port)
            conn.command("AUTH", platform, self.password or "")
            self._conns[platform] = conn
        return conn

    def close(self) -> None:
        self._heartbeat_stop.set()
        for conn in self._conns.values():
            conn.close()
        self._conns.clear()

    stop = close  # lifecycle parity with the embedded server

    def _set_and_notify(self, key: str, message: dict, platform: str = "terasim") -> None:
        payload = canonical_payload(message)
        validate_message(key, payload)  # validated before transmission
        conn = self._connection(platform)
        conn.command("SET", key, payload)
        conn.command("PUBLISH", key, payload)

    def publish_world(self, message: dict) -> None:
        ts = message["header"]["timestamp"]
        if ts < self._last_world_ts:
            raise ValidationError("$.header.timestamp",
                                  "world timestamps must be non-decreasing")
        self._last_world_ts = ts
        self._set_and_notify(KEY_ACTOR_INFO, message)

    def publish_av_state(self, message: dict) -> None:
        self._set_and_notify(KEY_AV_STATE, message, platform="physics-sim")

    def publish_heartbeat(self, status: str) -> None:
        self._set_and_notify(KEY_HEARTBEAT, heartbeat_message(time.time(), status))

    def await_control(self, min_timestamp: float, deadline: float) -> tuple[dict | None, bool]:
        """Poll the control key until a fresh validated command appears."""
        end = time.monotonic() + deadline
        stale_seen = False
        conn = self._connection()
        while True:
            raw = conn.command("GET", KEY_CONTROL)
            if isinstance(raw, bytes):
                try:
                    doc = validate_message(KEY_CONTROL, raw)
                except ValidationError:
                    self.invalid_messages += 1
                    doc = None
                if doc is not None:
                    if doc["header"]["timestamp"] >= min_timestamp:
                        return doc, stale_seen
                    stale_seen = True
            remaining = end - time.monotonic()
            if remaining <= 0:
                return None, stale_seen
            time.sleep(min(CONTROL_POLL_S, remaining))
