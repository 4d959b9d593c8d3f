"""Embedded RESP2-compatible key-value/pub-sub server.

Stock Redis clients connect over TCP and use PING/AUTH/SET/GET/DEL/
SUBSCRIBE/PUBLISH against the well-known co-simulation keys. The store is
last-writer-wins per key; registered keys validate every payload before
accepting it and enforce platform ownership, so one corrupted or misdirected
message never propagates. Subscription fan-out uses bounded per-subscriber
queues that drop the oldest notification under backpressure; GET remains the
authoritative state. The engine talks to the same store in-process.
"""

from __future__ import annotations

import socket
import threading
import time
from collections import deque

from . import resp
from .schema import (
    DEFAULT_OWNERSHIP,
    ValidationError,
    canonical_payload,
    heartbeat_message,
    validate_message,
    KEY_CONTROL,
)

SUBSCRIBER_QUEUE_LIMIT = 256


class OwnershipError(Exception):
    pass


class _Connection:
    def __init__(self, sock: socket.socket, server: "CosimServer"):
        self.sock = sock
        self.server = server
        self.parser = resp.RequestParser()
        self.platform: str | None = None
        self.authenticated = server.password is None
        self.subscriptions: set[str] = set()
        self.write_lock = threading.Lock()
        self.queue: deque[bytes] = deque()
        self.queue_cond = threading.Condition()
        self.closed = False
        self.pump_thread: threading.Thread | None = None

    def send(self, data: bytes) -> None:
        if self.closed:
            return
        try:
            with self.write_lock:
                self.sock.sendall(data)
        except OSError:
            self.close()

    def push(self, data: bytes) -> None:
        """Queue a pub/sub notification; oldest dropped under backpressure."""
        with self.queue_cond:
            if len(self.queue) >= SUBSCRIBER_QUEUE_LIMIT:
                self.queue.popleft()
            self.queue.append(data)
            if self.pump_thread is None:
                self.pump_thread = threading.Thread(target=self._pump, daemon=True)
                self.pump_thread.start()
            self.queue_cond.notify()

    def _pump(self) -> None:
        while True:
            with self.queue_cond:
                while not self.queue and not self.closed:
                    self.queue_cond.wait(0.5)
                if self.closed:
                    return
                data = self.queue.popleft()
            self.send(data)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        with self.queue_cond:
            self.queue_cond.notify_all()
        try:
            self.sock.close()
        except OSError:
            pass
        self.server._drop_connection(self)


class CosimServer:
    """Threaded TCP server plus the engine-facing synchronization API."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        password: str | None = None,
        ownership: dict[str, str] | None = None,
        validate_registered: bool = True,
    ):
        self.host = host
        self.port = port
        self.password = password
        self.ownership = dict(DEFAULT_OWNERSHIP if ownership is None else ownership)
        self.validate_registered = validate_registered
        self._store: dict[str, bytes] = {}
        self._store_lock = threading.Lock()
        self._subs: dict[str, list[_Connection]] = {}
        self._subs_lock = threading.Lock()
        self._connections: set[_Connection] = set()
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._running = False
        self._last_world_ts = -1.0
        self._control_cond = threading.Condition()
        self._control_doc: dict | None = None
        self._control_seq = 0
        self.invalid_messages = 0
        self.rejected_writes = 0
        self.status = "idle"
        self._heartbeat_thread: threading.Thread | None = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> tuple[str, int]:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen(64)
        self._listener = listener
        self.host, self.port = listener.getsockname()
        self._running = True
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self.host, self.port

    def start_heartbeat(self) -> None:
        if self._heartbeat_thread is not None:
            return

        def beat():
            while self._running:
                self.publish_heartbeat(self.status)
                time.sleep(1.0)

        self._heartbeat_thread = threading.Thread(target=beat, daemon=True)
        self._heartbeat_thread.start()

    def stop(self) -> None:
        self._running = False
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for conn in list(self._connections):
            conn.close()

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while self._running:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(sock, self)
            self._connections.add(conn)
            threading.Thread(target=self._serve_connection, args=(conn,), daemon=True).start()

    def _drop_connection(self, conn: _Connection) -> None:
        self._connections.discard(conn)
        with self._subs_lock:
            for channel in conn.subscriptions:
                subs = self._subs.get(channel)
                if subs and conn in subs:
                    subs.remove(conn)

    # -- command handling -------------------------------------------------------

    def _serve_connection(self, conn: _Connection) -> None:
        sock = conn.sock
        while self._running and not conn.closed:
            try:
                data = sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            conn.parser.feed(data)
            while True:
                try:
                    args = conn.parser.next_request()
                except resp.ProtocolError as exc:
                    conn.send(resp.encode_error(f"ERR Protocol error: {exc}"))
                    continue
                if args is None:
                    break
                try:
                    self._dispatch(conn, args)
                except Exception as exc:  # never let one command kill the connection
                    conn.send(resp.encode_error(f"ERR internal: {type(exc).__name__}"))
        conn.close()

    def _dispatch(self, conn: _Connection, args: list[bytes]) -> None:
        name = args[0].decode("utf-8", "replace").upper()
        if name == "PING":
            conn.send(resp.encode_simple("PONG"))
            return
        if name == "QUIT":
            conn.send(resp.encode_simple("OK"))
            conn.close()
            return
        if name == "AUTH":
            self._cmd_auth(conn, args[1:])
            return
        if name == "HELLO":
            self._cmd_hello(conn, args[1:])
            return
        if name in ("CLIENT", "SELECT"):
            conn.send(resp.encode_simple("OK"))
            return
        if name == "INFO":
            conn.send(resp.encode_bulk("# Server\r\nrole:master\r\n"))
            return
        if not conn.authenticated:
            conn.send(resp.encode_error("NOAUTH Authentication required."))
            return
        if name == "SET":
            self._cmd_set(conn, args[1:])
        elif name == "GET":
            self._cmd_get(conn, args[1:])
        elif name == "DEL":
            self._cmd_del(conn, args[1:])
        elif name == "SUBSCRIBE":
            self._cmd_subscribe(conn, args[1:])
        elif name == "UNSUBSCRIBE":
            self._cmd_unsubscribe(conn, args[1:])
        elif name == "PUBLISH":
            self._cmd_publish(conn, args[1:])
        else:
            conn.send(resp.encode_error(f"ERR unknown command '{name}'"))

    def _cmd_auth(self, conn: _Connection, args: list[bytes]) -> None:
        if len(args) == 1:
            password = args[0].decode("utf-8", "replace")
            platform = None
        elif len(args) == 2:
            platform = args[0].decode("utf-8", "replace")
            password = args[1].decode("utf-8", "replace")
        else:
            conn.send(resp.encode_error("ERR wrong number of arguments for 'auth' command"))
            return
        if self.password is not None and password != self.password:
            conn.send(resp.encode_error("WRONGPASS invalid username-password pair"))
            return
        conn.authenticated = True
        if platform is not None:
            conn.platform = platform
        conn.send(resp.encode_simple("OK"))

    def _cmd_hello(self, conn: _Connection, args: list[bytes]) -> None:
        proto = 2
        i = 0
        if args and args[0].isdigit():
            proto = int(args[0])
            i = 1
        while i < len(args):
            opt = args[i].decode("utf-8", "replace").upper()
            if opt == "AUTH" and len(args) >= i + 3:
                self._cmd_auth_inline(conn, args[i + 1], args[i + 2])
                if not conn.authenticated:
                    conn.send(resp.encode_error("WRONGPASS invalid username-password pair"))
                    return
                i += 3
            elif opt == "SETNAME" and i + 1 < len(args):
                i += 2
            else:
                i += 1
        if proto != 2:
            conn.send(resp.encode_error(
                "NOPROTO sorry, this protocol version is not supported"))
            return
        conn.send(resp.encode_array([
            b"server", b"terasim-cosim",
            b"version", b"0.1.0",
            b"proto", 2,
            b"id", 1,
            b"mode", b"standalone",
            b"role", b"master",
            b"modules", [],
        ]))

    def _cmd_auth_inline(self, conn: _Connection, user: bytes, password: bytes) -> None:
        platform = user.decode("utf-8", "replace")
        if self.password is not None and password.decode("utf-8", "replace") != self.password:
            return
        conn.authenticated = True
        # "default" is the implicit Redis user, not a platform identity
        if platform != "default":
            conn.platform = platform

    def _cmd_set(self, conn: _Connection, args: list[bytes]) -> None:
        if len(args) < 2:
            conn.send(resp.encode_error("ERR wrong number of arguments for 'set' command"))
            return
        key = args[0].decode("utf-8", "replace")
        try:
            self.set_key(key, args[1], conn.platform)
        except OwnershipError as exc:
            self.rejected_writes += 1
            conn.send(resp.encode_error(f"OWNERSHIP {exc}"))
            return
        except ValidationError as exc:
            self.invalid_messages += 1
            conn.send(resp.encode_error(f"INVALID {exc}"))
            return
        conn.send(resp.encode_simple("OK"))

    def _cmd_get(self, conn: _Connection, args: list[bytes]) -> None:
        if len(args) != 1:
            conn.send(resp.encode_error("ERR wrong number of arguments for 'get' command"))
            return
        key = args[0].decode("utf-8", "replace")
        with self._store_lock:
            value = self._store.get(key)
        conn.send(resp.encode_bulk(value))

    def _cmd_del(self, conn: _Connection, args: list[bytes]) -> None:
        removed = 0
        for raw in args:
            key = raw.decode("utf-8", "replace")
            owner = self.ownership.get(key)
            if owner is not None and conn.platform != owner:
                self.rejected_writes += 1
                conn.send(resp.encode_error(
                    f"OWNERSHIP key {key!r} is owned by platform {owner!r}"))
                return
            with self._store_lock:
                if key in self._store:
                    del self._store[key]
                    removed += 1
        conn.send(resp.encode_integer(removed))

    def _cmd_subscribe(self, conn: _Connection, args: list[bytes]) -> None:
        if not args:
            conn.send(resp.encode_error("ERR wrong number of arguments for 'subscribe' command"))
            return
        for raw in args:
            channel = raw.decode("utf-8", "replace")
            with self._subs_lock:
                subs = self._subs.setdefault(channel, [])
                if conn not in subs:
                    subs.append(conn)
                conn.subscriptions.add(channel)
            conn.push(resp.encode_array([b"subscribe", raw, len(conn.subscriptions)]))

    def _cmd_unsubscribe(self, conn: _Connection, args: list[bytes]) -> None:
        channels = [raw.decode("utf-8", "replace") for raw in args] \
            or sorted(conn.subscriptions)
        for channel in channels:
            with self._subs_lock:
                subs = self._subs.get(channel)
                if subs and conn in subs:
                    subs.remove(conn)
                conn.subscriptions.discard(channel)
            conn.push(resp.encode_array(
                [b"unsubscribe", channel.encode(), len(conn.subscriptions)]))

    def _cmd_publish(self, conn: _Connection, args: list[bytes]) -> None:
        if len(args) != 2:
            conn.send(resp.encode_error("ERR wrong number of arguments for 'publish' command"))
            return
        channel = args[0].decode("utf-8", "replace")
        owner = self.ownership.get(channel)
        if owner is not None and conn.platform != owner:
            self.rejected_writes += 1
            conn.send(resp.encode_error(
                f"OWNERSHIP channel {channel!r} is owned by platform {owner!r}"))
            return
        count = self._fanout(channel, args[1])
        conn.send(resp.encode_integer(count))

    def _fanout(self, channel: str, payload: bytes) -> int:
        frame = resp.encode_array([b"message", channel.encode(), payload])
        with self._subs_lock:
            subs = list(self._subs.get(channel, ()))
        for sub in subs:
            sub.push(frame)
        return len(subs)

    # -- store operations shared by TCP clients and the engine ----------------

    def set_key(self, key: str, payload: bytes, platform: str | None) -> None:
        owner = self.ownership.get(key)
        if owner is not None and platform != owner:
            raise OwnershipError(f"key {key!r} is owned by platform {owner!r}; "
                                 "platforms must only modify their own traffic information")
        doc = None
        if owner is not None and self.validate_registered:
            doc = validate_message(key, payload)
        with self._store_lock:
            self._store[key] = bytes(payload)
        if key == KEY_CONTROL and doc is not None:
            with self._control_cond:
                self._control_doc = doc
                self._control_seq += 1
                self._control_cond.notify_all()

    def get_key(self, key: str) -> bytes | None:
        with self._store_lock:
            return self._store.get(key)

    def publish(self, channel: str, payload: bytes, platform: str | None) -> int:
        owner = self.ownership.get(channel)
        if owner is not None and platform != owner:
            raise OwnershipError(f"channel {channel!r} is owned by platform {owner!r}")
        return self._fanout(channel, payload)

    # -- engine-facing synchronization ------------------------------------------

    def publish_world(self, message: dict) -> None:
        ts = message["header"]["timestamp"]
        if ts < self._last_world_ts:
            raise ValidationError("$.header.timestamp",
                                  "world timestamps must be non-decreasing")
        self._last_world_ts = ts
        payload = canonical_payload(message)
        self.set_key("terasim-actor-info", payload, "terasim")
        self._fanout("terasim-actor-info", payload)

    def publish_av_state(self, message: dict) -> None:
        payload = canonical_payload(message)
        self.set_key("av-state-info", payload, "physics-sim")
        self._fanout("av-state-info", payload)

    def publish_heartbeat(self, status: str) -> None:
        payload = canonical_payload(heartbeat_message(time.time(), status))
        self.set_key("terasim-heartbeat", payload, "terasim")
        self._fanout("terasim-heartbeat", payload)

    def await_control(self, min_timestamp: float, deadline: float) -> tuple[dict | None, bool]:
        """Newest validated control stamped at or after min_timestamp.

        Returns (message, stale_seen); message is None on timeout. A command
        stamped before min_timestamp is reported stale and never returned, so
        the engine holds its previous control.
        """
        end = time.monotonic() + deadline
        stale_seen = False
        with self._control_cond:
            while True:
                if self._control_doc is not None:
                    ts = self._control_doc["header"]["timestamp"]
                    if ts >= min_timestamp:
                        return self._control_doc, stale_seen
                    stale_seen = True
                remaining = end - time.monotonic()
                if remaining <= 0:
                    return None, stale_seen
                self._control_cond.wait(remaining)
