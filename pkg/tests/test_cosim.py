import json
import socket
import threading
import time

import numpy as np
import pytest

from terasim.cosim.resp import ReplyParser, RequestParser, ProtocolError, encode_array
from terasim.cosim.schema import (
    ValidationError,
    actor_state_message,
    canonical_payload,
    control_message,
    validate_message,
)
from terasim.cosim.server import CosimServer


class Client:
    """Raw-socket RESP client for byte-level protocol checks."""

    def __init__(self, host, port):
        self.sock = socket.create_connection((host, port), timeout=5.0)
        self.parser = ReplyParser()

    def send_raw(self, data: bytes):
        self.sock.sendall(data)

    def command(self, *args):
        frame = encode_array([a.encode() if isinstance(a, str) else a for a in args])
        self.sock.sendall(frame)
        return self.reply()

    def reply(self, timeout=5.0):
        deadline = time.monotonic() + timeout
        while True:
            value = self.parser.next_reply()
            if value is not None:
                return value
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("no reply")
            self.sock.settimeout(remaining)
            data = self.sock.recv(65536)
            if not data:
                raise ConnectionError("closed")
            self.parser.feed(data)

    def close(self):
        self.sock.close()


@pytest.fixture
def server():
    srv = CosimServer(port=0)
    srv.start()
    yield srv
    srv.stop()


@pytest.fixture
def auth_server():
    srv = CosimServer(port=0, password="sesame")
    srv.start()
    yield srv
    srv.stop()


def sample_world(ts=1.0):
    return actor_state_message(ts, [
        {"id": "av", "type": "AV", "x": 1.0, "y": 2.0, "heading": 0.0,
         "speed": 10.0, "accel": 0.0, "length": 4.8, "width": 1.9},
    ])


class TestByteLevelProtocol:
    def test_ping_pong_bytes(self, server):
        c = Client(server.host, server.port)
        c.send_raw(b"*1\r\n$4\r\nPING\r\n")
        buf = c.sock.recv(64)
        assert buf == b"+PONG\r\n"
        c.close()

    def test_inline_ping(self, server):
        c = Client(server.host, server.port)
        c.send_raw(b"PING\r\n")
        assert c.sock.recv(64) == b"+PONG\r\n"
        c.close()

    def test_set_get_byte_exact(self, server):
        c = Client(server.host, server.port)
        c.send_raw(b"*3\r\n$3\r\nSET\r\n$1\r\nk\r\n$5\r\nhello\r\n")
        assert c.sock.recv(64) == b"+OK\r\n"
        c.send_raw(b"*2\r\n$3\r\nGET\r\n$1\r\nk\r\n")
        assert c.sock.recv(64) == b"$5\r\nhello\r\n"
        c.close()

    def test_get_missing_is_null_bulk(self, server):
        c = Client(server.host, server.port)
        c.send_raw(b"*2\r\n$3\r\nGET\r\n$4\r\nnope\r\n")
        assert c.sock.recv(64) == b"$-1\r\n"
        c.close()

    def test_binary_safe_values(self, server):
        c = Client(server.host, server.port)
        payload = bytes(range(256))
        assert c.command("SET", "bin", payload) == "OK"
        assert c.command("GET", "bin") == payload
        c.close()

    def test_del_returns_count(self, server):
        c = Client(server.host, server.port)
        c.command("SET", "a", "1")
        c.command("SET", "b", "2")
        assert c.command("DEL", "a", "b", "missing") == 2
        c.close()

    def test_unknown_command_is_error_and_connection_survives(self, server):
        c = Client(server.host, server.port)
        reply = c.command("FLUSHALL")
        assert reply[0] == "error"
        assert "unknown command" in reply[1]
        assert c.command("PING") == "PONG"
        c.close()

    def test_malformed_frame_error_then_recovery(self, server):
        c = Client(server.host, server.port)
        c.send_raw(b"*zzz\r\n")
        reply = c.reply()
        assert reply[0] == "error" and "Protocol error" in reply[1]
        assert c.command("PING") == "PONG"
        c.close()


class TestPubSub:
    def test_subscribe_publish_in_order(self, server):
        sub = Client(server.host, server.port)
        assert sub.command("SUBSCRIBE", "news") == [b"subscribe", b"news", 1]
        pub = Client(server.host, server.port)
        assert pub.command("PUBLISH", "news", "one") == 1
        assert pub.command("PUBLISH", "news", "two") == 1
        assert sub.reply() == [b"message", b"news", b"one"]
        assert sub.reply() == [b"message", b"news", b"two"]
        sub.close()
        pub.close()

    def test_publish_without_subscribers_returns_zero(self, server):
        c = Client(server.host, server.port)
        assert c.command("PUBLISH", "void", "x") == 0
        c.close()

    def test_unsubscribe(self, server):
        c = Client(server.host, server.port)
        c.command("SUBSCRIBE", "a")
        assert c.command("UNSUBSCRIBE", "a") == [b"unsubscribe", b"a", 0]
        c.close()


class TestAuth:
    def test_commands_require_auth_when_password_set(self, auth_server):
        c = Client(auth_server.host, auth_server.port)
        reply = c.command("SET", "k", "v")
        assert reply[0] == "error" and "NOAUTH" in reply[1]
        assert c.command("AUTH", "sesame") == "OK"
        assert c.command("SET", "k", "v") == "OK"
        c.close()

    def test_wrong_password_rejected(self, auth_server):
        c = Client(auth_server.host, auth_server.port)
        reply = c.command("AUTH", "wrong")
        assert reply[0] == "error" and "WRONGPASS" in reply[1]
        c.close()

    def test_two_arg_auth_sets_platform(self, auth_server):
        c = Client(auth_server.host, auth_server.port)
        assert c.command("AUTH", "av-stack", "sesame") == "OK"
        msg = canonical_payload(control_message(1.0, {"target_accel": 0.5,
                                                      "target_lane_offset": 0.0}))
        assert c.command("SET", "av-control-info", msg) == "OK"
        c.close()


class TestOwnership:
    def test_cross_platform_write_rejected(self, server):
        c = Client(server.host, server.port)
        c.command("AUTH", "av-stack", "")
        payload = canonical_payload(sample_world())
        reply = c.command("SET", "terasim-actor-info", payload)
        assert reply[0] == "error" and "OWNERSHIP" in reply[1]
        assert server.get_key("terasim-actor-info") is None
        c.close()

    def test_owner_write_accepted(self, server):
        c = Client(server.host, server.port)
        c.command("AUTH", "terasim", "")
        payload = canonical_payload(sample_world())
        assert c.command("SET", "terasim-actor-info", payload) == "OK"
        assert server.get_key("terasim-actor-info") == payload
        c.close()

    def test_anonymous_cannot_write_registered_keys(self, server):
        c = Client(server.host, server.port)
        payload = canonical_payload(sample_world())
        reply = c.command("SET", "av-state-info", payload)
        assert reply[0] == "error" and "OWNERSHIP" in reply[1]
        c.close()

    def test_unregistered_keys_are_open(self, server):
        c = Client(server.host, server.port)
        assert c.command("SET", "scratch", "anything") == "OK"
        c.close()


class TestValidationAtSet:
    def test_invalid_payload_rejected_and_not_stored(self, server):
        c = Client(server.host, server.port)
        c.command("AUTH", "terasim", "")
        bad = dict(sample_world())
        del bad["actors"][0]["heading"]
        reply = c.command("SET", "terasim-actor-info", canonical_payload(bad))
        assert reply[0] == "error"
        assert "actors[0].heading" in reply[1]
        assert server.get_key("terasim-actor-info") is None
        assert server.invalid_messages == 1
        c.close()

    def test_last_writer_wins(self, server):
        c = Client(server.host, server.port)
        c.command("AUTH", "terasim", "")
        first = canonical_payload(sample_world(1.0))
        second = canonical_payload(sample_world(2.0))
        c.command("SET", "terasim-actor-info", first)
        c.command("SET", "terasim-actor-info", second)
        assert c.command("GET", "terasim-actor-info") == second
        c.close()


class TestSchemas:
    def test_valid_actor_message(self):
        doc = validate_message("terasim-actor-info", canonical_payload(sample_world()))
        assert len(doc["actors"]) == 1

    def test_three_actor_message(self):
        msg = actor_state_message(2.0, [
            {"id": f"v{i}", "type": "CAR", "x": 0.0, "y": 0.0, "heading": 0.0,
             "speed": 0.0, "accel": 0.0, "length": 4.0, "width": 2.0}
            for i in range(3)
        ])
        doc = validate_message("terasim-actor-info", canonical_payload(msg))
        assert len(doc["actors"]) == 3

    def test_missing_heading_names_path(self):
        msg = sample_world()
        del msg["actors"][0]["heading"]
        with pytest.raises(ValidationError) as err:
            validate_message("terasim-actor-info", canonical_payload(msg))
        assert err.value.path == "$.actors[0].heading"

    def test_duplicate_actor_id_rejected(self):
        msg = sample_world()
        msg["actors"].append(dict(msg["actors"][0]))
        with pytest.raises(ValidationError) as err:
            validate_message("terasim-actor-info", canonical_payload(msg))
        assert "duplicate" in str(err.value)

    def test_nan_rejected(self):
        msg = sample_world()
        raw = canonical_payload(msg).replace(b'"speed":10.0', b'"speed":NaN')
        with pytest.raises(ValidationError):
            validate_message("terasim-actor-info", raw)

    def test_unknown_actor_type_rejected(self):
        msg = sample_world()
        msg["actors"][0]["type"] = "HOVERCRAFT"
        with pytest.raises(ValidationError):
            validate_message("terasim-actor-info", canonical_payload(msg))

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            validate_message("mystery-key", b"{}")

    def test_control_requires_exactly_one_form(self):
        both = control_message(1.0, {"throttle": 0.1, "brake": 0.0, "steering": 0.0,
                                     "target_accel": 1.0, "target_lane_offset": 0.0})
        with pytest.raises(ValidationError):
            validate_message("av-control-info", canonical_payload(both))
        neither = control_message(1.0, {})
        with pytest.raises(ValidationError):
            validate_message("av-control-info", canonical_payload(neither))

    def test_control_ranges(self):
        over = control_message(1.0, {"throttle": 1.5, "brake": 0.0, "steering": 0.0})
        with pytest.raises(ValidationError):
            validate_message("av-control-info", canonical_payload(over))

    def test_canonical_roundtrip(self):
        payload = canonical_payload(sample_world())
        doc = validate_message("terasim-actor-info", payload)
        assert canonical_payload(doc) == payload

    def test_schema_version_enforced(self):
        msg = sample_world()
        msg["header"]["schema_version"] = "9.9"
        with pytest.raises(ValidationError):
            validate_message("terasim-actor-info", canonical_payload(msg))

    def test_published_schema_documents_accept_canonical_payloads(self):
        jsonschema = pytest.importorskip("jsonschema")
        import pathlib
        schemas = pathlib.Path(__file__).resolve().parent.parent / "schemas"
        actor_schema = json.loads((schemas / "actor_state.schema.json").read_text())
        jsonschema.validate(sample_world(), actor_schema)
        control_schema = json.loads((schemas / "control.schema.json").read_text())
        jsonschema.validate(
            control_message(1.0, {"target_accel": 1.0, "target_lane_offset": 0.0}),
            control_schema)
        bad = sample_world()
        del bad["actors"][0]["heading"]
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(bad, actor_schema)


class TestEngineFacingApi:
    def test_publish_world_sets_and_notifies(self, server):
        sub = Client(server.host, server.port)
        sub.command("SUBSCRIBE", "terasim-actor-info")
        server.publish_world(sample_world(1.0))
        server.publish_world(sample_world(2.0))
        first = sub.reply()
        second = sub.reply()
        assert first[0] == b"message"
        assert json.loads(first[2])["header"]["timestamp"] == 1.0
        assert json.loads(second[2])["header"]["timestamp"] == 2.0
        sub.close()

    def test_world_timestamps_must_be_monotone(self, server):
        server.publish_world(sample_world(5.0))
        with pytest.raises(ValidationError):
            server.publish_world(sample_world(4.0))

    def test_await_control_happy_path(self, server):
        def client():
            time.sleep(0.05)
            c = Client(server.host, server.port)
            c.command("AUTH", "av-stack", "")
            msg = control_message(10.0, {"target_accel": 1.25, "target_lane_offset": 0.0})
            c.command("SET", "av-control-info", canonical_payload(msg))
            c.close()

        threading.Thread(target=client).start()
        doc, stale = server.await_control(10.0, deadline=2.0)
        assert doc is not None
        assert doc["command"]["target_accel"] == 1.25
        assert not stale

    def test_await_control_timeout(self, server):
        t0 = time.monotonic()
        doc, stale = server.await_control(0.0, deadline=0.15)
        assert doc is None
        assert 0.12 <= time.monotonic() - t0 < 1.0

    def test_stale_command_reported(self, server):
        c = Client(server.host, server.port)
        c.command("AUTH", "av-stack", "")
        msg = control_message(1.0, {"target_accel": 0.0, "target_lane_offset": 0.0})
        c.command("SET", "av-control-info", canonical_payload(msg))
        doc, stale = server.await_control(5.0, deadline=0.1)
        assert doc is None
        assert stale
        c.close()

    def test_invalid_control_counted_and_ignored(self, server):
        c = Client(server.host, server.port)
        c.command("AUTH", "av-stack", "")
        reply = c.command("SET", "av-control-info", b"{not json")
        assert reply[0] == "error"
        assert server.invalid_messages == 1
        doc, _ = server.await_control(0.0, deadline=0.05)
        assert doc is None
        c.close()

    def test_heartbeat_payload_validates(self, server):
        server.publish_heartbeat("running")
        raw = server.get_key("terasim-heartbeat")
        doc = validate_message("terasim-heartbeat", raw)
        assert doc["status"] == "running"


class TestFuzz:
    def test_malformed_frames_never_crash_or_corrupt(self, server):
        good = Client(server.host, server.port)
        good.command("SET", "sentinel", "intact")
        rng = np.random.default_rng(1234)
        fuzz = Client(server.host, server.port)
        alphabet = b"*$+-:0123456789\r\n\x00\xffPINGSETGETabc"
        for i in range(2000):
            n = int(rng.integers(1, 64))
            frame = bytes(rng.choice(list(alphabet), size=n).tolist())
            try:
                fuzz.send_raw(frame)
            except OSError:
                fuzz = Client(server.host, server.port)
        # drain whatever error replies accumulated, then verify integrity
        time.sleep(0.1)
        assert good.command("GET", "sentinel") == b"intact"
        assert good.command("PING") == "PONG"
        good.close()
        fuzz.close()

    def test_request_parser_never_hangs_on_garbage(self):
        rng = np.random.default_rng(99)
        parser = RequestParser()
        for _ in range(500):
            n = int(rng.integers(1, 128))
            parser.feed(bytes(rng.integers(0, 256, size=n, dtype=np.uint8).tolist()))
            for _ in range(64):
                try:
                    if parser.next_request() is None:
                        break
                except ProtocolError:
                    continue


def test_weather_tag_forwarded_in_header(server):
    # environment tag rides along in the world header without touching dynamics
    msg = actor_state_message(1.0, [], weather="heavy_rain")
    payload = canonical_payload(msg)
    doc = validate_message("terasim-actor-info", payload)
    assert doc["header"]["weather"] == "heavy_rain"
    server.publish_world(msg)
    assert json.loads(server.get_key("terasim-actor-info"))["header"]["weather"] == "heavy_rain"
