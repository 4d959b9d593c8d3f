"""Message schemas for the co-simulation keys, with field-path validation.

Payloads are canonical JSON: sorted keys, compact separators, shortest
round-trip float formatting, no NaN/Infinity. Canonicalization makes digests
reproducible and lets serialize(parse(payload)) == payload hold for canonical
inputs. The formal schema documents live in ``schemas/`` at the repo root.
"""

from __future__ import annotations

import json
import math

SCHEMA_VERSION = "1.0"

ACTOR_TYPES = {"CAR", "TRUCK", "CYCLIST", "PEDESTRIAN", "AV", "CONE", "SIGN"}
SIGNAL_STATES = {"GREEN", "YELLOW", "RED"}

KEY_AV_STATE = "av-state-info"
KEY_ACTOR_INFO = "terasim-actor-info"
KEY_SENSOR_INFO = "physics-sim-sensor-info"
KEY_CONTROL = "av-control-info"
KEY_HEARTBEAT = "terasim-heartbeat"

WELL_KNOWN_KEYS = (
    KEY_AV_STATE,
    KEY_ACTOR_INFO,
    KEY_SENSOR_INFO,
    KEY_CONTROL,
    KEY_HEARTBEAT,
)

# Which platform may write each key. The traffic simulator also plays the
# physics host whenever no physics simulator is attached, so its embedded
# connections authenticate as both identities.
DEFAULT_OWNERSHIP = {
    KEY_AV_STATE: "physics-sim",
    KEY_ACTOR_INFO: "terasim",
    KEY_SENSOR_INFO: "physics-sim",
    KEY_CONTROL: "av-stack",
    KEY_HEARTBEAT: "terasim",
}


class ValidationError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def canonical_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode()


def _parse_json(payload: bytes):
    try:
        return json.loads(payload)
    except json.JSONDecodeError as exc:
        raise ValidationError("$", f"invalid JSON: {exc}")


def _finite_number(obj: dict, key: str, path: str) -> float:
    if key not in obj:
        raise ValidationError(f"{path}.{key}", "missing required field")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{path}.{key}", "must be a number")
    if not math.isfinite(value):
        raise ValidationError(f"{path}.{key}", "must be finite")
    return float(value)


def _string(obj: dict, key: str, path: str) -> str:
    if key not in obj:
        raise ValidationError(f"{path}.{key}", "missing required field")
    if not isinstance(obj[key], str):
        raise ValidationError(f"{path}.{key}", "must be a string")
    return obj[key]


def _check_header(doc: dict, path: str = "$") -> None:
    if not isinstance(doc, dict):
        raise ValidationError(path, "must be an object")
    if "header" not in doc:
        raise ValidationError(f"{path}.header", "missing required field")
    header = doc["header"]
    if not isinstance(header, dict):
        raise ValidationError(f"{path}.header", "must be an object")
    ts = _finite_number(header, "timestamp", f"{path}.header")
    if ts < 0:
        raise ValidationError(f"{path}.header.timestamp", "must be >= 0")
    _string(header, "platform", f"{path}.header")
    version = _string(header, "schema_version", f"{path}.header")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"{path}.header.schema_version",
                              f"unrecognized version {version!r}")


def _check_actor_state(doc: dict) -> None:
    _check_header(doc)
    if "actors" not in doc:
        raise ValidationError("$.actors", "missing required field")
    if not isinstance(doc["actors"], list):
        raise ValidationError("$.actors", "must be an array")
    seen: set[str] = set()
    for i, actor in enumerate(doc["actors"]):
        path = f"$.actors[{i}]"
        if not isinstance(actor, dict):
            raise ValidationError(path, "must be an object")
        actor_id = _string(actor, "id", path)
        if actor_id in seen:
            raise ValidationError(f"{path}.id", f"duplicate actor id {actor_id!r}")
        seen.add(actor_id)
        actor_type = _string(actor, "type", path)
        if actor_type not in ACTOR_TYPES:
            raise ValidationError(f"{path}.type", f"unknown actor type {actor_type!r}")
        for key in ("x", "y", "heading", "speed", "accel", "length", "width"):
            _finite_number(actor, key, path)
    for i, sig in enumerate(doc.get("signals", [])):
        path = f"$.signals[{i}]"
        if not isinstance(sig, dict):
            raise ValidationError(path, "must be an object")
        _string(sig, "id", path)
        state = _string(sig, "state", path)
        if state not in SIGNAL_STATES:
            raise ValidationError(f"{path}.state", f"unknown signal state {state!r}")


def _check_control(doc: dict) -> None:
    _check_header(doc)
    if "command" not in doc:
        raise ValidationError("$.command", "missing required field")
    cmd = doc["command"]
    if not isinstance(cmd, dict):
        raise ValidationError("$.command", "must be an object")
    pedal = {"throttle", "brake", "steering"}
    direct = {"target_accel", "target_lane_offset"}
    has_pedal = bool(pedal & cmd.keys())
    has_direct = bool(direct & cmd.keys())
    if has_pedal == has_direct:
        raise ValidationError(
            "$.command",
            "exactly one command form required: throttle/brake/steering "
            "or target_accel/target_lane_offset",
        )
    if has_pedal:
        throttle = _finite_number(cmd, "throttle", "$.command")
        brake = _finite_number(cmd, "brake", "$.command")
        steering = _finite_number(cmd, "steering", "$.command")
        if not 0.0 <= throttle <= 1.0:
            raise ValidationError("$.command.throttle", "must be in [0, 1]")
        if not 0.0 <= brake <= 1.0:
            raise ValidationError("$.command.brake", "must be in [0, 1]")
        if not -1.0 <= steering <= 1.0:
            raise ValidationError("$.command.steering", "must be in [-1, 1]")
    else:
        _finite_number(cmd, "target_accel", "$.command")
        _finite_number(cmd, "target_lane_offset", "$.command")


def _check_heartbeat(doc: dict) -> None:
    _check_header(doc)
    status = _string(doc, "status", "$")
    if status not in ("running", "ended", "idle"):
        raise ValidationError("$.status", f"unknown status {status!r}")


def _check_sensor(doc: dict) -> None:
    # sensor payloads are relayed verbatim for downstream consumers; only the
    # envelope is checked
    _check_header(doc)


_VALIDATORS = {
    KEY_AV_STATE: _check_actor_state,
    KEY_ACTOR_INFO: _check_actor_state,
    KEY_SENSOR_INFO: _check_sensor,
    KEY_CONTROL: _check_control,
    KEY_HEARTBEAT: _check_heartbeat,
}


def validate_message(key: str, payload: bytes) -> dict:
    """Parse and validate a payload for a registered key; returns the document."""
    validator = _VALIDATORS.get(key)
    if validator is None:
        raise ValidationError("$", f"unknown registered key {key!r}")
    doc = _parse_json(payload)
    validator(doc)
    return doc


def message_header(timestamp: float, platform: str) -> dict:
    return {
        "timestamp": timestamp,
        "platform": platform,
        "schema_version": SCHEMA_VERSION,
    }


def actor_state_message(timestamp: float, actors: list[dict],
                        signals: list[dict] | None = None,
                        platform: str = "terasim",
                        weather: str | None = None) -> dict:
    msg = {"header": message_header(timestamp, platform), "actors": actors}
    if signals is not None:
        msg["signals"] = signals
    if weather is not None:
        msg["header"]["weather"] = weather
    return msg


def control_message(timestamp: float, command: dict, platform: str = "av-stack") -> dict:
    return {"header": message_header(timestamp, platform), "command": command}


def heartbeat_message(timestamp: float, status: str, platform: str = "terasim") -> dict:
    return {"header": message_header(timestamp, platform), "status": status}
