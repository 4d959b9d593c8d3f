"""Directed lane-graph road model: lanes, signals, routes, map documents.

A map is a flat-frame piecewise-linear lane graph serialized as one JSON
document (see ``schemas/map.schema.json``). Built-in generators produce a
straight two-lane highway, a ring road, and a signalized 3x3 grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

from .geometry import offset_point, point_along, polyline_cumlen


class MapSchemaError(ValueError):
    """Raised when a map document violates the schema; carries a field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class SignalState(str, Enum):
    GREEN = "GREEN"
    YELLOW = "YELLOW"
    RED = "RED"


@dataclass
class Lane:
    id: str
    centerline: list[tuple[float, float]]
    width: float
    speed_limit: float
    successors: list[str] = field(default_factory=list)
    left_neighbor: str | None = None
    right_neighbor: str | None = None
    closed_intervals: list[tuple[float, float]] = field(default_factory=list)
    yield_to: list[str] = field(default_factory=list)
    # derived, filled on validation
    cum: list[float] = field(default_factory=list, repr=False)
    length: float = 0.0

    def finalize(self) -> None:
        self.cum = polyline_cumlen(self.centerline)
        self.length = self.cum[-1]

    def validate(self, path: str) -> None:
        if len(self.centerline) < 2:
            raise MapSchemaError(f"{path}.centerline", "needs at least 2 points")
        for i in range(1, len(self.centerline)):
            if self.centerline[i] == self.centerline[i - 1]:
                raise MapSchemaError(
                    f"{path}.centerline[{i}]", "consecutive points must be distinct"
                )
        if not self.width > 0:
            raise MapSchemaError(f"{path}.width", "must be > 0")
        if not self.speed_limit > 0:
            raise MapSchemaError(f"{path}.speed_limit", "must be > 0")
        self.finalize()
        seen: list[tuple[float, float]] = []
        for i, (a, b) in enumerate(self.closed_intervals):
            if not (0.0 <= a < b <= self.length):
                raise MapSchemaError(
                    f"{path}.closed_intervals[{i}]",
                    f"must lie within [0, {self.length}] with start < end",
                )
            for pa, pb in seen:
                if a < pb and pa < b:
                    raise MapSchemaError(
                        f"{path}.closed_intervals[{i}]", "intervals overlap"
                    )
            seen.append((a, b))

    def locate(self, s: float, lateral: float = 0.0) -> tuple[float, float, float]:
        """World position and heading at arc length s, offset left by lateral."""
        pts = self.centerline
        if len(pts) == 2:  # straight segment, the common case
            if s < 0.0 or s > self.length:
                raise ValueError(f"s={s} outside [0, {self.length}]")
            (x0, y0), (x1, y1) = pts
            t = s / self.length
            x = x0 + t * (x1 - x0)
            y = y0 + t * (y1 - y0)
            heading = math.atan2(y1 - y0, x1 - x0)
        else:
            x, y, heading = point_along(pts, self.cum, s)
        if lateral != 0.0:
            x, y = offset_point(x, y, heading, lateral)
        return x, y, heading


def lane_length(lane: Lane) -> float:
    """Total centerline arc length of a lane."""
    if not lane.cum:
        lane.finalize()
    return lane.length


def longitudinal_to_world(lane: Lane, s: float, lateral: float = 0.0) -> tuple[float, float, float]:
    """Map (s, lateral) lane coordinates to (x, y, heading)."""
    if not lane.cum:
        lane.finalize()
    return lane.locate(s, lateral)


@dataclass
class TrafficSignal:
    id: str
    controlled_lane_ids: list[str]
    phases: list[tuple[SignalState, float]]
    current_phase_index: int = 0
    phase_elapsed_s: float = 0.0
    override: SignalState | None = None

    def validate(self, path: str) -> None:
        if not self.phases:
            raise MapSchemaError(f"{path}.phases", "must be non-empty")
        for i, (_, dur) in enumerate(self.phases):
            if not dur > 0:
                raise MapSchemaError(f"{path}.phases[{i}]", "duration must be > 0")
        if not 0 <= self.current_phase_index < len(self.phases):
            raise MapSchemaError(f"{path}.current_phase_index", "out of range")
        if not 0 <= self.phase_elapsed_s < self.phases[self.current_phase_index][1]:
            raise MapSchemaError(
                f"{path}.phase_elapsed_s", "must be < current phase duration"
            )

    @property
    def state(self) -> SignalState:
        if self.override is not None:
            return self.override
        return self.phases[self.current_phase_index][0]

    def advance(self, dt: float) -> None:
        self.phase_elapsed_s += dt
        while self.phase_elapsed_s >= self.phases[self.current_phase_index][1]:
            self.phase_elapsed_s -= self.phases[self.current_phase_index][1]
            self.current_phase_index = (self.current_phase_index + 1) % len(self.phases)

    def period(self) -> float:
        return sum(d for _, d in self.phases)


@dataclass
class RoadNetwork:
    lanes: dict[str, Lane]
    signals: dict[str, TrafficSignal]
    spawn_points: list[tuple[str, float]]

    def validate(self) -> None:
        for lid in sorted(self.lanes):
            lane = self.lanes[lid]
            lane.validate(f"lanes[{lid}]")
            for j, succ in enumerate(lane.successors):
                if succ not in self.lanes:
                    raise MapSchemaError(
                        f"lanes[{lid}].successors[{j}]", f"undefined lane {succ!r}"
                    )
            for attr in ("left_neighbor", "right_neighbor"):
                ref = getattr(lane, attr)
                if ref is not None and ref not in self.lanes:
                    raise MapSchemaError(f"lanes[{lid}].{attr}", f"undefined lane {ref!r}")
            for j, ref in enumerate(lane.yield_to):
                if ref not in self.lanes:
                    raise MapSchemaError(
                        f"lanes[{lid}].yield_to[{j}]", f"undefined lane {ref!r}"
                    )
        # neighbor relation must be symmetric: A.left == B  <=>  B.right == A
        for lid in sorted(self.lanes):
            lane = self.lanes[lid]
            if lane.left_neighbor is not None:
                other = self.lanes[lane.left_neighbor]
                if other.right_neighbor != lid:
                    raise MapSchemaError(
                        f"lanes[{lid}].left_neighbor",
                        f"{lane.left_neighbor!r} does not point back via right_neighbor",
                    )
            if lane.right_neighbor is not None:
                other = self.lanes[lane.right_neighbor]
                if other.left_neighbor != lid:
                    raise MapSchemaError(
                        f"lanes[{lid}].right_neighbor",
                        f"{lane.right_neighbor!r} does not point back via left_neighbor",
                    )
        for sid in sorted(self.signals):
            sig = self.signals[sid]
            sig.validate(f"signals[{sid}]")
            for j, lid in enumerate(sig.controlled_lane_ids):
                if lid not in self.lanes:
                    raise MapSchemaError(
                        f"signals[{sid}].controlled_lane_ids[{j}]",
                        f"undefined lane {lid!r}",
                    )
        for i, (lid, s) in enumerate(self.spawn_points):
            if lid not in self.lanes:
                raise MapSchemaError(f"spawn_points[{i}]", f"undefined lane {lid!r}")
            if not 0.0 <= s <= self.lanes[lid].length:
                raise MapSchemaError(f"spawn_points[{i}]", "offset outside lane")

    def signal_for_lane(self, lane_id: str) -> TrafficSignal | None:
        for sid in self.signal_index.get(lane_id, ()):
            return self.signals[sid]
        return None

    @property
    def signal_index(self) -> dict[str, list[str]]:
        idx = getattr(self, "_signal_index", None)
        if idx is None:
            idx = {}
            for sid in sorted(self.signals):
                for lid in self.signals[sid].controlled_lane_ids:
                    idx.setdefault(lid, []).append(sid)
            object.__setattr__(self, "_signal_index", idx)
        return idx

    def advance_signals(self, dt: float) -> None:
        for sid in self.signals:
            self.signals[sid].advance(dt)

    def copy(self) -> "RoadNetwork":
        """Deep copy for per-episode mutable use (closures, signal phases)."""
        return load_network(serialize_network(self))


def advance_signals(network: RoadNetwork, dt: float) -> None:
    """Advance every signal's phase clock by dt seconds, wrapping cyclically."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    network.advance_signals(dt)


# --- document I/O ---------------------------------------------------------


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise MapSchemaError(f"{path}.{key}", "missing required field")
    return obj[key]


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MapSchemaError(path, "must be a number")
    if not math.isfinite(value):
        raise MapSchemaError(path, "must be finite")
    return float(value)


def parse_network(doc: dict) -> RoadNetwork:
    if not isinstance(doc, dict):
        raise MapSchemaError("$", "document must be an object")
    lanes: dict[str, Lane] = {}
    raw_lanes = _require(doc, "lanes", "$")
    if not isinstance(raw_lanes, list) or not raw_lanes:
        raise MapSchemaError("$.lanes", "must be a non-empty array")
    for i, raw in enumerate(raw_lanes):
        path = f"$.lanes[{i}]"
        lid = _require(raw, "id", path)
        if not isinstance(lid, str) or not lid:
            raise MapSchemaError(f"{path}.id", "must be a non-empty string")
        if lid in lanes:
            raise MapSchemaError(f"{path}.id", f"duplicate lane id {lid!r}")
        pts_raw = _require(raw, "centerline", path)
        if not isinstance(pts_raw, list):
            raise MapSchemaError(f"{path}.centerline", "must be an array of [x, y]")
        pts = []
        for j, p in enumerate(pts_raw):
            if not isinstance(p, list) or len(p) != 2:
                raise MapSchemaError(f"{path}.centerline[{j}]", "must be [x, y]")
            pts.append((_number(p[0], f"{path}.centerline[{j}][0]"),
                        _number(p[1], f"{path}.centerline[{j}][1]")))
        lane = Lane(
            id=lid,
            centerline=pts,
            width=_number(_require(raw, "width", path), f"{path}.width"),
            speed_limit=_number(_require(raw, "speed_limit", path), f"{path}.speed_limit"),
            successors=list(raw.get("successors", [])),
            left_neighbor=raw.get("left_neighbor"),
            right_neighbor=raw.get("right_neighbor"),
            closed_intervals=[(float(a), float(b)) for a, b in raw.get("closed_intervals", [])],
            yield_to=list(raw.get("yield_to", [])),
        )
        lanes[lid] = lane
    signals: dict[str, TrafficSignal] = {}
    for i, raw in enumerate(doc.get("signals", [])):
        path = f"$.signals[{i}]"
        sid = _require(raw, "id", path)
        if sid in signals:
            raise MapSchemaError(f"{path}.id", f"duplicate signal id {sid!r}")
        phases = []
        for j, ph in enumerate(_require(raw, "phases", path)):
            if not isinstance(ph, list) or len(ph) != 2:
                raise MapSchemaError(f"{path}.phases[{j}]", "must be [state, duration]")
            try:
                state = SignalState(ph[0])
            except ValueError:
                raise MapSchemaError(f"{path}.phases[{j}][0]", f"unknown state {ph[0]!r}")
            phases.append((state, _number(ph[1], f"{path}.phases[{j}][1]")))
        signals[sid] = TrafficSignal(
            id=sid,
            controlled_lane_ids=list(_require(raw, "controlled_lane_ids", path)),
            phases=phases,
            current_phase_index=int(raw.get("current_phase_index", 0)),
            phase_elapsed_s=float(raw.get("phase_elapsed_s", 0.0)),
        )
    spawn_points = []
    for i, sp in enumerate(doc.get("spawn_points", [])):
        if not isinstance(sp, list) or len(sp) != 2:
            raise MapSchemaError(f"$.spawn_points[{i}]", "must be [lane_id, s]")
        spawn_points.append((sp[0], _number(sp[1], f"$.spawn_points[{i}][1]")))
    network = RoadNetwork(lanes=lanes, signals=signals, spawn_points=spawn_points)
    network.validate()
    return network


def load_network(source) -> RoadNetwork:
    """Load a validated road network from a JSON string, dict, or file path."""
    if isinstance(source, dict):
        return parse_network(source)
    if isinstance(source, (str, bytes)):
        text = source
        if isinstance(source, str) and not source.lstrip().startswith("{"):
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MapSchemaError("$", f"invalid JSON: {exc}") from exc
        return parse_network(doc)
    raise TypeError(f"unsupported map source {type(source)!r}")


def network_to_doc(network: RoadNetwork) -> dict:
    lanes = []
    for lid in sorted(network.lanes):
        lane = network.lanes[lid]
        entry = {
            "id": lane.id,
            "centerline": [[x, y] for x, y in lane.centerline],
            "width": lane.width,
            "speed_limit": lane.speed_limit,
            "successors": list(lane.successors),
            "left_neighbor": lane.left_neighbor,
            "right_neighbor": lane.right_neighbor,
        }
        if lane.closed_intervals:
            entry["closed_intervals"] = [[a, b] for a, b in lane.closed_intervals]
        if lane.yield_to:
            entry["yield_to"] = list(lane.yield_to)
        lanes.append(entry)
    signals = []
    for sid in sorted(network.signals):
        sig = network.signals[sid]
        signals.append({
            "id": sig.id,
            "controlled_lane_ids": list(sig.controlled_lane_ids),
            "phases": [[state.value, dur] for state, dur in sig.phases],
            "current_phase_index": sig.current_phase_index,
            "phase_elapsed_s": sig.phase_elapsed_s,
        })
    return {
        "lanes": lanes,
        "signals": signals,
        "spawn_points": [[lid, s] for lid, s in network.spawn_points],
    }


def serialize_network(network: RoadNetwork) -> str:
    return json.dumps(network_to_doc(network), indent=2, sort_keys=True)


# --- built-in generators --------------------------------------------------

LANE_WIDTH = 3.5


def _straight(x0, y0, x1, y1, n=2) -> list[tuple[float, float]]:
    return [
        (x0 + (x1 - x0) * i / (n - 1), y0 + (y1 - y0) * i / (n - 1))
        for i in range(n)
    ]


def generate_highway(lanes: int = 2, length: float = 1000.0, speed_limit: float = 30.0) -> RoadNetwork:
    """Straight multi-lane highway; lane 0 is the rightmost."""
    lane_objs: dict[str, Lane] = {}
    for i in range(lanes):
        lid = f"hw_{i}"
        lane_objs[lid] = Lane(
            id=lid,
            centerline=_straight(0.0, i * LANE_WIDTH, length, i * LANE_WIDTH),
            width=LANE_WIDTH,
            speed_limit=speed_limit,
            left_neighbor=f"hw_{i + 1}" if i + 1 < lanes else None,
            right_neighbor=f"hw_{i - 1}" if i > 0 else None,
        )
    net = RoadNetwork(
        lanes=lane_objs,
        signals={},
        spawn_points=[(f"hw_{i}", 0.0) for i in range(lanes)],
    )
    net.validate()
    return net


def generate_ring(radius: float = 400.0, lanes: int = 2, speed_limit: float = 30.0,
                  arcs: int = 4, points_per_arc: int = 32) -> RoadNetwork:
    """Closed ring of `arcs` connected arc lanes per ring lane (inner lane 0)."""
    lane_objs: dict[str, Lane] = {}
    for ring in range(lanes):
        r = radius + ring * LANE_WIDTH
        for a in range(arcs):
            pts = []
            for k in range(points_per_arc + 1):
                # CCW travel: left neighbor is the inner (smaller radius) ring
                theta = 2.0 * math.pi * (a + k / points_per_arc) / arcs
                pts.append((r * math.cos(theta), r * math.sin(theta)))
            lid = f"ring_{ring}_{a}"
            lane_objs[lid] = Lane(
                id=lid,
                centerline=pts,
                width=LANE_WIDTH,
                speed_limit=speed_limit,
                successors=[f"ring_{ring}_{(a + 1) % arcs}"],
                left_neighbor=f"ring_{ring - 1}_{a}" if ring > 0 else None,
                right_neighbor=f"ring_{ring + 1}_{a}" if ring + 1 < lanes else None,
            )
    net = RoadNetwork(
        lanes=lane_objs,
        signals={},
        spawn_points=[(f"ring_{ring}_0", 0.0) for ring in range(lanes)],
    )
    net.validate()
    return net


def generate_grid(n: int = 3, block: float = 200.0, speed_limit: float = 13.9,
                  signal_green: float = 25.0, signal_yellow: float = 3.0) -> RoadNetwork:
    """n x n signalized grid; one lane per direction, straight/left/right connectors.

    Intersections sit at (i*block, j*block). Eastbound traffic runs on
    y = j*block - offset, westbound on y = j*block + offset, and likewise for
    north/south, so opposing directions are laterally separated.
    """
    off = LANE_WIDTH / 2.0
    half = 9.0  # intersection half-extent along each axis
    lanes: dict[str, Lane] = {}
    signals: dict[str, TrafficSignal] = {}
    spawn: list[tuple[str, float]] = []

    def node(i: int, j: int) -> tuple[float, float]:
        return i * block, j * block

    # Approach/exit segments between nodes, split at intersection boundaries.
    # Horizontal rows: eastbound "e", westbound "w"; vertical: north "n", south "s".
    def add_lane(lid: str, p0, p1, succ: list[str]):
        lanes[lid] = Lane(
            id=lid, centerline=[p0, p1], width=LANE_WIDTH,
            speed_limit=speed_limit, successors=succ,
        )

    # directions: (name, dx, dy, lateral offset sign applied to (perp))
    # eastbound lane at y - off; westbound at y + off; northbound at x + off;
    # southbound at x - off.
    for j in range(n):
        for i in range(n + 1):
            # segment between node (i-1,j) and (i,j) boundary points
            x0 = (i - 1) * block + half if i > 0 else -block / 2
            x1 = i * block - half if i < n else (n - 1) * block + block / 2
            y_e = j * block - off
            y_w = j * block + off
            if x1 > x0:
                e_id = f"e_{i}_{j}"
                w_id = f"w_{i}_{j}"
                add_lane(e_id, (x0, y_e), (x1, y_e), [])
                add_lane(w_id, (x1, y_w), (x0, y_w), [])
                if i == 0:
                    spawn.append((e_id, 0.0))
                if i == n:
                    spawn.append((w_id, 0.0))
    for i in range(n):
        for j in range(n + 1):
            y0 = (j - 1) * block + half if j > 0 else -block / 2
            y1 = j * block - half if j < n else (n - 1) * block + block / 2
            x_n = i * block + off
            x_s = i * block - off
            if y1 > y0:
                n_id = f"n_{i}_{j}"
                s_id = f"s_{i}_{j}"
                add_lane(n_id, (x_n, y0), (x_n, y1), [])
                add_lane(s_id, (x_s, y1), (x_s, y0), [])
                if j == 0:
                    spawn.append((n_id, 0.0))
                if j == n:
                    spawn.append((s_id, 0.0))

    # connectors through each intersection + signals on the approach lanes
    for i in range(n):
        for j in range(n):
            cx, cy = node(i, j)
            # incoming lane ids and their outgoing continuations
            approaches = {
                "e": (f"e_{i}_{j}", (cx - half, cy - off), (1, 0)),
                "w": (f"w_{i + 1}_{j}", (cx + half, cy + off), (-1, 0)),
                "n": (f"n_{i}_{j}", (cx + off, cy - half), (0, 1)),
                "s": (f"s_{i}_{j + 1}", (cx - off, cy + half), (0, -1)),
            }
            outgoing = {
                "e": (f"e_{i + 1}_{j}", (cx + half, cy - off)),
                "w": (f"w_{i}_{j}", (cx - half, cy + off)),
                "n": (f"n_{i}_{j + 1}", (cx + off, cy + half)),
                "s": (f"s_{i}_{j}", (cx - off, cy - half)),
            }
            right_of = {"e": "s", "s": "w", "w": "n", "n": "e"}
            left_of = {v: k for k, v in right_of.items()}
            for d, (in_id, entry, (dx, dy)) in approaches.items():
                if in_id not in lanes:
                    continue
                conns = []
                # straight
                out_d = d
                out_id, exit_pt = outgoing[out_d]
                if out_id in lanes:
                    cid = f"c_{i}_{j}_{d}_s"
                    add_lane(cid, entry, exit_pt, [out_id])
                    conns.append(cid)
                # right turn
                out_d = right_of[d]
                out_id, exit_pt = outgoing[out_d]
                if out_id in lanes:
                    cid = f"c_{i}_{j}_{d}_r"
                    mid = (entry[0] + (exit_pt[0] - entry[0]) * 0.5 + dx * 2.0,
                           entry[1] + (exit_pt[1] - entry[1]) * 0.5 + dy * 2.0)
                    lanes[cid] = Lane(id=cid, centerline=[entry, mid, exit_pt],
                                      width=LANE_WIDTH, speed_limit=speed_limit * 0.6,
                                      successors=[out_id])
                    conns.append(cid)
                # left turn, yields to oncoming straight connector
                out_d = left_of[d]
                out_id, exit_pt = outgoing[out_d]
                if out_id in lanes:
                    cid = f"c_{i}_{j}_{d}_l"
                    mid = (entry[0] + (exit_pt[0] - entry[0]) * 0.5 + dx * 3.0,
                           entry[1] + (exit_pt[1] - entry[1]) * 0.5 + dy * 3.0)
                    opposite = {"e": "w", "w": "e", "n": "s", "s": "n"}[d]
                    lanes[cid] = Lane(id=cid, centerline=[entry, mid, exit_pt],
                                      width=LANE_WIDTH, speed_limit=speed_limit * 0.5,
                                      successors=[out_id],
                                      yield_to=[f"c_{i}_{j}_{opposite}_s"])
                    conns.append(cid)
                lanes[in_id].successors = conns
            # two-phase signal: E/W green while N/S red, then swap
            ew = [approaches["e"][0], approaches["w"][0]]
            ns = [approaches["n"][0], approaches["s"][0]]
            phases_ew = [(SignalState.GREEN, signal_green), (SignalState.YELLOW, signal_yellow),
                         (SignalState.RED, signal_green + signal_yellow)]
            phases_ns = [(SignalState.RED, signal_green + signal_yellow),
                         (SignalState.GREEN, signal_green), (SignalState.YELLOW, signal_yellow)]
            signals[f"sig_{i}_{j}_ew"] = TrafficSignal(
                id=f"sig_{i}_{j}_ew",
                controlled_lane_ids=[lid for lid in ew if lid in lanes],
                phases=phases_ew,
            )
            signals[f"sig_{i}_{j}_ns"] = TrafficSignal(
                id=f"sig_{i}_{j}_ns",
                controlled_lane_ids=[lid for lid in ns if lid in lanes],
                phases=phases_ns,
            )

    # drop dangling yield_to references (boundary intersections lack some connectors)
    for lane in lanes.values():
        lane.yield_to = [y for y in lane.yield_to if y in lanes]
    net = RoadNetwork(lanes=lanes, signals=signals, spawn_points=spawn)
    net.validate()
    return net


GENERATORS = {
    "highway2": lambda: generate_highway(lanes=2),
    "ring": lambda: generate_ring(),
    "grid3x3": lambda: generate_grid(n=3),
}


def generate(template: str) -> RoadNetwork:
    if template not in GENERATORS:
        raise MapSchemaError("$.map.generator", f"unknown template {template!r}; "
                             f"choose from {sorted(GENERATORS)}")
    return GENERATORS[template]()
