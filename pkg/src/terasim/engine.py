"""Deterministic time-stepped episode executor.

One episode is strictly single-threaded and fully determined by
(config, seed): a counter-based root seed derives independent streams per
subsystem (spawning, per-agent behavior, per-adversity rolls), so adding an
adversity spec or an agent never perturbs unrelated draws. The per-step
update order is fixed: adversity expiry -> spawning -> triggers/activations
-> planning for all agents (stable id order) -> integration -> signals ->
collision check -> logging. Batches fan episodes out to worker processes and
merge records in seed order, so results are invariant to worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from bisect import bisect_left, bisect_right, insort
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import road
from .adversity import (
    ActivatedBehavior,
    AdversityOrchestrator,
    AdversitySpec,
    BehaviorKind,
    ConfigError,
    Scope,
    TriggerCondition,
    TriggerKind,
    TakeoverMode,
)
from .behavior import (
    AgentKind,
    B_EMERGENCY,
    BehaviorParams,
    DEFAULT_DIMENSIONS,
    DEFAULT_DISTRIBUTIONS,
    LANE_CHANGE_SECONDS,
    LaneChange,
    MILE,
    Neighbor,
    NdeConfig,
    PARAM_FIELDS,
    Plan,
    StepContext,
    Surroundings,
    TruncatedNormal,
    VehicleState,
    equilibrium_gap,
    integrate_step,
    nearest_constraint_gap,
    plan_step,
    sample_behavior,
)
from .estimation import CrashRateEstimate, EpisodeRecord, LikelihoodLedger, Mode, estimate_crash_rate
from .geometry import rect_corners, separating_axis_check
from .road import Lane, RoadNetwork, SignalState

CLOSURE_MERGE_WINDOW = 200.0   # start forcing merges this far before a closure
LEADER_LOOKAHEAD = 150.0       # cross-lane leader search horizon
YIELD_CONFLICT_WINDOW = 40.0   # oncoming traffic closer than this blocks a yield lane
AV_ACCEL_LIMIT = 4.0


class CosimTimeout(RuntimeError):
    """No external AV control arrived within the handshake window."""


# --- scenario configuration -------------------------------------------------


@dataclass
class EpisodeSettings:
    dt: float = 0.1
    max_duration: float = 120.0
    nominal_miles: float = 0.5

    def validate(self) -> None:
        if not self.dt > 0:
            raise ConfigError("episode.dt must be > 0")
        if not self.max_duration > 0:
            raise ConfigError("episode.max_duration must be > 0")
        if not self.nominal_miles > 0:
            raise ConfigError("episode.nominal_miles must be > 0")


@dataclass
class AvSettings:
    spawn: tuple[str, float] = ("hw_0", 0.0)
    speed: float | None = None
    route: list[str] | None = None
    control: str = "BUILTIN_IDM"   # or "COSIM"
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.control not in ("BUILTIN_IDM", "COSIM"):
            raise ConfigError(f"av.control must be BUILTIN_IDM or COSIM, got {self.control!r}")


@dataclass
class CosimSettings:
    enabled: bool = False
    listen: str = "127.0.0.1:6379"
    external: str | None = None   # address of an external RESP server instead
    password: str | None = None
    step_deadline: float = 0.1
    handshake_timeout: float = 10.0


@dataclass
class InitialAgent:
    id: str
    kind: AgentKind
    lane: str = ""
    s: float = 0.0
    speed: float = 0.0
    route: list[str] | None = None
    params: dict = field(default_factory=dict)
    path: list[tuple[float, float]] | None = None


# Conservative defaults for the built-in ego policy: long headway, gentle
# braking and acceleration.
BUILTIN_AV_PARAMS = {"T": 2.0, "b": 2.0, "a_max": 1.0, "s0": 3.0}


@dataclass
class ScenarioConfig:
    network_doc: dict | None = None
    generator: str | None = "highway2"
    nde: NdeConfig = field(default_factory=NdeConfig)
    adversities: list[AdversitySpec] = field(default_factory=list)
    mode: Mode = Mode.NDE
    episode: EpisodeSettings = field(default_factory=EpisodeSettings)
    av: AvSettings = field(default_factory=AvSettings)
    initial_agents: list[InitialAgent] = field(default_factory=list)
    seed: int = 0
    cosim: CosimSettings = field(default_factory=CosimSettings)
    weather: str | None = None

    def build_network(self) -> RoadNetwork:
        if self.network_doc is not None:
            return road.parse_network(self.network_doc)
        assert self.generator is not None
        return road.generate(self.generator)

    def validate(self) -> None:
        if (self.network_doc is None) == (self.generator is None):
            raise ConfigError("map: exactly one of generator or document required")
        self.episode.validate()
        self.av.validate()
        self.nde.validate()
        net = self.build_network()
        for spec in self.adversities:
            spec.validate()
            b = spec.behavior
            if b.kind is BehaviorKind.LANE_CLOSURE:
                if b.lane not in net.lanes:
                    raise ConfigError(f"adversities[{spec.id}].behavior.lane: unknown lane {b.lane!r}")
                a, z = b.interval
                if z > net.lanes[b.lane].length:
                    raise ConfigError(f"adversities[{spec.id}].behavior.interval exceeds lane length")
            if b.kind is BehaviorKind.SIGNAL_OVERRIDE and b.signal not in net.signals:
                raise ConfigError(f"adversities[{spec.id}].behavior.signal: unknown signal {b.signal!r}")
        lane_id, s = self.av.spawn
        if lane_id not in net.lanes:
            raise ConfigError(f"av.spawn: unknown lane {lane_id!r}")
        if not 0 <= s <= net.lanes[lane_id].length:
            raise ConfigError("av.spawn: offset outside lane")
        seen = {"av"}
        for i, agent in enumerate(self.initial_agents):
            if agent.id in seen:
                raise ConfigError(f"initial_agents[{i}].id: duplicate id {agent.id!r}")
            seen.add(agent.id)
            if agent.kind is AgentKind.PEDESTRIAN:
                if not agent.path or len(agent.path) < 2:
                    raise ConfigError(f"initial_agents[{i}]: pedestrians need a path")
            elif agent.lane not in net.lanes:
                raise ConfigError(f"initial_agents[{i}].lane: unknown lane {agent.lane!r}")
            elif not 0 <= agent.s <= net.lanes[agent.lane].length:
                raise ConfigError(f"initial_agents[{i}].s: offset outside lane")


def _parse_truncnorm(raw: dict, path: str) -> TruncatedNormal:
    try:
        return TruncatedNormal(
            mean=raw.get("mean"), sd=float(raw["sd"]),
            min=float(raw["min"]), max=float(raw["max"]),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing field {exc.args[0]!r}")


def config_from_dict(doc: dict) -> ScenarioConfig:
    """Parse and validate one scenario config document."""
    if not isinstance(doc, dict):
        raise ConfigError("$: config must be an object")
    cfg = ScenarioConfig()
    raw_map = doc.get("map", {"generator": "highway2"})
    if "generator" in raw_map and "document" in raw_map:
        raise ConfigError("$.map: give either generator or document, not both")
    if "document" in raw_map:
        cfg.network_doc = raw_map["document"]
        cfg.generator = None
    elif "path" in raw_map:
        with open(raw_map["path"], "r", encoding="utf-8") as fh:
            cfg.network_doc = json.load(fh)
        cfg.generator = None
    else:
        cfg.generator = raw_map.get("generator", "highway2")

    raw_nde = doc.get("nde", {})
    nde = NdeConfig()
    nde.spawn_rate = float(raw_nde.get("spawn_rate", 0.0))
    nde.maneuver_noise = float(raw_nde.get("maneuver_noise", 0.0))
    if "kind_weights" in raw_nde:
        nde.kind_weights = {
            AgentKind(k): float(v) for k, v in raw_nde["kind_weights"].items()
        }
    for kind_name, per_kind in raw_nde.get("params", {}).items():
        try:
            kind = AgentKind(kind_name)
        except ValueError:
            raise ConfigError(f"$.nde.params: unknown agent kind {kind_name!r}")
        for field_name, raw_tn in per_kind.items():
            if field_name not in PARAM_FIELDS:
                raise ConfigError(f"$.nde.params.{kind_name}.{field_name}: unknown parameter")
            nde.distributions[kind][field_name] = _parse_truncnorm(
                raw_tn, f"$.nde.params.{kind_name}.{field_name}")
    cfg.nde = nde

    specs = []
    for i, raw in enumerate(doc.get("adversities", [])):
        path = f"$.adversities[{i}]"
        try:
            trigger_raw = dict(raw["trigger"])
            behavior_raw = dict(raw["behavior"])
            trigger_kind = TriggerKind(trigger_raw.pop("kind"))
            behavior_kind = BehaviorKind(behavior_raw.pop("kind"))
        except KeyError as exc:
            raise ConfigError(f"{path}: missing field {exc.args[0]!r}")
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}")
        if "interval" in behavior_raw and behavior_raw["interval"] is not None:
            behavior_raw["interval"] = tuple(float(x) for x in behavior_raw["interval"])
        if "takeover" in behavior_raw:
            behavior_raw["takeover"] = TakeoverMode(behavior_raw["takeover"])
        try:
            trigger = TriggerCondition(kind=trigger_kind, **trigger_raw)
            behavior = ActivatedBehavior(kind=behavior_kind, **behavior_raw)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}")
        spec = AdversitySpec(
            id=raw.get("id", f"adversity_{i}"),
            scope=Scope(raw.get("scope", "DYNAMIC")),
            trigger=trigger,
            behavior=behavior,
            p=float(raw.get("p", 0.0)),
            q=float(raw["q"]) if "q" in raw and raw["q"] is not None else None,
            eligible_kinds=tuple(AgentKind(k) for k in raw.get("eligible_kinds", ["CAR"])),
            max_concurrent=int(raw.get("max_concurrent", 1)),
            cooldown=float(raw.get("cooldown", 30.0)),
        )
        specs.append(spec)
    cfg.adversities = specs

    cfg.mode = Mode(doc.get("mode", "NDE"))
    raw_ep = doc.get("episode", {})
    cfg.episode = EpisodeSettings(
        dt=float(raw_ep.get("dt", 0.1)),
        max_duration=float(raw_ep.get("max_duration", 120.0)),
        nominal_miles=float(raw_ep.get("nominal_miles", 0.5)),
    )
    raw_av = doc.get("av", {})
    spawn = raw_av.get("spawn")
    cfg.av = AvSettings(
        spawn=(spawn[0], float(spawn[1])) if spawn else AvSettings().spawn,
        speed=float(raw_av["speed"]) if raw_av.get("speed") is not None else None,
        route=list(raw_av["route"]) if raw_av.get("route") else None,
        control=raw_av.get("control", "BUILTIN_IDM"),
        params=dict(raw_av.get("params", {})),
    )
    for i, raw in enumerate(doc.get("initial_agents", [])):
        try:
            cfg.initial_agents.append(InitialAgent(
                id=raw["id"],
                kind=AgentKind(raw["kind"]),
                lane=raw.get("lane", ""),
                s=float(raw.get("s", 0.0)),
                speed=float(raw.get("speed", 0.0)),
                route=list(raw["route"]) if raw.get("route") else None,
                params=dict(raw.get("params", {})),
                path=[(float(x), float(y)) for x, y in raw["path"]] if raw.get("path") else None,
            ))
        except KeyError as exc:
            raise ConfigError(f"$.initial_agents[{i}]: missing field {exc.args[0]!r}")
    cfg.seed = int(doc.get("seed", 0))
    raw_cs = doc.get("cosim", {})
    cfg.cosim = CosimSettings(
        enabled=bool(raw_cs.get("enabled", False)),
        listen=raw_cs.get("listen", "127.0.0.1:6379"),
        external=raw_cs.get("external"),
        password=raw_cs.get("password"),
        step_deadline=float(raw_cs.get("step_deadline", 0.1)),
        handshake_timeout=float(raw_cs.get("handshake_timeout", 10.0)),
    )
    cfg.weather = doc.get("weather")
    cfg.validate()
    return cfg


def load_config(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}")
    return config_from_dict(doc)


# --- collision detection ------------------------------------------------------


@dataclass(slots=True)
class ActorPose:
    id: str
    kind: AgentKind | str
    x: float
    y: float
    heading: float
    length: float
    width: float
    speed: float = 0.0


@dataclass
class CrashEvent:
    time: float
    partners: tuple[str, str]
    relative_speed: float
    axis: tuple[float, float]     # minimum-penetration axis (certificate)
    depth: float                  # penetration along that axis

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "partners": list(self.partners),
            "relative_speed": self.relative_speed,
            "axis": list(self.axis),
            "depth": self.depth,
        }


def detect_collisions(actors: list[ActorPose], now: float = 0.0) -> list[CrashEvent]:
    """All overlapping distinct pairs, each reported once; pedestrian pairs skipped."""
    events: list[CrashEvent] = []
    n = len(actors)
    order = sorted(range(n), key=lambda i: actors[i].x)
    radii = [0.5 * math.hypot(a.length, a.width) for a in actors]
    corners: list[tuple | None] = [None] * n
    for oi in range(n):
        i = order[oi]
        ai = actors[i]
        ri = radii[i]
        for oj in range(oi + 1, n):
            j = order[oj]
            aj = actors[j]
            limit = ri + radii[j]
            if aj.x - ai.x > limit:
                break
            if ai.kind is AgentKind.PEDESTRIAN and aj.kind is AgentKind.PEDESTRIAN:
                continue
            dx = aj.x - ai.x
            dy = aj.y - ai.y
            if dx * dx + dy * dy > limit * limit:
                continue
            if corners[i] is None:
                corners[i] = rect_corners(ai.x, ai.y, ai.heading, ai.length, ai.width)
            if corners[j] is None:
                corners[j] = rect_corners(aj.x, aj.y, aj.heading, aj.length, aj.width)
            hit, axis, depth = separating_axis_check(corners[i], corners[j])
            if hit:
                va = (ai.speed * math.cos(ai.heading), ai.speed * math.sin(ai.heading))
                vb = (aj.speed * math.cos(aj.heading), aj.speed * math.sin(aj.heading))
                rel = math.hypot(va[0] - vb[0], va[1] - vb[1])
                pair = tuple(sorted((ai.id, aj.id)))
                events.append(CrashEvent(now, pair, rel, axis, depth))
    events.sort(key=lambda e: e.partners)
    return events


# --- trajectory log -----------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class TrajectoryLog:
    steps: list[dict] = field(default_factory=list)

    def append(self, snapshot: dict) -> None:
        self.steps.append(snapshot)

    def digest(self) -> str:
        h = hashlib.sha256()
        for step in self.steps:
            h.update(canonical_json(step).encode())
            h.update(b"\n")
        return h.hexdigest()

    def to_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for step in self.steps:
                fh.write(canonical_json(step))
                fh.write("\n")

    @classmethod
    def from_jsonl(cls, path: str) -> "TrajectoryLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.steps.append(json.loads(line))
        return log


# --- rng streams ---------------------------------------------------------------


def _tag(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")


def derive_stream(seed: int, *names: str) -> np.random.Generator:
    """Independent generator for (seed, names...); stable across config changes."""
    entropy = [seed & 0xFFFFFFFFFFFFFFFF] + [_tag(n) for n in names]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# --- route enumeration -----------------------------------------------------------


def enumerate_routes(network: RoadNetwork, start: str, max_depth: int = 12,
                     max_routes: int = 256) -> list[list[str]]:
    """All acyclic successor chains from `start`; a revisit closes a cycle."""
    routes: list[list[str]] = []

    def walk(path: list[str]):
        if len(routes) >= max_routes:
            return
        lane = network.lanes[path[-1]]
        if not lane.successors or len(path) > max_depth:
            routes.append(list(path))
            return
        for succ in lane.successors:
            if succ in path:
                routes.append(list(path))  # cyclic route; engine re-enters the cycle
                return
            walk(path + [succ])

    walk([start])
    return routes


def _extend_cyclic(route: list[str], network: RoadNetwork, needed_m: float) -> list[str]:
    """Repeat a route's closing cycle until it covers needed_m meters."""
    last = network.lanes[route[-1]]
    cycle_start = None
    for succ in last.successors:
        if succ in route:
            cycle_start = route.index(succ)
            break
    if cycle_start is None:
        return route
    cycle = route[cycle_start:]
    cycle_len = sum(network.lanes[lid].length for lid in cycle)
    total = sum(network.lanes[lid].length for lid in route)
    out = list(route)
    while total < needed_m:
        out.extend(cycle)
        total += cycle_len
    return out


# --- the episode ------------------------------------------------------------------


AV_ID = "av"


class Episode:
    """One seeded simulation run; also the world view handed to adversities."""

    def __init__(self, config: ScenarioConfig, seed: int, cosim_server=None):
        self.config = config
        self.seed = seed
        self.dt = config.episode.dt
        self.network = config.build_network()
        self.mode = config.mode
        self.now = 0.0
        self.step_index = 0
        self.agents: dict[str, VehicleState] = {}
        self.aux_lanes: dict[str, Lane] = {}     # pedestrian paths
        self.static_actors: list[ActorPose] = []  # cones from closures
        self.ledger = LikelihoodLedger()
        self.spawn_rng = derive_stream(seed, "spawn")
        self._agent_rng: dict[str, np.random.Generator] = {}
        self.orchestrator = AdversityOrchestrator(
            config.adversities,
            nade_enabled=(config.mode is Mode.NADE),
            rng_for_spec=lambda sid: derive_stream(seed, "adversity", sid),
            ledger=self.ledger,
        )
        self.cosim = cosim_server
        self._last_av_command: dict | None = None
        self._stale_commands = 0
        self._spawn_counter = 0
        self._spawn_rejections = 0
        self._route_cache: dict[str, list[list[str]]] = {}
        self.log = TrajectoryLog()
        self.crash: "CrashEvent | None" = None
        self._events: list[dict] = []
        self._lane_index: dict[str, list[tuple[float, str]]] = {}
        self._poses: dict[str, ActorPose] = {}
        self._controllers: dict[str, str] = {}
        self.av_odometer_m = 0.0
        self._signal_idx = self.network.signal_index
        self._signals = self.network.signals

    # -- world-view API used by the adversity orchestrator -----------------

    @property
    def av(self) -> VehicleState | None:
        return self.agents.get(AV_ID)

    def agent_ids_ordered(self) -> list[str]:
        return list(self.agents.keys())

    def lane_of(self, agent: VehicleState) -> Lane:
        lane = self.network.lanes.get(agent.lane_id)
        if lane is None:
            lane = self.aux_lanes[agent.lane_id]
        return lane

    def position_of(self, agent: VehicleState) -> tuple[float, float]:
        pose = self._poses.get(agent.id)
        if pose is not None:
            return pose.x, pose.y
        lane = self.lane_of(agent)
        x, y, _ = lane.locate(min(agent.s, lane.length), agent.lateral_offset)
        return x, y

    def leader_info(self, agent: VehicleState) -> tuple[float, float] | None:
        n = self._find_leader(agent)
        return None if n is None else (n.gap, n.speed)

    def distance_to_lane_end(self, agent: VehicleState) -> float:
        return self.lane_of(agent).length - agent.s

    def lane_is_signal_controlled(self, lane_id: str) -> bool:
        return bool(self.network.signal_index.get(lane_id))

    def lane_clear(self, lane_id: str, a: float, b: float) -> bool:
        for s, aid in self._lane_index.get(lane_id, ()):
            v = self.agents[aid]
            if s + v.length / 2.0 > a and s - v.length / 2.0 < b:
                return False
        return True

    def adjacent_side_to_lane(self, from_lane: str, to_lane: str) -> LaneChange | None:
        lane = self.network.lanes.get(from_lane)
        if lane is None:
            return None
        if lane.left_neighbor == to_lane:
            return LaneChange.LEFT
        if lane.right_neighbor == to_lane:
            return LaneChange.RIGHT
        return None

    def path_length(self, agent: VehicleState) -> float:
        return self.lane_of(agent).length

    def path_remaining(self, agent: VehicleState) -> float:
        return self.path_length(agent) - agent.s

    def apply_static_effect(self, spec: AdversitySpec, active) -> None:
        b = spec.behavior
        if b.kind is BehaviorKind.LANE_CLOSURE:
            lane = self.network.lanes[b.lane]
            lane.closed_intervals.append(b.interval)
            half = lane.width / 2.0 - 0.3
            cones = []
            for s_at in (b.interval[0], b.interval[1]):
                s_at = min(s_at, lane.length)
                for lat in (-half, half):
                    x, y, heading = lane.locate(s_at, lat)
                    cones.append(ActorPose(
                        id=f"cone_{spec.id}_{len(cones)}", kind="CONE",
                        x=x, y=y, heading=heading, length=0.4, width=0.4,
                    ))
            active.data["cones"] = [c.id for c in cones]
            self.static_actors.extend(cones)
        elif b.kind is BehaviorKind.SIGNAL_OVERRIDE:
            self.network.signals[b.signal].override = SignalState(b.override_state)

    def remove_static_effect(self, spec: AdversitySpec, active) -> None:
        b = spec.behavior
        if b.kind is BehaviorKind.LANE_CLOSURE:
            lane = self.network.lanes[b.lane]
            if b.interval in lane.closed_intervals:
                lane.closed_intervals.remove(b.interval)
            gone = set(active.data.get("cones", ()))
            self.static_actors = [c for c in self.static_actors if c.id not in gone]
        elif b.kind is BehaviorKind.SIGNAL_OVERRIDE:
            self.network.signals[b.signal].override = None

    # -- setup ---------------------------------------------------------------

    def _agent_stream(self, agent_id: str) -> np.random.Generator:
        rng = self._agent_rng.get(agent_id)
        if rng is None:
            rng = derive_stream(self.seed, "agent", agent_id)
            self._agent_rng[agent_id] = rng
        return rng

    def _mean_params(self, kind: AgentKind, default_v0: float) -> BehaviorParams:
        dists = self.config.nde.distributions.get(kind) or DEFAULT_DISTRIBUTIONS[kind]
        values = {}
        for name in PARAM_FIELDS:
            dist = dists.get(name) or DEFAULT_DISTRIBUTIONS[kind][name]
            mean = dist.mean if dist.mean is not None else (default_v0 if name == "v0" else 0.0)
            values[name] = min(max(mean, dist.min), dist.max)
        return BehaviorParams(**values)

    def _routes_from(self, lane_id: str) -> list[list[str]]:
        routes = self._route_cache.get(lane_id)
        if routes is None:
            routes = enumerate_routes(self.network, lane_id)
            self._route_cache[lane_id] = routes
        return routes

    def _route_tail(self, lane_id: str, rng: np.random.Generator | None,
                    fixed: list[str] | None = None) -> list[str]:
        if fixed is not None:
            route = [lane_id] + [lid for lid in fixed if lid != lane_id] \
                if fixed[:1] != [lane_id] else list(fixed)
        else:
            routes = self._routes_from(lane_id)
            route = routes[0] if len(routes) == 1 or rng is None else \
                routes[int(rng.integers(0, len(routes)))]
        needed = self.config.episode.max_duration * 40.0
        route = _extend_cyclic(route, self.network, needed)
        return route[1:]

    def _place_initial_agents(self) -> None:
        cfg = self.config
        lane_id, s = cfg.av.spawn
        lane = self.network.lanes[lane_id]
        av_params = self._mean_params(AgentKind.AV, lane.speed_limit)
        for key, val in {**BUILTIN_AV_PARAMS, **cfg.av.params}.items():
            setattr(av_params, key, float(val))
        av_params.validate()
        length, width = DEFAULT_DIMENSIONS[AgentKind.AV]
        av = VehicleState(
            id=AV_ID, kind=AgentKind.AV, lane_id=lane_id, s=s,
            speed=cfg.av.speed if cfg.av.speed is not None
            else min(av_params.v0, lane.speed_limit),
            behavior=av_params,
            route=self._route_tail(lane_id, None, cfg.av.route),
            length=length, width=width,
        )
        self.agents[AV_ID] = av
        self._events.append({"type": "spawn", "id": AV_ID, "t": self.now})
        for ia in cfg.initial_agents:
            if ia.kind is AgentKind.PEDESTRIAN:
                path_lane = Lane(
                    id=f"path_{ia.id}", centerline=list(ia.path), width=0.8,
                    speed_limit=3.0,
                )
                path_lane.validate(f"initial_agents[{ia.id}].path")
                self.aux_lanes[path_lane.id] = path_lane
                lane_ref, s0, limit = path_lane.id, 0.0, 3.0
            else:
                lane_ref, s0 = ia.lane, ia.s
                limit = self.network.lanes[ia.lane].speed_limit
            params = self._mean_params(ia.kind, limit)
            for key, val in ia.params.items():
                if key not in PARAM_FIELDS:
                    raise ConfigError(f"initial_agents[{ia.id}].params.{key}: unknown parameter")
                setattr(params, key, float(val))
            params.validate()
            length, width = DEFAULT_DIMENSIONS[ia.kind]
            route = [] if ia.kind is AgentKind.PEDESTRIAN else \
                self._route_tail(lane_ref, self._agent_stream(ia.id), ia.route)
            self.agents[ia.id] = VehicleState(
                id=ia.id, kind=ia.kind, lane_id=lane_ref, s=s0, speed=ia.speed,
                behavior=params, route=route, length=length, width=width,
            )
            self._events.append({"type": "spawn", "id": ia.id, "t": self.now})

    # -- spawning -------------------------------------------------------------

    def _sample_kind(self) -> AgentKind:
        weights = self.config.nde.kind_weights
        kinds = sorted(weights, key=lambda k: k.value)
        total = sum(weights[k] for k in kinds)
        u = self.spawn_rng.random() * total
        acc = 0.0
        for kind in kinds:
            acc += weights[kind]
            if u < acc:
                return kind
        return kinds[-1]

    def spawn_agents(self) -> list[VehicleState]:
        cfg = self.config.nde
        if cfg.spawn_rate <= 0.0:
            return []
        spawned = []
        for lane_id, s0 in self.network.spawn_points:
            count = int(self.spawn_rng.poisson(cfg.spawn_rate * self.dt))
            for _ in range(count):
                kind = self._sample_kind()
                agent_id = f"veh_{self._spawn_counter:05d}"
                rng = self._agent_stream(agent_id)
                lane = self.network.lanes[lane_id]
                params = sample_behavior(self.config.nde, kind, rng, lane.speed_limit)
                speed = min(params.v0, lane.speed_limit)
                gap_needed = equilibrium_gap(params, min(speed, params.v0 * 0.999))
                ok = True
                for s, aid in self._lane_index.get(lane_id, ()):
                    other = self.agents[aid]
                    sep = abs(s - s0) - (other.length + DEFAULT_DIMENSIONS[kind][0]) / 2.0
                    if sep < gap_needed:
                        ok = False
                        break
                if not ok:
                    self._spawn_rejections += 1
                    # the id was consumed; keep numbering monotone regardless
                    self._spawn_counter += 1
                    continue
                length, width = DEFAULT_DIMENSIONS[kind]
                veh = VehicleState(
                    id=agent_id, kind=kind, lane_id=lane_id, s=s0, speed=speed,
                    behavior=params, route=self._route_tail(lane_id, rng),
                    length=length, width=width,
                )
                self.agents[agent_id] = veh
                self._lane_index.setdefault(lane_id, [])
                insort(self._lane_index[lane_id], (s0, agent_id))
                self._events.append({"type": "spawn", "id": agent_id, "t": self.now})
                self._spawn_counter += 1
                spawned.append(veh)
        return spawned

    # -- perception --------------------------------------------------------

    def _rebuild_lane_index(self) -> None:
        idx: dict[str, list[tuple[float, str]]] = {}
        for aid, agent in self.agents.items():
            if agent.kind is AgentKind.PEDESTRIAN:
                continue
            idx.setdefault(agent.lane_id, []).append((agent.s, aid))
        for rows in idx.values():
            rows.sort()
        self._lane_index = idx

    def _find_leader(self, agent: VehicleState, lane_id: str | None = None,
                     s: float | None = None) -> Neighbor | None:
        lane_id = lane_id or agent.lane_id
        s = agent.s if s is None else s
        rows = self._lane_index.get(lane_id, ())
        i = bisect_right(rows, (s, agent.id))
        if i < len(rows):
            ls, lid = rows[i]
            lead = self.agents[lid]
            return Neighbor(gap=ls - s - (lead.length + agent.length) / 2.0, speed=lead.speed)
        # continue the search along the route within the lookahead horizon
        lane = self.network.lanes.get(lane_id)
        if lane is None:
            return None
        offset = lane.length - s
        route_iter = agent.route if lane_id == agent.lane_id else []
        for next_id in route_iter[:3]:
            if offset > LEADER_LOOKAHEAD:
                break
            rows = self._lane_index.get(next_id, ())
            if rows:
                ls, lid = rows[0]
                lead = self.agents[lid]
                return Neighbor(
                    gap=offset + ls - (lead.length + agent.length) / 2.0,
                    speed=lead.speed,
                )
            nxt = self.network.lanes.get(next_id)
            if nxt is None:
                break
            offset += nxt.length
        return None

    def _find_follower(self, agent: VehicleState, lane_id: str,
                       s: float) -> Neighbor | None:
        rows = self._lane_index.get(lane_id, ())
        i = bisect_left(rows, (s, "" if lane_id != agent.lane_id else agent.id))
        if i > 0:
            fs, fid = rows[i - 1]
            if fid != agent.id:
                follower = self.agents[fid]
                return Neighbor(gap=s - fs - (follower.length + agent.length) / 2.0,
                                speed=follower.speed)
        return None

    def _surroundings(self, agent: VehicleState) -> Surroundings:
        lane = self.network.lanes.get(agent.lane_id)
        leader = self._find_leader(agent)
        # followers only matter to lane-change decisions; skip the lookups
        # entirely on lanes with no neighbors
        if lane is None or (lane.left_neighbor is None and lane.right_neighbor is None):
            return Surroundings(leader=leader)
        sur = Surroundings(
            leader=leader,
            follower=self._find_follower(agent, agent.lane_id, agent.s),
        )
        if lane.left_neighbor:
            sur.has_left = True
            sur.left_leader = self._find_leader(agent, lane.left_neighbor, agent.s)
            sur.left_follower = self._find_follower(agent, lane.left_neighbor, agent.s)
        if lane.right_neighbor:
            sur.has_right = True
            sur.right_leader = self._find_leader(agent, lane.right_neighbor, agent.s)
            sur.right_follower = self._find_follower(agent, lane.right_neighbor, agent.s)
        return sur

    def _yield_blocked(self, agent: VehicleState, lane: Lane) -> bool:
        """True when the agent's next connector must yield to present conflicts.

        Gating happens at the connector entry only; once inside the
        intersection the agent proceeds.
        """
        if not agent.route:
            return False
        nxt = self.network.lanes.get(agent.route[0])
        if nxt is None or not nxt.yield_to or lane.length - agent.s > 30.0:
            return False
        for target in nxt.yield_to:
            if self._lane_index.get(target):
                return True
            # approaching traffic on lanes feeding the conflict connector
            for lid, rows in self._lane_index.items():
                feeder = self.network.lanes.get(lid)
                if feeder is None or target not in feeder.successors:
                    continue
                for s, aid in rows:
                    other = self.agents[aid]
                    if other.id == agent.id:
                        continue
                    if feeder.length - s < YIELD_CONFLICT_WINDOW and other.speed > 1.0:
                        return True
        return False

    def _context_for(self, agent: VehicleState) -> StepContext:
        lane = self.network.lanes.get(agent.lane_id)
        if lane is None:  # pedestrian path
            aux = self.aux_lanes[agent.lane_id]
            return StepContext(sur=Surroundings(), lane_length=aux.length,
                               speed_limit=aux.speed_limit)
        ctx = StepContext(
            sur=self._surroundings(agent),
            lane_length=lane.length,
            speed_limit=lane.speed_limit,
        )
        # red signal at the lane end acts as a stationary zero-length leader
        sids = self._signal_idx.get(agent.lane_id)
        stop_gap = lane.length - agent.s - agent.length / 2.0
        if sids is not None and self._signals[sids[0]].state is not SignalState.GREEN:
            ctx.red_signal_distance = stop_gap
        elif self._yield_blocked(agent, lane):
            ctx.red_signal_distance = stop_gap
        front = agent.s + agent.length / 2.0
        best = None
        for a, b in lane.closed_intervals:
            if b > agent.s and a - front > -0.5:
                d = a - front
                if best is None or d < best:
                    best = d
        if best is not None:
            ctx.closure_distance = max(best, 0.001)
            if best < CLOSURE_MERGE_WINDOW:
                ctx.merge_direction = self._merge_side(agent, lane)
        return ctx

    def _merge_side(self, agent: VehicleState, lane: Lane) -> LaneChange | None:
        def open_lane(lid: str | None) -> bool:
            if not lid:
                return False
            for a, b in self.network.lanes[lid].closed_intervals:
                if b > agent.s and a < agent.s + CLOSURE_MERGE_WINDOW:
                    return False
            return True

        if open_lane(lane.right_neighbor):
            return LaneChange.RIGHT
        if open_lane(lane.left_neighbor):
            return LaneChange.LEFT
        return None

    # -- av control ----------------------------------------------------------

    def _av_plan(self, av: VehicleState, ctx: StepContext) -> Plan:
        if self.config.av.control == "BUILTIN_IDM":
            plan = plan_step(av, ctx, None, 0.0)
            # conservative stop-hold: nearly stopped close behind an
            # obstruction, the ego holds the brake instead of creeping
            gap = nearest_constraint_gap(ctx)
            if gap is not None and av.speed < 0.8 and gap < av.behavior.s0 + 2.0:
                plan.accel = min(plan.accel, -av.behavior.b)
                plan.lane_change = LaneChange.KEEP
            return plan
        cmd = self._last_av_command
        if cmd is None:
            return Plan(accel=0.0)
        if "target_accel" in cmd:
            accel = float(cmd["target_accel"])
        else:
            accel = float(cmd.get("throttle", 0.0)) * AV_ACCEL_LIMIT \
                - float(cmd.get("brake", 0.0)) * B_EMERGENCY
        accel = min(max(accel, -B_EMERGENCY), AV_ACCEL_LIMIT)
        return Plan(accel=accel)

    # -- stepping ---------------------------------------------------------------

    def _apply_lane_change(self, agent: VehicleState, direction: LaneChange) -> None:
        lane = self.network.lanes.get(agent.lane_id)
        if lane is None:
            return
        target_id = lane.left_neighbor if direction is LaneChange.LEFT else lane.right_neighbor
        if target_id is None:
            return
        target = self.network.lanes[target_id]
        s = min(agent.s, target.length)
        x0, y0, _ = lane.locate(min(agent.s, lane.length), agent.lateral_offset)
        x1, y1, h1 = target.locate(s)
        # signed lateral offset of the old position relative to the new centerline
        lat = -(x0 - x1) * math.sin(h1) + (y0 - y1) * math.cos(h1)
        agent.lane_id = target_id
        agent.s = s
        agent.lateral_offset = lat
        agent.lat_rate = max(abs(lat) / LANE_CHANGE_SECONDS, 0.1)
        agent.route = self._route_tail(target_id, self._agent_rng.get(agent.id))

    def _advance_lane(self, agent: VehicleState) -> None:
        lane = self.lane_of(agent)
        while agent.s > lane.length:
            if agent.lane_id in self.aux_lanes or not agent.route:
                agent.s = lane.length
                agent.despawn = True
                return
            agent.s -= lane.length
            agent.lane_id = agent.route.pop(0)
            lane = self.lane_of(agent)

    def _pose_of(self, agent: VehicleState) -> ActorPose:
        lane = self.network.lanes.get(agent.lane_id)
        if lane is None:
            lane = self.aux_lanes[agent.lane_id]
        s = agent.s if agent.s <= lane.length else lane.length
        x, y, heading = lane.locate(s, agent.lateral_offset)
        return ActorPose(
            id=agent.id, kind=agent.kind, x=x, y=y, heading=heading,
            length=agent.length, width=agent.width, speed=agent.speed,
        )

    def step(self) -> None:
        """Advance the world by one dt tick."""
        dt = self.dt
        self._events = []
        self.orchestrator.expire_due(self)
        self._rebuild_lane_index()
        self.spawn_agents()
        for active in self.orchestrator.step_triggers(self):
            self._events.append({
                "type": "activation", "spec": active.spec_id,
                "subject": active.subject_id or "", "t": self.now,
            })

        # plan everything from the frozen pre-step snapshot
        plans: list[tuple[VehicleState, Plan, str]] = []
        noise_sd = self.config.nde.maneuver_noise
        for aid in self.agent_ids_ordered():
            agent = self.agents[aid]
            active = self.orchestrator.control_for(aid)
            if active is not None:
                plan = self.orchestrator.apply_behavior(active, agent, self, dt)
                controller = "adversity"
            elif agent.kind is AgentKind.AV:
                plan = self._av_plan(agent, self._context_for(agent))
                controller = "av"
            else:
                rng = self._agent_stream(aid)
                plan = plan_step(agent, self._context_for(agent), rng, noise_sd)
                controller = "nde"
            plans.append((agent, plan, controller))

        self._controllers = {}
        for agent, plan, controller in plans:
            self._controllers[agent.id] = controller
            if plan.lane_change is not LaneChange.KEEP:
                self._apply_lane_change(agent, plan.lane_change)
            integrate_step(agent, plan, dt)
            if plan.lateral_override is not None:
                agent.lateral_offset = plan.lateral_override
                agent.lat_rate = 0.0
            self._advance_lane(agent)

        av_state = self.agents.get(AV_ID)
        if av_state is not None:
            self.av_odometer_m = av_state.odometer_m
        for aid in [a for a, v in self.agents.items() if v.despawn]:
            self._events.append({"type": "despawn", "id": aid, "t": self.now + dt})
            self.agents.pop(aid)
            self._agent_rng.pop(aid, None)

        self.network.advance_signals(dt)
        self.step_index += 1
        self.now = self.step_index * dt

        # collision check on the post-integration footprints; cones are
        # presentation only, the closure itself is the routing constraint
        self._poses = {aid: self._pose_of(a) for aid, a in self.agents.items()}
        events = detect_collisions(list(self._poses.values()), self.now)
        if events:
            self.crash = events[0]
            for ev in events:
                self._events.append({"type": "crash", **ev.to_dict()})

        self._snapshot()

    def _snapshot(self) -> None:
        actors = []
        for aid in self.agent_ids_ordered():
            agent = self.agents[aid]
            pose = self._poses.get(aid) or self._pose_of(agent)
            actors.append([
                aid, agent.kind.value, agent.lane_id, agent.s, agent.lateral_offset,
                agent.speed, agent.accel, pose.heading, pose.x, pose.y,
                agent.length, agent.width, self._controllers.get(aid, ""),
            ])
        for cone in self.static_actors:
            actors.append([
                cone.id, "CONE", "", 0.0, 0.0, 0.0, 0.0, cone.heading,
                cone.x, cone.y, cone.length, cone.width, "",
            ])
        signals = {sid: sig.state.value for sid, sig in sorted(self.network.signals.items())}
        self.log.append({
            "t": self.now,
            "actors": actors,
            "signals": signals,
            "events": self._events,
        })

    # -- cosim glue --------------------------------------------------------------

    def _publish(self) -> None:
        if self.cosim is None:
            return
        from .cosim.schema import actor_state_message
        actors = []
        for aid in self.agent_ids_ordered():
            pose = self._poses.get(aid) or self._pose_of(self.agents[aid])
            agent = self.agents[aid]
            actors.append({
                "id": aid, "type": agent.kind.value, "x": pose.x, "y": pose.y,
                "heading": pose.heading, "speed": agent.speed, "accel": agent.accel,
                "length": agent.length, "width": agent.width,
            })
        for cone in self.static_actors:
            actors.append({
                "id": cone.id, "type": "CONE", "x": cone.x, "y": cone.y,
                "heading": cone.heading, "speed": 0.0, "accel": 0.0,
                "length": cone.length, "width": cone.width,
            })
        signals = [
            {"id": sid, "state": sig.state.value}
            for sid, sig in sorted(self.network.signals.items())
        ]
        msg = actor_state_message(self.now, actors, signals, weather=self.config.weather)
        self.cosim.publish_world(msg)
        av = self.av
        if av is not None:
            pose = self._poses.get(AV_ID) or self._pose_of(av)
            # the engine doubles as the physics host when none is attached
            self.cosim.publish_av_state(actor_state_message(self.now, [{
                "id": AV_ID, "type": "AV", "x": pose.x, "y": pose.y,
                "heading": pose.heading, "speed": av.speed, "accel": av.accel,
                "length": av.length, "width": av.width,
            }], platform="physics-sim"))

    def _await_control(self, deadline: float) -> None:
        if self.cosim is None or self.config.av.control != "COSIM":
            return
        cmd, stale = self.cosim.await_control(self.now, deadline)
        if stale:
            self._stale_commands += 1
        if cmd is not None:
            self._last_av_command = cmd["command"]

    # -- episode driver -------------------------------------------------------------

    def run(self) -> tuple[EpisodeRecord, TrajectoryLog]:
        wall_start = time.perf_counter()
        self._place_initial_agents()
        self._rebuild_lane_index()
        self._poses = {aid: self._pose_of(a) for aid, a in self.agents.items()}
        self._snapshot()
        if self.cosim is not None and self.config.av.control == "COSIM":
            self._publish()
            cmd, _ = self.cosim.await_control(self.now, self.config.cosim.handshake_timeout)
            if cmd is None:
                raise CosimTimeout(
                    f"no AV control within {self.config.cosim.handshake_timeout}s handshake window"
                )
            self._last_av_command = cmd["command"]
        elif self.cosim is not None:
            self._publish()

        max_steps = int(round(self.config.episode.max_duration / self.dt))
        nominal_m = self.config.episode.nominal_miles * MILE
        while self.step_index < max_steps:
            self.step()
            if self.cosim is not None:
                self._publish()
                self._await_control(self.config.cosim.step_deadline)
            if self.crash is not None:
                break
            if self.av is None or self.av_odometer_m >= nominal_m:
                break

        miles = self.av_odometer_m / MILE
        record = EpisodeRecord(
            seed=self.seed,
            mode=self.mode,
            miles=miles,
            nominal_miles=self.config.episode.nominal_miles,
            crash=self.crash is not None,
            weight=self.ledger.weight,
            log_weight=self.ledger.log_weight,
            crash_time=self.crash.time if self.crash else None,
            crash_partners=self.crash.partners if self.crash else None,
            activations=list(self.orchestrator.activation_log),
            wall_time_s=time.perf_counter() - wall_start,
        )
        record.log_digest = self.log.digest()
        record.validate()
        return record, self.log


def run_episode(config: ScenarioConfig, seed: int | None = None,
                cosim_server=None) -> tuple[EpisodeRecord, TrajectoryLog]:
    """Execute one seeded episode of the configured scenario."""
    episode = Episode(config, config.seed if seed is None else seed, cosim_server)
    return episode.run()


# --- batches ---------------------------------------------------------------------


@dataclass
class BatchResult:
    estimate: CrashRateEstimate
    records: list[EpisodeRecord]
    aborted_seeds: list[int]


_WORKER_CONFIG: dict = {}


def _worker_init(doc: dict) -> None:
    _WORKER_CONFIG["config"] = config_from_dict(doc)


def _worker_run(args) -> tuple[int, str | None, dict | None, list[str] | None]:
    seed, save_log = args
    config = _WORKER_CONFIG["config"]
    last_error = None
    for _ in range(2):  # one retry on failure
        try:
            record, log = run_episode(config, seed)
            lines = None
            if save_log == "all" or (save_log == "crashes" and record.crash):
                lines = [canonical_json(s) for s in log.steps]
            return seed, None, json.loads(record.to_json()), lines
        except Exception as exc:  # pragma: no cover - exercised via injected faults
            last_error = f"{type(exc).__name__}: {exc}"
    return seed, last_error, None, None


def run_batch(
    config: ScenarioConfig,
    n_episodes: int,
    workers: int = 1,
    out_dir: str | None = None,
    save_logs: str = "none",
    config_doc: dict | None = None,
) -> BatchResult:
    """Run n episodes with seeds seed+i, merged independently of worker count."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    if config.cosim.enabled and workers > 1:
        raise ConfigError("co-simulation episodes must run with workers=1")
    seeds = [config.seed + i for i in range(n_episodes)]
    results: dict[int, tuple[str | None, dict | None, list[str] | None]] = {}
    if workers <= 1:
        for seed in seeds:
            try:
                record, log = run_episode(config, seed)
                lines = None
                if save_logs == "all" or (save_logs == "crashes" and record.crash):
                    lines = [canonical_json(s) for s in log.steps]
                results[seed] = (None, json.loads(record.to_json()), lines)
            except CosimTimeout:
                raise
            except Exception as exc:
                try:
                    record, log = run_episode(config, seed)
                    lines = None
                    if save_logs == "all" or (save_logs == "crashes" and record.crash):
                        lines = [canonical_json(s) for s in log.steps]
                    results[seed] = (None, json.loads(record.to_json()), lines)
                except Exception:
                    results[seed] = (f"{type(exc).__name__}: {exc}", None, None)
    else:
        if config_doc is None:
            raise ConfigError("parallel batches need the raw config document")
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init, initargs=(config_doc,)
        ) as pool:
            for seed, err, rec, lines in pool.map(
                _worker_run, [(s, save_logs) for s in seeds], chunksize=8
            ):
                results[seed] = (err, rec, lines)

    records: list[EpisodeRecord] = []
    aborted: list[int] = []
    for seed in seeds:  # merge in seed order regardless of completion order
        err, rec, lines = results[seed]
        if err is not None:
            aborted.append(seed)
            continue
        record = EpisodeRecord.from_json(json.dumps(rec))
        records.append(record)
        if out_dir is not None and lines is not None:
            import os
            os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
            with open(os.path.join(out_dir, "logs", f"episode_{seed}.jsonl"),
                      "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")
    if not records:
        raise ConfigError("all episodes aborted")
    estimate = estimate_crash_rate(records)
    return BatchResult(estimate=estimate, records=records, aborted_seeds=aborted)
