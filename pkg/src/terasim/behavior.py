"""Naturalistic driving behavior: car-following, lane changes, and sampling.

Longitudinal control is the intelligent-driver model

    a = a_max * (1 - (v / v0)**delta - (s_star / gap)**2)
    s_star = s0 + v*T + v * (v - v_lead) / (2 * sqrt(a_max * b))

and lateral decisions use the MOBIL incentive criterion with a politeness
factor and a hard deceleration bound on the prospective new follower.
Behavior parameters are drawn per agent from truncated normal distributions
so the population is heterogeneous but statistically controlled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum

import numpy as np

# Hard deceleration limits (m/s^2). b_safe bounds what a lane change may force
# on the new follower; b_emergency caps any commanded braking.
B_SAFE = 4.0
B_EMERGENCY = 8.0

MILE = 1609.344  # meters


class AgentKind(str, Enum):
    CAR = "CAR"
    TRUCK = "TRUCK"
    CYCLIST = "CYCLIST"
    PEDESTRIAN = "PEDESTRIAN"
    AV = "AV"


class LaneChange(Enum):
    KEEP = 0
    LEFT = 1
    RIGHT = 2


@dataclass(slots=True)
class BehaviorParams:
    """Per-agent driving parameters; all strictly positive unless noted."""

    v0: float = 30.0              # desired speed, m/s
    a_max: float = 2.0            # maximum acceleration, m/s^2
    b: float = 3.0                # comfortable deceleration, m/s^2
    s0: float = 2.0               # minimum bumper gap, m
    T: float = 1.5                # desired time headway, s
    delta: float = 4.0            # free-acceleration exponent, >= 1
    politeness: float = 0.3       # MOBIL politeness, in [0, 1]
    lane_change_threshold: float = 0.2  # incentive threshold, m/s^2
    reaction_noise_sd: float = 0.0      # per-step accel perturbation, m/s^2

    def validate(self) -> None:
        for name in ("v0", "a_max", "b", "s0", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"BehaviorParams.{name} must be > 0")
        if self.delta < 1:
            raise ValueError("BehaviorParams.delta must be >= 1")
        if not 0.0 <= self.politeness <= 1.0:
            raise ValueError("BehaviorParams.politeness must be in [0, 1]")
        if self.reaction_noise_sd < 0:
            raise ValueError("BehaviorParams.reaction_noise_sd must be >= 0")


def idm_accel(
    ego_speed: float,
    gap: float | None,
    lead_speed: float,
    params: BehaviorParams,
    b_emergency: float = B_EMERGENCY,
) -> float:
    """Car-following acceleration; gap is bumper-to-bumper, None = free road.

    A non-positive gap with a leader present signals an imminent collision
    and returns full emergency braking.
    """
    free = 1.0 - (ego_speed / params.v0) ** params.delta
    if gap is None or math.isinf(gap):
        accel = params.a_max * free
    else:
        if gap <= 0.0:
            return -b_emergency
        s_star = params.s0 + ego_speed * params.T + (
            ego_speed * (ego_speed - lead_speed)
            / (2.0 * math.sqrt(params.a_max * params.b))
        )
        accel = params.a_max * (free - (s_star / gap) ** 2)
    if accel < -b_emergency:
        return -b_emergency
    if accel > params.a_max:
        return params.a_max
    return accel


def equilibrium_gap(params: BehaviorParams, speed: float) -> float:
    """Gap at which idm_accel(speed, gap, speed) vanishes.

    Closed form: (s0 + v*T) / sqrt(1 - (v/v0)**delta), defined for
    0 <= speed < v0.
    """
    if speed < 0:
        raise ValueError("speed must be >= 0")
    if speed >= params.v0:
        raise ValueError("no equilibrium at or above the desired speed")
    return (params.s0 + speed * params.T) / math.sqrt(
        1.0 - (speed / params.v0) ** params.delta
    )


@dataclass(slots=True)
class Neighbor:
    """A surrounding vehicle reduced to its kinematics. Gaps are bumper gaps."""

    gap: float
    speed: float


@dataclass(slots=True)
class Surroundings:
    """Leader/follower snapshot on the current and adjacent lanes."""

    leader: Neighbor | None = None
    follower: Neighbor | None = None
    left_leader: Neighbor | None = None
    left_follower: Neighbor | None = None
    right_leader: Neighbor | None = None
    right_follower: Neighbor | None = None
    has_left: bool = False
    has_right: bool = False


def _gap_speed(n: Neighbor | None) -> tuple[float | None, float]:
    return (None, 0.0) if n is None else (n.gap, n.speed)


def _change_incentive(
    speed: float,
    params: BehaviorParams,
    leader: Neighbor | None,
    new_leader: Neighbor | None,
    new_follower: Neighbor | None,
    old_follower: Neighbor | None,
    ego_length: float,
    b_safe: float,
) -> float | None:
    """MOBIL incentive for one direction, or None when unsafe."""
    gap, lead_v = _gap_speed(new_leader)
    a_ego_new = idm_accel(speed, gap, lead_v, params)
    gap, lead_v = _gap_speed(leader)
    a_ego_old = idm_accel(speed, gap, lead_v, params)

    a_nf_new = a_nf_old = 0.0
    if new_follower is not None:
        # after the change the ego becomes the follower's leader
        a_nf_new = idm_accel(new_follower.speed, new_follower.gap, speed, params)
        if a_nf_new < -b_safe:
            return None
        if new_leader is not None:
            combined = new_follower.gap + ego_length + new_leader.gap
            a_nf_old = idm_accel(new_follower.speed, combined, new_leader.speed, params)
        else:
            a_nf_old = idm_accel(new_follower.speed, None, 0.0, params)

    a_of_new = a_of_old = 0.0
    if old_follower is not None:
        a_of_old = idm_accel(old_follower.speed, old_follower.gap, speed, params)
        if leader is not None:
            combined = old_follower.gap + ego_length + leader.gap
            a_of_new = idm_accel(old_follower.speed, combined, leader.speed, params)
        else:
            a_of_new = idm_accel(old_follower.speed, None, 0.0, params)

    return (a_ego_new - a_ego_old) + params.politeness * (
        (a_nf_new - a_nf_old) + (a_of_new - a_of_old)
    )


def mobil_lane_change(
    speed: float,
    params: BehaviorParams,
    sur: Surroundings,
    ego_length: float = 4.6,
    b_safe: float = B_SAFE,
    mandatory: LaneChange | None = None,
) -> LaneChange:
    """Lane-change decision from kinematics alone; ties break LEFT.

    With `mandatory` set (e.g. an upcoming lane closure) the incentive test
    is waived for that direction, but the new-follower safety bound still
    applies.
    """
    left = right = None
    if sur.has_left:
        left = _change_incentive(
            speed, params, sur.leader, sur.left_leader, sur.left_follower,
            sur.follower, ego_length, b_safe,
        )
    if sur.has_right:
        right = _change_incentive(
            speed, params, sur.leader, sur.right_leader, sur.right_follower,
            sur.follower, ego_length, b_safe,
        )
    if mandatory is not None:
        if mandatory == LaneChange.LEFT and left is not None:
            return LaneChange.LEFT
        if mandatory == LaneChange.RIGHT and right is not None:
            return LaneChange.RIGHT
        return LaneChange.KEEP
    th = params.lane_change_threshold
    best = LaneChange.KEEP
    best_incentive = th
    if right is not None and right > best_incentive:
        best, best_incentive = LaneChange.RIGHT, right
    # evaluated after RIGHT with >= so equal incentives resolve LEFT
    if left is not None and left >= best_incentive and left > th:
        best = LaneChange.LEFT
    return best


# --- parameter sampling ----------------------------------------------------


@dataclass(slots=True)
class TruncatedNormal:
    """Truncated normal; mean may be None to defer to a context default."""

    mean: float | None
    sd: float
    min: float
    max: float

    def validate(self, path: str) -> None:
        if self.sd < 0:
            raise ValueError(f"{path}.sd must be >= 0")
        if self.mean is not None and not self.min <= self.mean <= self.max:
            raise ValueError(f"{path}: requires min <= mean <= max")

    def sample(self, rng: np.random.Generator, default_mean: float | None = None) -> float:
        mean = self.mean if self.mean is not None else default_mean
        if mean is None:
            raise ValueError("mean unset and no context default supplied")
        if self.sd == 0.0:
            return float(min(max(mean, self.min), self.max))
        for _ in range(256):
            x = rng.normal(mean, self.sd)
            if self.min <= x <= self.max:
                return float(x)
        return float(min(max(mean, self.min), self.max))


def _tn(mean, sd, lo, hi) -> TruncatedNormal:
    return TruncatedNormal(mean, sd, lo, hi)


# Default car distributions; v0 mean None means "spawn lane speed limit".
DEFAULT_DISTRIBUTIONS: dict[AgentKind, dict[str, TruncatedNormal]] = {
    AgentKind.CAR: {
        "v0": _tn(None, 2.0, 5.0, 45.0),
        "a_max": _tn(2.0, 0.3, 1.0, 3.5),
        "b": _tn(3.0, 0.3, 1.5, 4.5),
        "s0": _tn(2.0, 0.3, 1.0, 4.0),
        "T": _tn(1.5, 0.2, 0.8, 2.5),
        "delta": _tn(4.0, 0.0, 4.0, 4.0),
        "politeness": _tn(0.3, 0.1, 0.0, 1.0),
        "lane_change_threshold": _tn(0.2, 0.0, 0.2, 0.2),
        "reaction_noise_sd": _tn(0.0, 0.0, 0.0, 0.0),
    },
    AgentKind.TRUCK: {
        "v0": _tn(None, 1.5, 5.0, 33.0),
        "a_max": _tn(1.2, 0.2, 0.6, 2.0),
        "b": _tn(2.0, 0.2, 1.0, 3.0),
        "s0": _tn(3.0, 0.4, 1.5, 5.0),
        "T": _tn(1.8, 0.2, 1.0, 2.8),
        "delta": _tn(4.0, 0.0, 4.0, 4.0),
        "politeness": _tn(0.4, 0.1, 0.0, 1.0),
        "lane_change_threshold": _tn(0.3, 0.0, 0.3, 0.3),
        "reaction_noise_sd": _tn(0.0, 0.0, 0.0, 0.0),
    },
    AgentKind.CYCLIST: {
        "v0": _tn(5.0, 1.0, 2.5, 9.0),
        "a_max": _tn(1.0, 0.0, 1.0, 1.0),
        "b": _tn(2.0, 0.0, 2.0, 2.0),
        "s0": _tn(1.0, 0.0, 1.0, 1.0),
        "T": _tn(1.0, 0.0, 1.0, 1.0),
        "delta": _tn(4.0, 0.0, 4.0, 4.0),
        "politeness": _tn(1.0, 0.0, 1.0, 1.0),
        "lane_change_threshold": _tn(10.0, 0.0, 10.0, 10.0),
        "reaction_noise_sd": _tn(0.0, 0.0, 0.0, 0.0),
    },
    AgentKind.PEDESTRIAN: {
        "v0": _tn(1.4, 0.2, 0.8, 2.2),
        "a_max": _tn(1.0, 0.0, 1.0, 1.0),
        "b": _tn(1.0, 0.0, 1.0, 1.0),
        "s0": _tn(0.5, 0.0, 0.5, 0.5),
        "T": _tn(0.5, 0.0, 0.5, 0.5),
        "delta": _tn(1.0, 0.0, 1.0, 1.0),
        "politeness": _tn(1.0, 0.0, 1.0, 1.0),
        "lane_change_threshold": _tn(10.0, 0.0, 10.0, 10.0),
        "reaction_noise_sd": _tn(0.0, 0.0, 0.0, 0.0),
    },
}
DEFAULT_DISTRIBUTIONS[AgentKind.AV] = DEFAULT_DISTRIBUTIONS[AgentKind.CAR]

PARAM_FIELDS = [f.name for f in fields(BehaviorParams)]

DEFAULT_DIMENSIONS: dict[AgentKind, tuple[float, float]] = {
    AgentKind.CAR: (4.6, 1.8),
    AgentKind.TRUCK: (9.0, 2.5),
    AgentKind.CYCLIST: (1.8, 0.6),
    AgentKind.PEDESTRIAN: (0.5, 0.5),
    AgentKind.AV: (4.8, 1.9),
}


@dataclass
class NdeConfig:
    """Population-level behavior configuration for the naturalistic traffic."""

    distributions: dict[AgentKind, dict[str, TruncatedNormal]] = field(
        default_factory=lambda: {
            kind: dict(per_kind) for kind, per_kind in DEFAULT_DISTRIBUTIONS.items()
        }
    )
    spawn_rate: float = 0.0           # vehicles/second per spawn point
    kind_weights: dict[AgentKind, float] = field(
        default_factory=lambda: {AgentKind.CAR: 1.0}
    )
    maneuver_noise: float = 0.0       # accel perturbation sd, m/s^2

    def validate(self) -> None:
        if self.spawn_rate < 0:
            raise ValueError("nde.spawn_rate must be >= 0")
        if self.maneuver_noise < 0:
            raise ValueError("nde.maneuver_noise must be >= 0")
        for kind, per_kind in self.distributions.items():
            for name, dist in per_kind.items():
                if name not in PARAM_FIELDS:
                    raise ValueError(f"nde.params.{kind.value}.{name}: unknown field")
                dist.validate(f"nde.params.{kind.value}.{name}")


def sample_behavior(
    config: NdeConfig,
    kind: AgentKind,
    rng: np.random.Generator,
    default_v0: float | None = None,
) -> BehaviorParams:
    """Draw one agent's parameters; deterministic given the generator state.

    Fields are sampled in declaration order. A v0 distribution with mean None
    centers on `default_v0` (normally the spawn lane's speed limit).
    """
    dists = config.distributions.get(kind) or DEFAULT_DISTRIBUTIONS[kind]
    values = {}
    for name in PARAM_FIELDS:
        dist = dists.get(name) or DEFAULT_DISTRIBUTIONS[kind][name]
        values[name] = dist.sample(rng, default_v0 if name == "v0" else None)
    params = BehaviorParams(**values)
    params.validate()
    return params


# --- vehicle state and stepping ---------------------------------------------


@dataclass(slots=True)
class VehicleState:
    """Kinematic and lane-position state of one traffic participant."""

    id: str
    kind: AgentKind
    lane_id: str
    s: float
    speed: float
    behavior: BehaviorParams
    route: list[str]
    lateral_offset: float = 0.0
    accel: float = 0.0
    heading: float = 0.0
    length: float = 4.6
    width: float = 1.8
    active_adversity: str | None = None
    # lateral animation: offset decays to zero at lat_rate m/s
    lat_rate: float = 0.0
    odometer_m: float = 0.0
    despawn: bool = False

    def clone(self) -> "VehicleState":
        v = replace(self)  # type: ignore[arg-type]
        v.route = list(self.route)
        return v


@dataclass(slots=True)
class StepContext:
    """Everything nde_step may react to, computed from the pre-step snapshot."""

    sur: Surroundings
    lane_length: float
    speed_limit: float
    red_signal_distance: float | None = None   # distance to a red stop line
    closure_distance: float | None = None      # distance to a closed interval
    merge_direction: LaneChange | None = None  # mandatory merge for closures


@dataclass(slots=True)
class Plan:
    """One step's control decision, applied after all agents have planned."""

    accel: float = 0.0
    lane_change: LaneChange = LaneChange.KEEP
    target_speed: float | None = None      # constant-speed agents set this
    lateral_override: float | None = None  # precise lateral control (swerves)


def _effective_leader(ctx: StepContext) -> Neighbor | None:
    """The binding constraint ahead: real leader, red signal, or closure."""
    leader = ctx.sur.leader
    for dist in (ctx.red_signal_distance, ctx.closure_distance):
        if dist is not None and (leader is None or dist < leader.gap):
            leader = Neighbor(gap=dist, speed=0.0)
    return leader


def nearest_constraint_gap(ctx: StepContext) -> float | None:
    """Bumper gap to the binding constraint ahead, if any."""
    leader = _effective_leader(ctx)
    return None if leader is None else leader.gap


def plan_step(
    vehicle: VehicleState,
    ctx: StepContext,
    rng: np.random.Generator | None,
    noise_sd: float = 0.0,
) -> Plan:
    """Compute the naturalistic plan for one vehicle from a frozen snapshot."""
    if vehicle.kind is AgentKind.PEDESTRIAN:
        return Plan(accel=0.0, target_speed=vehicle.speed)
    if vehicle.kind is AgentKind.CYCLIST:
        # constant cruise, but never through a red light or an obstruction
        leader = _effective_leader(ctx)
        if leader is not None and leader.gap < vehicle.behavior.s0 + vehicle.speed * 2.0:
            return Plan(accel=idm_accel(vehicle.speed, leader.gap, leader.speed,
                                        vehicle.behavior))
        return Plan(accel=0.0, target_speed=min(vehicle.behavior.v0, ctx.speed_limit))

    leader = _effective_leader(ctx)
    gap, lead_v = _gap_speed(leader)
    accel = idm_accel(vehicle.speed, gap, lead_v, vehicle.behavior)
    sd = noise_sd if noise_sd > 0 else vehicle.behavior.reaction_noise_sd
    if sd > 0 and rng is not None:
        accel += rng.normal(0.0, sd)
        if accel > vehicle.behavior.a_max:
            accel = vehicle.behavior.a_max
        elif accel < -B_EMERGENCY:
            accel = -B_EMERGENCY
    change = LaneChange.KEEP
    if vehicle.lat_rate == 0.0:  # no stacked changes mid-animation
        change = mobil_lane_change(
            vehicle.speed, vehicle.behavior, ctx.sur,
            ego_length=vehicle.length, mandatory=ctx.merge_direction,
        )
    return Plan(accel=accel, lane_change=change)


LANE_CHANGE_SECONDS = 3.0


def integrate_step(vehicle: VehicleState, plan: Plan, dt: float) -> float:
    """Semi-implicit Euler update in lane coordinates; returns distance moved.

    Lane transitions (route following, lane changes) are the engine's job;
    this advances speed, s, and the lateral animation only.
    """
    if plan.target_speed is not None:
        vehicle.speed = plan.target_speed
        vehicle.accel = plan.accel
    else:
        vehicle.accel = plan.accel
        vehicle.speed += plan.accel * dt
        if vehicle.speed < 0.0:
            vehicle.speed = 0.0
    ds = vehicle.speed * dt
    vehicle.s += ds
    vehicle.odometer_m += ds
    if vehicle.lateral_offset != 0.0 and vehicle.lat_rate != 0.0:
        step = vehicle.lat_rate * dt
        if abs(vehicle.lateral_offset) <= step:
            vehicle.lateral_offset = 0.0
            vehicle.lat_rate = 0.0
        else:
            vehicle.lateral_offset -= math.copysign(step, vehicle.lateral_offset)
    return ds


def nde_step(
    vehicle: VehicleState,
    ctx: StepContext,
    rng: np.random.Generator | None,
    dt: float,
    noise_sd: float = 0.0,
) -> VehicleState:
    """Plan and integrate one naturalistic step for a single vehicle.

    Mutates and returns `vehicle`. Route following past the lane end is left
    to the caller; `vehicle.despawn` is set when the route is exhausted there.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    plan = plan_step(vehicle, ctx, rng, noise_sd)
    integrate_step(vehicle, plan, dt)
    if vehicle.s > ctx.lane_length and not vehicle.route:
        vehicle.despawn = True
    return vehicle
