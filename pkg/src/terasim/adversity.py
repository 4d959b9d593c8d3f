"""Adversity orchestration: trigger conditions, activated behaviors, rolls.

Each adversity couples a pure trigger predicate with an override behavior and
a per-eligible-step Bernoulli activation probability: p under the natural
measure, q under the boosted proposal. The orchestrator owns the per-episode
active set, cooldowns, and concurrency budgets; activation rolls feed the
episode's likelihood ledger when boosting is on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .behavior import AgentKind, BehaviorParams, LaneChange, Plan, VehicleState, idm_accel


class ConfigError(ValueError):
    """Invalid scenario or adversity configuration."""


class TriggerKind(str, Enum):
    LEAD_GAP_AND_SPEED_DIFF = "LEAD_GAP_AND_SPEED_DIFF"
    APPROACHING_INTERSECTION = "APPROACHING_INTERSECTION"
    SHARED_LANE_WITH_CYCLIST = "SHARED_LANE_WITH_CYCLIST"
    PEDESTRIAN_CROSSING_WINDOW = "PEDESTRIAN_CROSSING_WINDOW"
    TIME_WINDOW = "TIME_WINDOW"
    ALWAYS = "ALWAYS"


class BehaviorKind(str, Enum):
    HARD_BRAKE = "HARD_BRAKE"
    CUT_IN = "CUT_IN"
    FAIL_TO_YIELD = "FAIL_TO_YIELD"
    JAYWALK = "JAYWALK"
    CYCLIST_SWERVE = "CYCLIST_SWERVE"
    LANE_CLOSURE = "LANE_CLOSURE"
    SIGNAL_OVERRIDE = "SIGNAL_OVERRIDE"


class TakeoverMode(str, Enum):
    TRAJECTORY = "TRAJECTORY"
    HIGH_LEVEL_COMMAND = "HIGH_LEVEL_COMMAND"


class Scope(str, Enum):
    STATIC = "STATIC"
    DYNAMIC = "DYNAMIC"


@dataclass(frozen=True)
class TriggerCondition:
    kind: TriggerKind
    max_gap: float = 20.0             # LEAD_GAP_AND_SPEED_DIFF, SHARED_LANE
    min_speed_diff: float = 5.0       # LEAD_GAP_AND_SPEED_DIFF
    max_distance_to_conflict: float = 30.0  # APPROACHING_INTERSECTION, CROSSING
    start: float = 0.0                # TIME_WINDOW
    end: float = math.inf             # TIME_WINDOW

    def validate(self, path: str) -> None:
        for name in ("max_gap", "min_speed_diff", "max_distance_to_conflict"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{path}.{name} must be > 0")
        if self.end <= self.start:
            raise ConfigError(f"{path}: requires start < end")


@dataclass(frozen=True)
class ActivatedBehavior:
    kind: BehaviorKind
    takeover: TakeoverMode = TakeoverMode.HIGH_LEVEL_COMMAND
    duration: float = 3.0             # timed behaviors
    decel: float = 6.0                # HARD_BRAKE
    aggressive_gap: float = 5.0       # CUT_IN: resulting bumper gap bound
    settle_time: float = 2.0          # CUT_IN: extra time after the change
    post_decel: float = 2.5           # CUT_IN: impeding deceleration once inserted
    crossing_speed: float = 2.5       # JAYWALK
    amplitude: float = 1.0            # CYCLIST_SWERVE, meters
    period: float = 2.0               # CYCLIST_SWERVE, seconds
    lane: str | None = None           # LANE_CLOSURE target lane
    interval: tuple[float, float] | None = None  # LANE_CLOSURE
    signal: str | None = None         # SIGNAL_OVERRIDE target
    override_state: str = "GREEN"     # SIGNAL_OVERRIDE

    def validate(self, path: str) -> None:
        if self.duration <= 0:
            raise ConfigError(f"{path}.duration must be > 0")
        if self.kind is BehaviorKind.HARD_BRAKE and self.decel <= 0:
            raise ConfigError(f"{path}.decel must be > 0")
        if self.kind is BehaviorKind.LANE_CLOSURE:
            if self.lane is None or self.interval is None:
                raise ConfigError(f"{path}: LANE_CLOSURE needs lane and interval")
            a, b = self.interval
            if not a < b:
                raise ConfigError(f"{path}.interval must have start < end")
        if self.kind is BehaviorKind.SIGNAL_OVERRIDE and self.signal is None:
            raise ConfigError(f"{path}: SIGNAL_OVERRIDE needs a signal id")
        if self.kind is BehaviorKind.CYCLIST_SWERVE and self.period <= 0:
            raise ConfigError(f"{path}.period must be > 0")


@dataclass
class AdversitySpec:
    id: str
    scope: Scope
    trigger: TriggerCondition
    behavior: ActivatedBehavior
    p: float                          # natural per-eligible-step probability
    q: float | None = None            # proposal probability; defaults to p
    eligible_kinds: tuple[AgentKind, ...] = (AgentKind.CAR,)
    max_concurrent: int = 1
    cooldown: float = 30.0

    def __post_init__(self):
        if self.q is None:
            self.q = self.p

    def validate(self, path: str = "") -> None:
        path = path or f"adversities[{self.id}]"
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"{path}.p must be in [0, 1]")
        if not self.p <= self.q <= 1.0:
            raise ConfigError(f"{path}.q must satisfy p <= q <= 1")
        if self.q >= 1.0 and self.p < 1.0 and self.q > self.p:
            # q == 1 with p < 1 makes the non-activation branch unreachable,
            # which is exactly what a scripted scenario wants; smaller q must
            # stay below 1 so (1-p)/(1-q) is finite.
            pass
        if self.cooldown < 0:
            raise ConfigError(f"{path}.cooldown must be >= 0")
        if self.max_concurrent < 1:
            raise ConfigError(f"{path}.max_concurrent must be >= 1")
        self.trigger.validate(f"{path}.trigger")
        self.behavior.validate(f"{path}.behavior")
        if self.scope is Scope.STATIC and self.behavior.kind not in (
            BehaviorKind.LANE_CLOSURE, BehaviorKind.SIGNAL_OVERRIDE,
        ):
            raise ConfigError(f"{path}: static scope requires an infrastructure behavior")
        if self.scope is Scope.DYNAMIC and self.behavior.kind in (
            BehaviorKind.LANE_CLOSURE, BehaviorKind.SIGNAL_OVERRIDE,
        ):
            raise ConfigError(f"{path}: infrastructure behaviors are static scope")


@dataclass
class ActiveAdversity:
    spec_id: str
    subject_id: str | None            # None for static adversities
    started_at: float
    expires_at: float
    saved_behavior: BehaviorParams | None = None
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ActivationRoll:
    activated: bool
    weight_factor: float


def roll_activation(
    spec: AdversitySpec, rng: np.random.Generator, nade_enabled: bool
) -> ActivationRoll:
    """Bernoulli activation draw; under boosting, the draw uses q and the
    likelihood-ratio factor for this roll is returned."""
    prob = spec.q if nade_enabled else spec.p
    activated = bool(rng.random() < prob)
    if not nade_enabled or spec.q == spec.p:
        return ActivationRoll(activated, 1.0)
    if activated:
        return ActivationRoll(True, spec.p / spec.q)
    return ActivationRoll(False, (1.0 - spec.p) / (1.0 - spec.q))


# --- trigger evaluation -----------------------------------------------------
#
# The world argument is the engine's read-only view; the orchestrator uses:
#   world.now, world.av, world.agents, world.network,
#   world.leader_info(agent)       -> (gap, speed) | None
#   world.distance_to_lane_end(agent) -> float
#   world.lane_is_signal_controlled(lane_id) -> bool
#   world.lane_clear(lane_id, a, b) -> bool
#   world.adjacent_side_to_lane(from_lane, to_lane) -> LaneChange | None
#   world.path_length(agent)       -> float (pedestrians)


def evaluate_trigger(spec: AdversitySpec, agent: VehicleState | None, world) -> bool:
    """Pure trigger predicate; no state is mutated."""
    t = spec.trigger
    if t.kind is TriggerKind.ALWAYS:
        triggered = True
    elif t.kind is TriggerKind.TIME_WINDOW:
        triggered = t.start <= world.now < t.end
    elif t.kind is TriggerKind.LEAD_GAP_AND_SPEED_DIFF:
        info = world.leader_info(agent)
        triggered = (
            info is not None
            and info[0] <= t.max_gap
            and agent.speed - info[1] >= t.min_speed_diff
        )
    elif t.kind is TriggerKind.APPROACHING_INTERSECTION:
        triggered = (
            world.distance_to_lane_end(agent) <= t.max_distance_to_conflict
            and world.lane_is_signal_controlled(agent.lane_id)
        )
    elif t.kind is TriggerKind.SHARED_LANE_WITH_CYCLIST:
        triggered = False
        for other in world.agents.values():
            if other.id == agent.id or other.lane_id != agent.lane_id:
                continue
            if other.kind in (AgentKind.CAR, AgentKind.TRUCK, AgentKind.AV) and (
                abs(other.s - agent.s) <= t.max_gap
            ):
                triggered = True
                break
    elif t.kind is TriggerKind.PEDESTRIAN_CROSSING_WINDOW:
        triggered = False
        px, py = world.position_of(agent)
        for other in world.agents.values():
            if other.kind not in (AgentKind.CAR, AgentKind.TRUCK, AgentKind.AV):
                continue
            ox, oy = world.position_of(other)
            if math.hypot(ox - px, oy - py) <= t.max_distance_to_conflict:
                triggered = True
                break
    else:  # pragma: no cover
        raise ConfigError(f"unhandled trigger kind {t.kind}")
    return triggered and _behavior_applicable(spec, agent, world)


def _behavior_applicable(spec: AdversitySpec, agent: VehicleState | None, world) -> bool:
    """Gate rolls on the behavior being executable right now."""
    b = spec.behavior
    if b.kind is BehaviorKind.CUT_IN:
        av = world.av
        if av is None or agent is None or agent.lat_rate != 0.0:
            return False
        side = world.adjacent_side_to_lane(agent.lane_id, av.lane_id)
        if side is None:
            return False
        ahead = agent.s - av.s
        return 0.0 < ahead <= b.aggressive_gap + (agent.length + av.length) / 2.0
    if b.kind is BehaviorKind.LANE_CLOSURE:
        assert b.interval is not None
        lane = world.network.lanes.get(b.lane)
        if lane is None:
            return False
        a, z = b.interval
        return z <= lane.length and world.lane_clear(b.lane, a, z)
    if b.kind is BehaviorKind.SIGNAL_OVERRIDE:
        return b.signal in world.network.signals
    if b.kind is BehaviorKind.JAYWALK:
        return agent is not None and agent.kind is AgentKind.PEDESTRIAN
    return True


class AdversityOrchestrator:
    """Per-episode adversity state machine; single-threaded with the engine."""

    def __init__(
        self,
        specs: list[AdversitySpec],
        nade_enabled: bool,
        rng_for_spec,
        ledger=None,
    ):
        self.specs = sorted(specs, key=lambda s: s.id)
        seen = set()
        for spec in self.specs:
            if spec.id in seen:
                raise ConfigError(f"duplicate adversity id {spec.id!r}")
            seen.add(spec.id)
            spec.validate()
        self.nade_enabled = nade_enabled
        self.ledger = ledger
        self._rng = {spec.id: rng_for_spec(spec.id) for spec in self.specs}
        self.active_by_subject: dict[str, ActiveAdversity] = {}
        self.active_static: dict[str, ActiveAdversity] = {}
        self.active_count: dict[str, int] = {spec.id: 0 for spec in self.specs}
        self.cooldown_until: dict[tuple[str, str], float] = {}
        self.activation_log: list[tuple[str, float, str]] = []

    # -- gating ---------------------------------------------------------

    def _eligible(self, spec: AdversitySpec, subject_id: str | None, now: float) -> bool:
        if self.active_count[spec.id] >= spec.max_concurrent:
            return False
        key = (spec.id, subject_id or "")
        if self.cooldown_until.get(key, -math.inf) > now:
            return False
        if subject_id is not None and subject_id in self.active_by_subject:
            return False  # one active dynamic adversity per subject
        if subject_id is None and spec.id in self.active_static:
            return False
        return True

    # -- per-step driver --------------------------------------------------

    def step_triggers(self, world) -> list[ActiveAdversity]:
        """Evaluate all specs against all eligible subjects; roll and activate."""
        started: list[ActiveAdversity] = []
        now = world.now
        for spec in self.specs:
            if spec.scope is Scope.STATIC:
                if not self._eligible(spec, None, now):
                    continue
                if not evaluate_trigger(spec, None, world):
                    continue
                roll = self._roll(spec)
                if roll.activated:
                    started.append(self._activate(spec, None, world))
                continue
            for agent_id in world.agent_ids_ordered():
                agent = world.agents[agent_id]
                if agent.kind not in spec.eligible_kinds or agent.kind is AgentKind.AV:
                    continue
                if not self._eligible(spec, agent_id, now):
                    continue
                if not evaluate_trigger(spec, agent, world):
                    continue
                roll = self._roll(spec)
                if roll.activated:
                    started.append(self._activate(spec, agent_id, world))
        return started

    def _roll(self, spec: AdversitySpec) -> ActivationRoll:
        roll = roll_activation(spec, self._rng[spec.id], self.nade_enabled)
        if self.nade_enabled and self.ledger is not None:
            self.ledger.record_roll(spec.p, spec.q, roll.activated)
        return roll

    def _activate(self, spec: AdversitySpec, subject_id: str | None, world) -> ActiveAdversity:
        now = world.now
        expires = now + spec.behavior.duration
        saved = None
        data: dict = {}
        if subject_id is not None:
            agent = world.agents[subject_id]
            saved = BehaviorParams(**{
                f: getattr(agent.behavior, f)
                for f in agent.behavior.__dataclass_fields__  # type: ignore[attr-defined]
            })
            agent.active_adversity = spec.id
            if spec.behavior.kind is BehaviorKind.CUT_IN:
                expires = now + 3.0 + spec.behavior.settle_time
                data["changed"] = False
            elif spec.behavior.kind is BehaviorKind.JAYWALK:
                expires = now + max(
                    spec.behavior.duration,
                    world.path_length(agent) / spec.behavior.crossing_speed + 1.0,
                )
        active = ActiveAdversity(
            spec_id=spec.id, subject_id=subject_id,
            started_at=now, expires_at=expires, saved_behavior=saved, data=data,
        )
        if subject_id is None:
            self.active_static[spec.id] = active
            world.apply_static_effect(spec, active)
        else:
            self.active_by_subject[subject_id] = active
        self.active_count[spec.id] += 1
        self.activation_log.append((spec.id, now, subject_id or ""))
        return active

    # -- behavior override -------------------------------------------------

    def control_for(self, subject_id: str) -> ActiveAdversity | None:
        return self.active_by_subject.get(subject_id)

    def apply_behavior(self, active: ActiveAdversity, agent: VehicleState, world, dt: float) -> Plan:
        """Override plan for the subject while the adversity is live."""
        spec = self.spec_by_id(active.spec_id)
        b = spec.behavior
        if b.kind is BehaviorKind.HARD_BRAKE:
            return Plan(accel=-b.decel)
        if b.kind is BehaviorKind.FAIL_TO_YIELD:
            # drives as if the road were free: no leader, signal, or yield response
            return Plan(accel=idm_accel(agent.speed, None, 0.0, agent.behavior))
        if b.kind is BehaviorKind.CUT_IN:
            if not active.data.get("changed"):
                av = world.av
                side = None
                if av is not None:
                    side = world.adjacent_side_to_lane(agent.lane_id, av.lane_id)
                active.data["changed"] = True
                if side is not None:
                    return Plan(accel=0.0, lane_change=side)
            # once inserted, impede: brake to a standstill until the takeover ends
            if agent.speed > 0.0:
                return Plan(accel=-b.post_decel)
            return Plan(accel=0.0)
        if b.kind is BehaviorKind.JAYWALK:
            return Plan(accel=0.0, target_speed=b.crossing_speed)
        if b.kind is BehaviorKind.CYCLIST_SWERVE:
            phase = 2.0 * math.pi * (world.now - active.started_at) / b.period
            plan = Plan(accel=0.0, target_speed=agent.behavior.v0)
            plan.lateral_override = b.amplitude * math.sin(phase)
            return plan
        raise ConfigError(f"behavior {b.kind} has no per-agent control")

    def spec_by_id(self, spec_id: str) -> AdversitySpec:
        for spec in self.specs:
            if spec.id == spec_id:
                return spec
        raise KeyError(spec_id)

    # -- expiry -------------------------------------------------------------

    def expire_due(self, world) -> list[ActiveAdversity]:
        """Retire adversities whose time is up or whose subject is gone."""
        now = world.now
        done: list[ActiveAdversity] = []
        for subject_id in sorted(self.active_by_subject):
            active = self.active_by_subject[subject_id]
            agent = world.agents.get(subject_id)
            spec = self.spec_by_id(active.spec_id)
            path_done = (
                spec.behavior.kind is BehaviorKind.JAYWALK
                and agent is not None
                and world.path_remaining(agent) <= 0.0
            )
            if agent is None or now >= active.expires_at or path_done:
                done.append(active)
                self.expire_and_restore(active, agent, now)
        for spec_id in sorted(self.active_static):
            active = self.active_static[spec_id]
            if now >= active.expires_at:
                done.append(active)
                self.expire_and_restore(active, None, now, world)
        return done

    def expire_and_restore(self, active: ActiveAdversity, agent: VehicleState | None,
                           now: float, world=None) -> None:
        """Restore the nominal behavior and start the subject's cooldown."""
        spec = self.spec_by_id(active.spec_id)
        if active.subject_id is None:
            if world is not None:
                world.remove_static_effect(spec, active)
            self.active_static.pop(active.spec_id, None)
        else:
            if agent is not None:
                if active.saved_behavior is not None:
                    agent.behavior = active.saved_behavior
                agent.active_adversity = None
            self.active_by_subject.pop(active.subject_id, None)
        self.active_count[active.spec_id] -= 1
        key = (active.spec_id, active.subject_id or "")
        self.cooldown_until[key] = now + spec.cooldown
