"""Post-run analysis: safety report aggregation and crash event timelines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .estimation import (
    CrashRateEstimate,
    EpisodeRecord,
    InsufficientEventsError,
    acceleration_factor,
    estimate_crash_rate,
)

DEFAULT_HUMAN_BASELINE = 1.86e-6  # crashes per mile, average human driver
DEFAULT_ATTRIBUTION_WINDOW = 10.0  # seconds
TIMELINE_WINDOW = 15.0             # seconds of context before a crash


@dataclass
class AdversityStats:
    spec_id: str
    activations: int
    attributed_crashes: int


@dataclass
class SafetyReport:
    estimate: CrashRateEstimate
    per_adversity: list[AdversityStats]
    total_miles: float
    total_episodes: int
    wall_time_s: float
    attribution_window: float
    insufficient_events: bool
    human_baseline: float | None = None
    baseline_ratio: float | None = None
    acceleration: float | None = None
    episode_convention: str = "crash-truncated, fixed nominal length"

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate.to_dict(),
            "per_adversity": [
                {
                    "spec_id": s.spec_id,
                    "activations": s.activations,
                    "attributed_crashes": s.attributed_crashes,
                }
                for s in self.per_adversity
            ],
            "exposure": {
                "total_miles": self.total_miles,
                "total_episodes": self.total_episodes,
                "wall_time_s": self.wall_time_s,
            },
            "attribution_window": self.attribution_window,
            "insufficient_events": self.insufficient_events,
            "human_baseline": self.human_baseline,
            "baseline_ratio": self.baseline_ratio,
            "acceleration": self.acceleration,
            "episode_convention": self.episode_convention,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def build_report(
    records: list[EpisodeRecord],
    logs=None,
    human_baseline: float | None = None,
    attribution_window: float = DEFAULT_ATTRIBUTION_WINDOW,
    nde_records: list[EpisodeRecord] | None = None,
) -> SafetyReport:
    """Aggregate one run's records into the quantitative safety report.

    Pure function of its inputs: identical records yield identical bytes.
    When a paired natural-mode record set is supplied, the measured
    acceleration factor is included.
    """
    if not records:
        raise ValueError("no records")
    total_miles = sum(r.miles for r in records)
    if total_miles <= 0:
        raise ValueError("records cover zero miles")
    estimate = estimate_crash_rate(records)

    activations: dict[str, int] = {}
    attributed: dict[str, int] = {}
    for rec in records:
        for spec_id, t, subject in rec.activations:
            activations[spec_id] = activations.get(spec_id, 0) + 1
            if (
                rec.crash
                and rec.crash_time is not None
                and rec.crash_partners is not None
                and subject in rec.crash_partners
                and rec.crash_time - attribution_window <= t <= rec.crash_time
            ):
                attributed[spec_id] = attributed.get(spec_id, 0) + 1
    per_adversity = [
        AdversityStats(spec_id, activations[spec_id], attributed.get(spec_id, 0))
        for spec_id in sorted(activations)
    ]

    insufficient = estimate.n_crashes_raw == 0
    ratio = None
    if human_baseline is not None:
        ratio = 0.0 if insufficient else estimate.r_hat / human_baseline
    accel = None
    if nde_records:
        try:
            accel = acceleration_factor(nde_records, records)
        except InsufficientEventsError:
            accel = None
    return SafetyReport(
        estimate=estimate,
        per_adversity=per_adversity,
        total_miles=total_miles,
        total_episodes=len(records),
        wall_time_s=sum(r.wall_time_s for r in records),
        attribution_window=attribution_window,
        insufficient_events=insufficient,
        human_baseline=human_baseline,
        baseline_ratio=ratio,
        acceleration=accel,
    )


def report_to_text(report: SafetyReport) -> str:
    est = report.estimate
    lines = [
        "safety report",
        "=============",
        f"episodes            {report.total_episodes}",
        f"total miles         {report.total_miles:.4f}",
        f"wall time           {report.wall_time_s:.1f} s",
        f"raw crashes         {est.n_crashes_raw}",
        f"crash rate          {est.r_hat:.6g} /mile"
        + ("  [insufficient events]" if report.insufficient_events else ""),
        f"95% CI              [{est.ci_low:.6g}, {est.ci_high:.6g}]",
        f"effective samples   {est.effective_sample_size:.1f}",
    ]
    if report.baseline_ratio is not None:
        lines.append(
            f"vs human baseline   {report.baseline_ratio:.1f}x "
            f"(baseline {report.human_baseline:.3g}/mile)"
        )
    if report.acceleration is not None:
        lines.append(f"acceleration        {report.acceleration:.1f}x fewer episodes needed")
    if report.per_adversity:
        lines.append("")
        lines.append(f"{'adversity':<24}{'activations':>12}{'attributed':>12}")
        for s in report.per_adversity:
            lines.append(f"{s.spec_id:<24}{s.activations:>12}{s.attributed_crashes:>12}")
    return "\n".join(lines) + "\n"


@dataclass
class EventTimeline:
    """Machine-readable causal excerpt of the window leading into a crash."""

    crash: dict
    window: tuple[float, float]
    activations: list[dict] = field(default_factory=list)
    av_speed: list[tuple[float, float]] = field(default_factory=list)
    partner_gaps: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "crash": self.crash,
            "window": list(self.window),
            "activations": self.activations,
            "av_speed": [[t, v] for t, v in self.av_speed],
            "partner_gaps": [[t, g] for t, g in self.partner_gaps],
        }


def _actor_row(step: dict, actor_id: str):
    for row in step["actors"]:
        if row[0] == actor_id:
            return row
    return None


def event_timeline(log, crash: dict | None = None,
                   window_s: float = TIMELINE_WINDOW) -> EventTimeline:
    """Extract the [crash - window, crash] excerpt from a trajectory log."""
    steps = log.steps if hasattr(log, "steps") else log
    crash_event = None
    for step in steps:
        for ev in step.get("events", ()):
            if ev.get("type") == "crash":
                if crash is None or (
                    ev["time"] == crash.get("time")
                    and sorted(ev["partners"]) == sorted(crash.get("partners", []))
                ):
                    crash_event = ev
                    break
        if crash_event:
            break
    if crash_event is None:
        raise ValueError("crash not found in log")
    t_crash = crash_event["time"]
    t0 = max(0.0, t_crash - window_s)
    partners = sorted(crash_event["partners"])
    timeline = EventTimeline(crash=crash_event, window=(t0, t_crash))
    for step in steps:
        t = step["t"]
        if t < t0 or t > t_crash:
            continue
        for ev in step.get("events", ()):
            if ev.get("type") in ("activation", "expiry"):
                timeline.activations.append(ev)
        av_row = _actor_row(step, "av")
        if av_row is not None:
            timeline.av_speed.append((t, av_row[5]))
        a = _actor_row(step, partners[0])
        b = _actor_row(step, partners[1])
        if a is not None and b is not None:
            dist = ((a[8] - b[8]) ** 2 + (a[9] - b[9]) ** 2) ** 0.5
            gap = dist - (a[10] + b[10]) / 2.0
            timeline.partner_gaps.append((t, gap))
    return timeline
