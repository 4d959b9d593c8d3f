"""Figure rendering for the report path; writes PNGs next to the text output."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .estimation import EpisodeRecord  # noqa: E402
from .reporting import SafetyReport, event_timeline  # noqa: E402


def _save(fig, out_dir: str, name: str, paths: list[str]) -> None:
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)


def render_report_figures(
    report: SafetyReport,
    records: list[EpisodeRecord],
    logs: list | None = None,
    out_dir: str = ".",
) -> list[str]:
    """Render the standard report figures; returns the written file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths: list[str] = []

    est = report.estimate
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(
        [0], [est.r_hat],
        yerr=[[est.r_hat - est.ci_low], [est.ci_high - est.r_hat]],
        fmt="o", color="tab:red", capsize=6, label="estimate (95% CI)",
    )
    if report.human_baseline:
        ax.axhline(report.human_baseline, color="tab:gray", ls="--",
                   label="human baseline")
        ax.set_yscale("log")
    ax.set_xticks([])
    ax.set_ylabel("crashes per mile")
    ax.set_title(f"crash rate ({report.total_episodes} episodes)")
    ax.legend(loc="best", fontsize=8)
    _save(fig, out_dir, "crash_rate.png", paths)

    if report.per_adversity:
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        names = [s.spec_id for s in report.per_adversity]
        xs = range(len(names))
        ax.bar([x - 0.2 for x in xs], [s.activations for s in report.per_adversity],
               width=0.4, label="activations", color="tab:blue")
        ax.bar([x + 0.2 for x in xs], [s.attributed_crashes for s in report.per_adversity],
               width=0.4, label="attributed crashes", color="tab:red")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_ylabel("count")
        ax.set_title("adversity activity")
        ax.legend(fontsize=8)
        _save(fig, out_dir, "adversity_activity.png", paths)

    weights = [r.weight for r in records if r.weight != 1.0]
    if weights:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.hist([math.log10(w) for w in weights], bins=40, color="tab:purple")
        ax.set_xlabel("log10 episode weight")
        ax.set_ylabel("episodes")
        ax.set_title("likelihood-ratio weights")
        _save(fig, out_dir, "weights.png", paths)

    crash_log = None
    if logs:
        for log in logs:
            steps = log.steps if hasattr(log, "steps") else log
            if any(ev.get("type") == "crash"
                   for step in steps for ev in step.get("events", ())):
                crash_log = log
                break
    if crash_log is not None:
        timeline = event_timeline(crash_log)
        fig, ax = plt.subplots(figsize=(6.0, 3.4))
        if timeline.av_speed:
            ts, vs = zip(*timeline.av_speed)
            ax.plot(ts, vs, color="tab:red", label="ego speed (m/s)")
        if timeline.partner_gaps:
            ts, gs = zip(*timeline.partner_gaps)
            ax2 = ax.twinx()
            ax2.plot(ts, gs, color="tab:blue", alpha=0.7, label="partner gap (m)")
            ax2.set_ylabel("gap (m)", color="tab:blue")
        for ev in timeline.activations:
            ax.axvline(ev["t"], color="tab:orange", ls=":", alpha=0.8)
            ax.text(ev["t"], ax.get_ylim()[1] * 0.95, ev.get("spec", ""),
                    rotation=90, fontsize=7, va="top")
        ax.axvline(timeline.crash["time"], color="black", lw=1.5)
        ax.set_xlabel("sim time (s)")
        ax.set_ylabel("speed (m/s)", color="tab:red")
        ax.set_title("crash event timeline")
        _save(fig, out_dir, "timeline.png", paths)

    return paths
