"""Importance-sampling bookkeeping and the crash-rate estimator.

Boosted runs draw adversity activations with proposal probability q instead
of the natural p; every roll contributes a likelihood-ratio factor (p/q on
activation, (1-p)/(1-q) otherwise) to the episode weight. The weighted
per-episode crash indicator then estimates crashes per mile without bias:

    r_hat = sum(w_e * crash_e) / (n * L_nominal)

which for unboosted runs reduces exactly to N_crash / D_total. Episodes have
a fixed nominal length L_nominal (crash truncates the run but not the
denominator), keeping the estimator a plain weighted mean.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

Z95 = 1.959963984540054  # two-sided 95% normal quantile


class ConfigError(ValueError):
    pass


class InsufficientEventsError(RuntimeError):
    """No crashes observed where the computation needs at least one."""


class Mode(str, Enum):
    NDE = "NDE"
    NADE = "NADE"


@dataclass
class LikelihoodLedger:
    """Accumulates the log likelihood ratio over an episode's activation rolls."""

    log_weight: float = 0.0
    roll_count: int = 0

    def record_roll(self, p: float, q: float, activated: bool) -> "LikelihoodLedger":
        if not 0.0 <= p <= q <= 1.0:
            raise ConfigError(f"activation probabilities need 0 <= p <= q <= 1, got p={p}, q={q}")
        if q >= 1.0 and not activated and p < 1.0:
            raise ConfigError("non-activation at q == 1 is impossible; invalid roll")
        if activated:
            if p == 0.0:
                raise ConfigError("activation with p == 0 has zero natural probability")
            self.log_weight += math.log(p / q)
        elif p != q:
            self.log_weight += math.log((1.0 - p) / (1.0 - q))
        self.roll_count += 1
        if not math.isfinite(self.log_weight):
            raise ConfigError("likelihood ledger became non-finite")
        return self

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


@dataclass
class EpisodeRecord:
    """Outcome of one seeded episode, sufficient for estimation and reports."""

    seed: int
    mode: Mode
    miles: float                      # actual AV miles driven
    nominal_miles: float              # fixed episode length for the estimator
    crash: bool
    weight: float = 1.0
    log_weight: float = 0.0
    crash_time: float | None = None
    crash_partners: tuple[str, str] | None = None
    activations: list[tuple[str, float, str]] = field(default_factory=list)
    wall_time_s: float = 0.0
    log_digest: str | None = None

    def validate(self) -> None:
        if self.miles < 0:
            raise ConfigError("record.miles must be >= 0")
        if self.weight <= 0:
            raise ConfigError("record.weight must be > 0")
        if self.mode is Mode.NDE and self.weight != 1.0:
            raise ConfigError("NDE records must carry weight 1")

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "mode": self.mode.value,
            "miles": self.miles,
            "nominal_miles": self.nominal_miles,
            "crash": self.crash,
            "weight": self.weight,
            "log_weight": self.log_weight,
            "crash_time": self.crash_time,
            "crash_partners": list(self.crash_partners) if self.crash_partners else None,
            "activations": [[sid, t, subj] for sid, t, subj in self.activations],
            "wall_time_s": self.wall_time_s,
            "log_digest": self.log_digest,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        doc = json.loads(line)
        rec = cls(
            seed=doc["seed"],
            mode=Mode(doc["mode"]),
            miles=doc["miles"],
            nominal_miles=doc["nominal_miles"],
            crash=doc["crash"],
            weight=doc.get("weight", 1.0),
            log_weight=doc.get("log_weight", 0.0),
            crash_time=doc.get("crash_time"),
            crash_partners=tuple(doc["crash_partners"]) if doc.get("crash_partners") else None,
            activations=[(a[0], a[1], a[2]) for a in doc.get("activations", [])],
            wall_time_s=doc.get("wall_time_s", 0.0),
            log_digest=doc.get("log_digest"),
        )
        rec.validate()
        return rec


def write_records(records: list[EpisodeRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def read_records(path: str) -> list[EpisodeRecord]:
    """Read records from one .jsonl file or every *.jsonl under a directory."""
    paths = [path]
    if os.path.isdir(path):
        paths = sorted(
            os.path.join(path, name)
            for name in os.listdir(path)
            if name.endswith(".jsonl") and name.startswith("records")
        )
    records: list[EpisodeRecord] = []
    for p in paths:
        with open(p, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(EpisodeRecord.from_json(line))
    return records


@dataclass
class CrashRateEstimate:
    r_hat: float                     # crashes per mile
    ci_low: float
    ci_high: float
    n_episodes: int
    n_crashes_raw: int
    effective_sample_size: float
    nominal_miles: float

    def to_dict(self) -> dict:
        return {
            "r_hat": self.r_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_episodes": self.n_episodes,
            "n_crashes_raw": self.n_crashes_raw,
            "effective_sample_size": self.effective_sample_size,
            "nominal_miles": self.nominal_miles,
        }


def estimate_crash_rate(records: list[EpisodeRecord]) -> CrashRateEstimate:
    """Weighted crash-rate estimate with a 95% normal-approximation interval."""
    if not records:
        raise ConfigError("no episode records")
    nominal = records[0].nominal_miles
    for rec in records:
        if rec.nominal_miles != nominal:
            raise ConfigError(
                "records mix nominal episode lengths "
                f"({rec.nominal_miles} vs {nominal}); estimate them separately"
            )
    n = len(records)
    x = np.array([rec.weight if rec.crash else 0.0 for rec in records])
    w = np.array([rec.weight for rec in records])
    mean = float(x.sum()) / n
    r_hat = mean / nominal
    if n > 1:
        se = float(x.std(ddof=1)) / math.sqrt(n)
    else:
        se = 0.0
    lo = max(0.0, mean - Z95 * se) / nominal
    hi = (mean + Z95 * se) / nominal
    ess = float(w.sum()) ** 2 / float((w * w).sum())
    return CrashRateEstimate(
        r_hat=r_hat,
        ci_low=lo,
        ci_high=hi,
        n_episodes=n,
        n_crashes_raw=sum(1 for rec in records if rec.crash),
        effective_sample_size=ess,
        nominal_miles=nominal,
    )


def _episodes_to_target(records: list[EpisodeRecord], target_relative_error: float) -> float:
    x = np.array([rec.weight if rec.crash else 0.0 for rec in records])
    mean = float(x.mean())
    if mean <= 0.0:
        raise InsufficientEventsError(
            "no crashes observed; cannot size the estimator for this mode"
        )
    sd = float(x.std(ddof=1))
    return (Z95 * sd / (target_relative_error * mean)) ** 2


def acceleration_factor(
    nde_records: list[EpisodeRecord],
    nade_records: list[EpisodeRecord],
    target_relative_error: float = 0.2,
) -> float:
    """Ratio of episode counts each mode needs for the same CI half-width.

    Both record sets must estimate the same scenario; > 1 means the boosted
    mode reaches the target precision with fewer episodes.
    """
    if not 0 < target_relative_error < 1:
        raise ConfigError("target_relative_error must be in (0, 1)")
    n_nde = _episodes_to_target(nde_records, target_relative_error)
    n_nade = _episodes_to_target(nade_records, target_relative_error)
    return n_nde / n_nade


# --- analytic toy scenario ---------------------------------------------------
#
# A single always-triggered adversity with k eligible steps per episode and a
# deterministic crash on activation. Its crash probability has the closed
# form 1 - (1-p)^k, which makes it the reference scenario for estimator
# verification: the simulation side below uses the real ledger mechanics.


@dataclass(frozen=True)
class ChainScenario:
    p: float
    q: float
    k: int                           # eligible activation rolls per episode
    nominal_miles: float = 0.5

    def crash_probability(self) -> float:
        return 1.0 - (1.0 - self.p) ** self.k

    def crash_rate_per_mile(self) -> float:
        return self.crash_probability() / self.nominal_miles


def simulate_chain_episode(
    scenario: ChainScenario, mode: Mode, rng: np.random.Generator, seed: int = 0
) -> EpisodeRecord:
    """One Bernoulli-chain episode through the production ledger."""
    ledger = LikelihoodLedger()
    nade = mode is Mode.NADE
    crash = False
    crash_step = None
    for i in range(scenario.k):
        prob = scenario.q if nade else scenario.p
        activated = bool(rng.random() < prob)
        if nade:
            ledger.record_roll(scenario.p, scenario.q, activated)
        if activated:
            crash = True
            crash_step = i
            break
    miles = scenario.nominal_miles
    if crash and scenario.k > 0:
        miles = scenario.nominal_miles * (crash_step + 1) / scenario.k
    return EpisodeRecord(
        seed=seed,
        mode=mode,
        miles=miles,
        nominal_miles=scenario.nominal_miles,
        crash=crash,
        weight=ledger.weight,
        log_weight=ledger.log_weight,
        crash_time=float(crash_step) if crash else None,
        activations=[("chain", float(crash_step), "chain")] if crash else [],
    )


def simulate_chain_batch(
    scenario: ChainScenario, n: int, mode: Mode, seed: int
) -> list[EpisodeRecord]:
    """n chain episodes with per-episode derived seeds (seed, index)."""
    records = []
    for i in range(n):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i])))
        records.append(simulate_chain_episode(scenario, mode, rng, seed=seed + i))
    return records
