"""Generative microscopic traffic simulation with adversity injection,
importance-sampled crash-rate estimation, and RESP-compatible co-simulation.
"""

__version__ = "0.1.0"

from .behavior import (  # noqa: F401
    AgentKind,
    BehaviorParams,
    LaneChange,
    NdeConfig,
    Surroundings,
    VehicleState,
    equilibrium_gap,
    idm_accel,
    mobil_lane_change,
    nde_step,
    sample_behavior,
)
from .adversity import (  # noqa: F401
    ActivatedBehavior,
    AdversitySpec,
    BehaviorKind,
    Scope,
    TriggerCondition,
    TriggerKind,
    evaluate_trigger,
    roll_activation,
)
from .engine import (  # noqa: F401
    CrashEvent,
    Episode,
    ScenarioConfig,
    TrajectoryLog,
    config_from_dict,
    detect_collisions,
    load_config,
    run_batch,
    run_episode,
)
from .estimation import (  # noqa: F401
    CrashRateEstimate,
    EpisodeRecord,
    LikelihoodLedger,
    Mode,
    acceleration_factor,
    estimate_crash_rate,
)
from .road import (  # noqa: F401
    Lane,
    RoadNetwork,
    TrafficSignal,
    advance_signals,
    generate,
    lane_length,
    load_network,
    longitudinal_to_world,
    serialize_network,
)
from .reporting import SafetyReport, build_report, event_timeline  # noqa: F401
