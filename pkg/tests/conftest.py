"""Shared scenario documents used across engine, reporting, and acceptance tests."""

import pytest


def cutin_rear_end_doc(seed=0, noise=0.2):
    """Scripted two-stage scenario: an aggressive cut-in ahead of the ego
    triggers hard braking, then the trailing vehicle fails to react and
    rear-ends the ego. Both adversities are boosted to certainty.
    """
    return {
        "map": {"generator": "highway2"},
        "mode": "NADE",
        "nde": {"spawn_rate": 0.0, "maneuver_noise": noise},
        "episode": {"dt": 0.1, "max_duration": 40.0, "nominal_miles": 1.0},
        "av": {
            "spawn": ["hw_0", 200.0], "speed": 20.0,
            "params": {"v0": 22.0, "lane_change_threshold": 100.0},
        },
        "initial_agents": [
            {"id": "cutter", "kind": "CAR", "lane": "hw_1", "s": 208.0, "speed": 20.0,
             "params": {"v0": 30.0, "lane_change_threshold": 100.0}},
            {"id": "tailgater", "kind": "CAR", "lane": "hw_0", "s": 100.0, "speed": 20.0,
             "params": {"v0": 25.0, "lane_change_threshold": 100.0}},
        ],
        "adversities": [
            {
                "id": "cut_in", "scope": "DYNAMIC",
                "trigger": {"kind": "ALWAYS"},
                "behavior": {"kind": "CUT_IN", "aggressive_gap": 5.0,
                             "settle_time": 6.0, "duration": 5.0, "post_decel": 4.0},
                "p": 1e-3, "q": 1.0, "eligible_kinds": ["CAR"], "cooldown": 60.0,
            },
            {
                "id": "rear_end", "scope": "DYNAMIC",
                "trigger": {"kind": "LEAD_GAP_AND_SPEED_DIFF",
                            "max_gap": 20.0, "min_speed_diff": 5.0},
                "behavior": {"kind": "FAIL_TO_YIELD", "duration": 8.0},
                "p": 1e-3, "q": 1.0, "eligible_kinds": ["CAR"], "cooldown": 60.0,
            },
        ],
        "seed": seed,
    }


def grid_traffic_doc(seed=0, spawn_rate=0.12, duration=60.0):
    return {
        "map": {"generator": "grid3x3"},
        "nde": {"spawn_rate": spawn_rate},
        "episode": {"dt": 0.1, "max_duration": duration, "nominal_miles": 2.0},
        "av": {"spawn": ["e_0_1", 20.0]},
        "seed": seed,
    }


def perf_grid_doc(seed=3):
    """Sustained 50-actor load (49 background + ego) on the signalized grid."""
    initial = []
    entries = ["e_0_0", "e_0_1", "e_0_2", "w_3_0", "w_3_1", "w_3_2",
               "n_0_0", "n_1_0", "n_2_0", "s_0_3", "s_1_3", "s_2_3"]
    k = 0
    for lane in entries:
        for s in (5.0, 30.0, 55.0, 80.0):
            initial.append({"id": f"bg_{k:03d}", "kind": "CAR",
                            "lane": lane, "s": s, "speed": 8.0})
            k += 1
    initial.append({"id": "bg_048", "kind": "CAR", "lane": "e_0_1",
                    "s": 67.0, "speed": 8.0})
    return {
        "map": {"generator": "grid3x3"},
        "nde": {"spawn_rate": 0.0},
        "episode": {"dt": 0.1, "max_duration": 60.0, "nominal_miles": 5.0},
        "av": {"spawn": ["e_0_1", 90.0], "speed": 8.0},
        "initial_agents": initial,
        "seed": seed,
    }


def empty_road_doc(v0=15.0, duration=60.0):
    return {
        "map": {"generator": "highway2"},
        "episode": {"dt": 0.1, "max_duration": duration, "nominal_miles": 1.0},
        "av": {"spawn": ["hw_0", 10.0], "speed": v0, "params": {"v0": v0}},
        "seed": 0,
    }


@pytest.fixture
def vd_scenario_doc():
    return cutin_rear_end_doc()
