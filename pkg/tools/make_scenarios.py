"""Regenerate the shipped scenario files under src/styledrive/data/scenarios."""

import json
from pathlib import Path

from styledrive import maps

OUT = Path(__file__).resolve().parents[1] / "src" / "styledrive" / "data" / "scenarios"
NORMAL = ["normal", "normal", "normal"]

# lead-vehicle events (start s, kind); lane 0 also has two full stops
LANE0_EVENTS = [(25, "brake"), (75, "brake"), (100, "stop"), (125, "brake"), (175, "brake"), (200, "stop"),
                (250, "brake")]
LANE1_EVENTS = [(25, "brake"), (75, "brake"), (125, "brake"), (175, "brake"), (250, "brake")]


def corridor() -> dict:
    """Two-lane platoon behind scripted leads; the ego drives second in lane 0."""
    def group(prefix, lane, count, front_x):
        return {"prefix": prefix, "lane": lane, "count": count, "front_x": front_x, "spacing": 26, "jitter": 3,
                "speed": 10, "end_x": 3800, "style": NORMAL}

    def lead(sid, lane, x, events):
        return {"id": sid, "kind": "vehicle", "lanes": [maps.lane_id(lane, i) for i in range(80)],
                "start_offset": x, "speed_profile": [list(k) for k in maps.lead_speed_profile(events)]}

    return {
        "schema_version": 1,
        "description": "Two-lane corridor. Scripted leads brake at 25/75/125/175/250 s; lane 0 also stops "
                       "fully at 100 s and 200 s. Lane changes are off so followers stay behind the leads. "
                       "Set agent_groups[*].style to style the background traffic.",
        "map": {"generator": "corridor", "length": 4000, "lanes": 2},
        "dt": 0.05,
        "max_steps": 6000,
        "run_seed": 0,
        "schedule": {"l2_period": 2000, "l3_rate": 0.064},
        "provider": {"enabled": False},
        "controller": {"allow_lane_change": False},
        "agents": [{"id": "ego", "style": NORMAL, "role": "ego_under_test",
                    "spawn": {"x": 249, "lane": 0, "speed": 10}, "route": {"corridor_lane": 0, "end_x": 3800}}],
        "agent_groups": [group("f0_", 0, 1, 275), group("r0_", 0, 5, 223), group("l1_", 1, 6, 270)],
        "scripted": [lead("lead0", 0, 300, LANE0_EVENTS), lead("lead1", 1, 296, LANE1_EVENTS)],
        "lead_events": {"lead0": LANE0_EVENTS, "lead1": LANE1_EVENTS},
    }


def freeflow() -> dict:
    """One agent per single-layer style on an empty lane, spaced beyond perception range."""
    styles = [NORMAL, ["aggressive", "normal", "normal"], ["cautious", "normal", "normal"],
              ["normal", "drunk", "normal"], ["normal", "fatigued", "normal"], ["normal", "normal", "distracted"]]
    agents = []
    for i, st in enumerate(styles):
        name = next((t for t in st if t != "normal"), "normal")
        agents.append({"id": f"{name}", "style": st, "spawn": {"x": 20 + 120 * i, "lane": 0, "speed": 12},
                       "route": {"corridor_lane": 0, "end_x": 1180}})
    return {
        "schema_version": 1,
        "description": "Obstacle-free single lane; every single-layer style drives its route alone.",
        "map": {"generator": "corridor", "length": 1200, "lanes": 1},
        "dt": 0.05,
        "max_steps": 2400,
        "run_seed": 0,
        "provider": {"enabled": False},
        "agents": agents,
    }


def intersection() -> dict:
    """Signalised crossing with mixed styles on all four approaches."""
    spec = [("e", "e_in", "aggressive", "normal", "normal"), ("e", "e_in", "normal", "normal", "normal"),
            ("w", "w_in", "cautious", "normal", "normal"), ("w", "w_in", "normal", "drunk", "normal"),
            ("n", "n_in", "normal", "normal", "distracted"), ("n", "n_in", "normal", "fatigued", "normal"),
            ("s", "s_in", "normal", "normal", "normal"), ("s", "s_in", "aggressive", "normal", "distracted")]
    agents = []
    count = {}
    for arm, lane, *style in spec:
        k = count.get(arm, 0)
        count[arm] = k + 1
        agents.append({"id": f"{arm}{k}", "style": style,
                       "spawn": {"s": 10.0 + 30.0 * (1 - k), "speed": 8},
                       "route": {"lanes": [lane, f"{arm}_mid", f"{arm}_out"]}})
    return {
        "schema_version": 1,
        "description": "Four-arm signalised crossing; north-south runs half a cycle after east-west.",
        "map": {"generator": "crossing"},
        "dt": 0.05,
        "max_steps": 2400,
        "run_seed": 0,
        "provider": {"enabled": False},
        "agents": agents,
    }


def example() -> dict:
    """Short mixed-style corridor run for a quick look at the pipeline."""
    doc = corridor()
    doc["description"] = "Short mixed-style corridor run (one minute of traffic)."
    doc["max_steps"] = 1200
    del doc["controller"]
    styles = [["aggressive", "normal", "normal"], ["cautious", "normal", "normal"], ["normal", "drunk", "normal"]]
    doc["agent_groups"] = [dict(g, count=min(g["count"], 3), style=styles[i % 3])
                           for i, g in enumerate(doc["agent_groups"])]
    doc["agent_groups"][0]["count"] = 1
    return doc


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, fn in (("corridor", corridor), ("freeflow", freeflow), ("intersection", intersection),
                     ("example", example)):
        (OUT / f"{name}.json").write_text(json.dumps(fn(), indent=1) + "\n")
        print("wrote", OUT / f"{name}.json")


if __name__ == "__main__":
    main()
