"""Reference scenarios: a six-node room with one mobile node on a line or rectangle."""

from __future__ import annotations

from .scenario import SCHEMA_VERSION, Scenario

# Static nodes fill the west half of a 6.5 m x 6 m room so the mobile node's
# paths leave their convex hull by up to ~3 m on the east side.
ROOM_ANCHORS = (
    (0.5, 0.5),
    (3.0, 0.5),
    (3.0, 5.0),
    (0.5, 5.0),
    (1.8, 2.8),
)
ANCHOR_Z = 0.3
MOBILE_Z = 1.2
MOBILE_ID = len(ROOM_ANCHORS)

LINE_PATH = ((1.5, 2.8), (6.2, 2.8))
RECTANGLE_PATH = ((1.2, 1.2), (6.2, 1.2), (6.2, 4.5), (1.2, 4.5))
MOBILE_SPEED = 0.25


def _base(name: str, trajectory: dict, mode: str, seed: int, duration: float, sigma: float) -> dict:
    nodes = [
        {"id": i, "z": ANCHOR_Z, "trajectory": {"kind": "static", "position": list(p)}}
        for i, p in enumerate(ROOM_ANCHORS)
    ]
    nodes.append({"id": MOBILE_ID, "z": MOBILE_Z, "trajectory": trajectory})
    n = len(nodes)
    alloc = {"k": 4, "min_frequency": 10.0, "pair_rate": 60.0}
    if mode == "tof_only":
        # every node ranges with every other: C(6,2)=15 pairs at 60 Hz is a 4 Hz cycle
        alloc = {"k": n, "min_frequency": 4.0, "pair_rate": 60.0}
    return {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "mode": mode,
        "dimension": "2d",
        "seed": seed,
        "duration": duration,
        "timestep": 0.1,
        "nodes": nodes,
        "allocation": alloc,
        "medium": {"ranging_noise_sigma": sigma},
        "smoothing": 0.3,
        "focus": [MOBILE_ID],
    }


def line_scenario(mode: str = "dynamic", *, seed: int = 0, duration: float = 40.0, sigma: float = 0.10,
                  speed: float = MOBILE_SPEED) -> Scenario:
    traj = {"kind": "line", "start": list(LINE_PATH[0]), "end": list(LINE_PATH[1]), "speed": speed, "loop": True}
    return Scenario.from_dict(_base("line", traj, mode, seed, duration, sigma))


def rectangle_scenario(mode: str = "dynamic", *, seed: int = 0, duration: float = 70.0, sigma: float = 0.10,
                       speed: float = MOBILE_SPEED) -> Scenario:
    traj = {"kind": "rectangle", "corners": [list(c) for c in RECTANGLE_PATH], "speed": speed}
    return Scenario.from_dict(_base("rectangle", traj, mode, seed, duration, sigma))
