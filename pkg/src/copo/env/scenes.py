"""Parameterized built-in scenes approximating the benchmark road layouts."""

from __future__ import annotations

import numpy as np

from copo.env.scene import Destination, Lane, SceneSpec, SpawnPoint

LANE_WIDTH = 3.5


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _arc(center, radius, a0, a1, n=12) -> np.ndarray:
    t = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)], axis=1)


def _spawns_along(lane: Lane, start: float, stop: float, spacing: float) -> list[SpawnPoint]:
    out = []
    s = start
    while s <= stop + 1e-9:
        p = lane.centerline[0] + (lane.centerline[1] - lane.centerline[0]) * (s / lane.length)
        d = lane.centerline[1] - lane.centerline[0]
        out.append(SpawnPoint(p, float(np.arctan2(d[1], d[0])), lane.id))
        s += spacing
    return out


def corridor(length: float = 120.0, target: int = 2) -> SceneSpec:
    lane = Lane("main", [[0.0, 0.0], [length, 0.0]], LANE_WIDTH, "approach")
    spawns = [SpawnPoint([5.0, 0.0], 0.0, "main"), SpawnPoint([20.0, 0.0], 0.0, "main")]
    dests = [Destination([length - 10.0, 0.0], 5.0)]
    return SceneSpec("corridor", [lane], spawns, dests, [], target)


def intersection(arm: float = 90.0, box: float = 10.0, spacing: float = 9.0, target: int = 30,
                 name: str = "intersection4", spawn_margin: float = 6.0,
                 spawn_zone: float | None = None) -> SceneSpec:
    """Four-way unsignalized junction, one lane per direction, right-hand traffic.

    Arms run from ``box`` to ``arm`` meters from the center along each axis.
    Spawn points fill the first ``spawn_zone`` meters of each approach (the
    whole approach minus margins by default).
    """
    h = LANE_WIDTH / 2
    lanes: list[Lane] = []
    spawns: list[SpawnPoint] = []
    dests: list[Destination] = []
    names = ["w", "s", "e", "n"]
    for k in range(4):
        # arm k enters heading theta_in, coming from direction -theta_in
        theta = k * np.pi / 2
        r = _rot(theta)
        inbound = Lane(f"in_{names[k]}", (r @ np.array([[-arm, -h], [-box, -h]]).T).T, LANE_WIDTH, "approach")
        outbound = Lane(f"out_{names[k]}", (r @ np.array([[-box, h], [-arm, h]]).T).T, LANE_WIDTH, "exit")
        lanes += [inbound, outbound]
        stop = arm - box - spawn_margin if spawn_zone is None else min(spawn_zone, arm - box - spawn_margin)
        spawns += _spawns_along(inbound, spawn_margin, stop, spacing)
        dests.append(Destination((r @ np.array([-arm + 8.0, h])), 4.0))
    for k in range(4):
        r = _rot(k * np.pi / 2)
        start = np.array([-box, -h])
        # straight: towards the opposite arm's outbound lane
        straight = np.array([start, [box, -h]])
        # right turn: quarter circle centered at (-box, -box)
        right = _arc((-box, -box), box - h, np.pi / 2, 0.0)
        # left turn: quarter circle centered at (-box, box)
        left = _arc((-box, box), box + h, -np.pi / 2, 0.0)
        for tag, pts in (("straight", straight), ("right", right), ("left", left)):
            lanes.append(Lane(f"{names[k]}_{tag}", (r @ pts.T).T, LANE_WIDTH, "connector"))
    return SceneSpec(name, lanes, spawns, dests, [], target)


def mini_intersection(target: int = 4) -> SceneSpec:
    return intersection(arm=50.0, box=10.0, spacing=10.0, target=target, name="mini_intersection",
                        spawn_margin=5.0, spawn_zone=25.0)


def bottleneck(target: int = 20) -> SceneSpec:
    """Two inbound lanes squeezed into a single-lane neck, then fanning out again."""
    h = LANE_WIDTH / 2
    lanes = [
        Lane("in_left", [[-120.0, h], [-15.0, h]], LANE_WIDTH, "approach"),
        Lane("in_right", [[-120.0, -h], [-15.0, -h]], LANE_WIDTH, "approach"),
        Lane("merge_left", [[-15.0, h], [-7.5, h / 2], [0.0, 0.0]], LANE_WIDTH, "connector"),
        Lane("merge_right", [[-15.0, -h], [-7.5, -h / 2], [0.0, 0.0]], LANE_WIDTH, "connector"),
        Lane("neck", [[0.0, 0.0], [30.0, 0.0]], LANE_WIDTH, "connector"),
        Lane("split_left", [[30.0, 0.0], [37.5, h / 2], [45.0, h]], LANE_WIDTH, "connector"),
        Lane("split_right", [[30.0, 0.0], [37.5, -h / 2], [45.0, -h]], LANE_WIDTH, "connector"),
        Lane("out_left", [[45.0, h], [120.0, h]], LANE_WIDTH, "exit"),
        Lane("out_right", [[45.0, -h], [120.0, -h]], LANE_WIDTH, "exit"),
    ]
    spawns = _spawns_along(lanes[0], 5.0, 100.0, 8.0) + _spawns_along(lanes[1], 5.0, 100.0, 8.0)
    dests = [Destination([110.0, h], 4.0), Destination([110.0, -h], 4.0)]
    return SceneSpec("bottleneck", lanes, spawns, dests, [], target)


def roundabout_lite(radius: float = 20.0, arm: float = 70.0, target: int = 40) -> SceneSpec:
    """Single-lane counter-clockwise ring with four entry/exit arm pairs."""
    h = LANE_WIDTH / 2
    offset = np.deg2rad(15.0)
    joins = []
    for k in range(4):
        a = k * np.pi / 2
        joins += [(a + offset, "entry", k), (a - offset, "exit", k)]
    joins.sort(key=lambda j: j[0] % (2 * np.pi))
    lanes: list[Lane] = []
    angles = [j[0] % (2 * np.pi) for j in joins]
    for m in range(len(joins)):
        a0 = angles[m]
        a1 = angles[(m + 1) % len(joins)]
        if a1 <= a0:
            a1 += 2 * np.pi
        lanes.append(Lane(f"ring_{m}", _arc((0.0, 0.0), radius, a0, a1, n=6), LANE_WIDTH, "connector"))
    spawns: list[SpawnPoint] = []
    dests: list[Destination] = []
    for k in range(4):
        a = k * np.pi / 2
        u = np.array([np.cos(a), np.sin(a)])
        n = np.array([-u[1], u[0]])
        entry_end = radius * np.array([np.cos(a + offset), np.sin(a + offset)])
        exit_start = radius * np.array([np.cos(a - offset), np.sin(a - offset)])
        entry = Lane(f"in_{k}", [arm * u + h * n, (radius + 12.0) * u + h * n, entry_end], LANE_WIDTH, "approach")
        exit_ = Lane(f"out_{k}", [exit_start, (radius + 12.0) * u - h * n, arm * u - h * n], LANE_WIDTH, "exit")
        lanes += [entry, exit_]
        d = entry.centerline[1] - entry.centerline[0]
        heading = float(np.arctan2(d[1], d[0]))
        for s in np.arange(4.0, arm - radius - 14.0, 7.0):
            spawns.append(SpawnPoint(entry.centerline[0] + d / np.linalg.norm(d) * s, heading, entry.id))
        dests.append(Destination(arm * u - h * n - 8.0 * u, 4.0))
    return SceneSpec("roundabout_lite", lanes, spawns, dests, [], target)


def merge(target: int = 4, main_len: float = 60.0) -> SceneSpec:
    """Two short lanes feeding one single-lane road; simultaneous arrivals collide."""
    h = LANE_WIDTH
    lanes = [
        Lane("in_a", [[-40.0, h], [-12.0, h]], LANE_WIDTH, "approach"),
        Lane("in_b", [[-40.0, -h], [-12.0, -h]], LANE_WIDTH, "approach"),
        Lane("join_a", [[-12.0, h], [-6.0, h / 2], [0.0, 0.0]], LANE_WIDTH, "connector"),
        Lane("join_b", [[-12.0, -h], [-6.0, -h / 2], [0.0, 0.0]], LANE_WIDTH, "connector"),
        Lane("out", [[0.0, 0.0], [main_len, 0.0]], LANE_WIDTH, "exit"),
    ]
    spawns = [SpawnPoint([-36.0, h], 0.0, "in_a"), SpawnPoint([-24.0, h], 0.0, "in_a"),
              SpawnPoint([-36.0, -h], 0.0, "in_b"), SpawnPoint([-24.0, -h], 0.0, "in_b")]
    dests = [Destination([main_len - 8.0, 0.0], 4.0)]
    return SceneSpec("merge", lanes, spawns, dests, [], target)


BUILTIN_SCENES = {
    "corridor": corridor,
    "intersection4": intersection,
    "mini_intersection": mini_intersection,
    "bottleneck": bottleneck,
    "roundabout_lite": roundabout_lite,
    "merge": merge,
}


def builtin_scene(name: str, **kwargs) -> SceneSpec:
    try:
        factory = BUILTIN_SCENES[name]
    except KeyError:
        raise KeyError(f"unknown built-in scene {name!r}; choose from {sorted(BUILTIN_SCENES)}") from None
    scene = factory(**kwargs)
    scene.validate()
    return scene
