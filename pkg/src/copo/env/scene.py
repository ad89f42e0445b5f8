"""Static scene description: lanes, spawn points, destinations and obstacles.

Scene files are TOML documents with one ``[scene]`` table and repeated
``[[lane]]``, ``[[spawn]]``, ``[[destination]]`` and ``[[obstacle]]`` tables.
Lengths are meters and angles radians.
"""

from __future__ import annotations

import heapq
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

from copo.env import geometry as geo

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 2.0
LANE_LINK_TOL = 0.5
BOUNDARY_PIECE = 1.0


class SceneError(ValueError):
    """Raised for malformed or invalid scene files."""


@dataclass
class Lane:
    id: str
    centerline: np.ndarray
    width: float
    role: str = ""

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float).reshape(-1, 2)
        self.cum_len = geo.polyline_arclength(self.centerline)

    @property
    def length(self) -> float:
        return float(self.cum_len[-1])


@dataclass
class SpawnPoint:
    position: np.ndarray
    heading: float
    lane: str

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)


@dataclass
class Destination:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)


@dataclass
class Obstacle:
    center: np.ndarray
    heading: float
    length: float
    width: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def corners(self) -> np.ndarray:
        return geo.box_corners(self.center[0], self.center[1], self.heading, self.length, self.width)


@dataclass
class Route:
    """Centerline path from a spawn lane to a destination, with arc-length table."""

    lanes: list[str]
    polyline: np.ndarray
    cum_len: np.ndarray
    width: float
    end_s: float

    def project(self, point: np.ndarray) -> tuple[float, float]:
        s, lateral, _, _ = geo.project_to_polyline(point, self.polyline, self.cum_len)
        return s, lateral

    def project_local(self, point: np.ndarray, s_prev: float, back: float = 5.0,
                      ahead: float = 25.0) -> tuple[float, float]:
        """Projection restricted to a window around the previous arc length.

        Keeps progress from jumping between branches of a self-approaching route.
        """
        lo = int(max(np.searchsorted(self.cum_len, s_prev - back, side="right") - 1, 0))
        hi = int(min(np.searchsorted(self.cum_len, s_prev + ahead, side="left") + 1, len(self.polyline) - 1))
        if hi - lo < 1:
            lo, hi = max(hi - 1, 0), max(hi, 1)
        sub = self.polyline[lo:hi + 1]
        s, lateral, _, _ = geo.project_to_polyline(point, sub, self.cum_len[lo:hi + 1] - self.cum_len[lo])
        return s + float(self.cum_len[lo]), lateral

    def point(self, s: float) -> tuple[np.ndarray, float]:
        return geo.polyline_point(self.polyline, self.cum_len, s)


@dataclass
class SceneSpec:
    name: str
    lanes: list[Lane]
    spawn_points: list[SpawnPoint]
    destinations: list[Destination]
    static_obstacles: list[Obstacle] = field(default_factory=list)
    target_agent_count: int = 1

    def __post_init__(self):
        self._build_index()

    def _build_index(self) -> None:
        self.lane_by_id = {lane.id: lane for lane in self.lanes}
        self.successors: dict[str, list[str]] = {lane.id: [] for lane in self.lanes}
        for a in self.lanes:
            for b in self.lanes:
                if a.id != b.id and np.linalg.norm(a.centerline[-1] - b.centerline[0]) <= LANE_LINK_TOL:
                    self.successors[a.id].append(b.id)
        if self.lanes:
            segs_a, segs_b, half = [], [], []
            for lane in self.lanes:
                segs_a.append(lane.centerline[:-1])
                segs_b.append(lane.centerline[1:])
                half.append(np.full(len(lane.centerline) - 1, 0.5 * lane.width))
            self._seg_a = np.concatenate(segs_a)
            self._seg_b = np.concatenate(segs_b)
            self._seg_half = np.concatenate(half)
        else:
            self._seg_a = self._seg_b = np.zeros((0, 2))
            self._seg_half = np.zeros(0)
        self.boundary_a, self.boundary_b = self._boundary_segments()

    # -- drivable area -------------------------------------------------------

    def lane_clearance(self, points: np.ndarray) -> np.ndarray:
        """Per point, max over lane segments of (half width - distance); >= 0 means on road."""
        points = np.atleast_2d(points)
        if self._seg_a.shape[0] == 0:
            return np.full(points.shape[0], -np.inf)
        a = self._seg_a[None]
        seg = (self._seg_b - self._seg_a)[None]
        rel = points[:, None, :] - a
        t = np.clip(np.sum(rel * seg, axis=2) / np.sum(seg * seg, axis=2), 0.0, 1.0)
        d = np.sqrt(np.sum((rel - t[..., None] * seg) ** 2, axis=2))
        return np.max(self._seg_half[None] - d, axis=1)

    def on_road(self, points: np.ndarray) -> np.ndarray:
        return self.lane_clearance(points) >= 0.0

    def _boundary_segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Lane-edge pieces that do not lie strictly inside any corridor.

        Each lane edge is cut into ~1 m pieces for the inside test, then runs
        of kept collinear pieces are merged back into single segments.
        """
        out_a, out_b = [], []
        for lane in self.lanes:
            pts = lane.centerline
            for k in range(len(pts) - 1):
                d = pts[k + 1] - pts[k]
                n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
                m = max(1, int(math.ceil(np.linalg.norm(d) / BOUNDARY_PIECE)))
                ts = np.linspace(0.0, 1.0, m + 1)
                for side in (1.0, -1.0):
                    edge = pts[k] + side * 0.5 * lane.width * n + ts[:, None] * d
                    keep = self.lane_clearance(0.5 * (edge[:-1] + edge[1:])) <= 1e-6
                    run_start = None
                    for j in range(m + 1):
                        inside = j < m and keep[j]
                        if inside and run_start is None:
                            run_start = j
                        elif not inside and run_start is not None:
                            out_a.append(edge[run_start])
                            out_b.append(edge[j])
                            run_start = None
        if not out_a:
            return np.zeros((0, 2)), np.zeros((0, 2))
        return np.array(out_a), np.array(out_b)

    # -- lane graph ----------------------------------------------------------

    def destination_lanes(self, dest: Destination) -> list[str]:
        """Lanes whose surface contains the destination center; else lanes passing within its radius."""
        dist = {lane.id: geo.points_to_polyline_distance(dest.center[None], lane.centerline)[0] for lane in self.lanes}
        inside = [lane.id for lane in self.lanes if dist[lane.id] <= 0.5 * lane.width]
        return inside or [lid for lid, d in dist.items() if d <= dest.radius]

    def route(self, start_lane: str, dest: Destination) -> Route | None:
        """Shortest lane path (by centerline length) from ``start_lane`` to ``dest``."""
        goals = set(self.destination_lanes(dest))
        if not goals:
            return None
        dist = {start_lane: 0.0}
        prev: dict[str, str] = {}
        heap = [(0.0, start_lane)]
        found = None
        while heap:
            d, lid = heapq.heappop(heap)
            if d > dist.get(lid, math.inf):
                continue
            if lid in goals:
                found = lid
                break
            for nxt in self.successors[lid]:
                nd = d + self.lane_by_id[lid].length
                if nd < dist.get(nxt, math.inf):
                    dist[nxt] = nd
                    prev[nxt] = lid
                    heapq.heappush(heap, (nd, nxt))
        if found is None:
            return None
        path = [found]
        while path[-1] != start_lane:
            path.append(prev[path[-1]])
        path.reverse()
        pts = [self.lane_by_id[path[0]].centerline]
        for lid in path[1:]:
            pts.append(self.lane_by_id[lid].centerline[1:])
        poly = np.concatenate(pts)
        # drop zero-length joints left by near-coincident lane ends
        keep = np.concatenate([[True], np.hypot(*np.diff(poly, axis=0).T) > 1e-9])
        poly = poly[keep]
        cum = geo.polyline_arclength(poly)
        end_s, _, _, _ = geo.project_to_polyline(dest.center, poly, cum)
        width = min(self.lane_by_id[lid].width for lid in path)
        return Route(path, poly, cum, width, end_s)

    def reachable_destinations(self, spawn: SpawnPoint) -> list[int]:
        return [k for k, d in enumerate(self.destinations) if self.route(spawn.lane, d) is not None]

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        if self.target_agent_count < 1:
            raise SceneError("invariant violated: target_agent_count must be a positive integer")
        ids = [lane.id for lane in self.lanes]
        if len(set(ids)) != len(ids):
            raise SceneError("invariant violated: lane ids must be unique")
        for lane in self.lanes:
            if len(lane.centerline) < 2:
                raise SceneError(f"invariant violated: lane {lane.id!r} centerline needs >= 2 points")
            if np.any(np.diff(lane.cum_len) <= 0):
                raise SceneError(f"invariant violated: lane {lane.id!r} has repeated centerline points")
            if lane.width <= VEHICLE_WIDTH:
                raise SceneError(f"invariant violated: lane {lane.id!r} width {lane.width} "
                                 f"must exceed vehicle width {VEHICLE_WIDTH}")
        for k, sp in enumerate(self.spawn_points):
            if sp.lane not in self.lane_by_id:
                raise SceneError(f"invariant violated: spawn {k} references unknown lane {sp.lane!r}")
            if not self.on_road(sp.position)[0]:
                raise SceneError(f"invariant violated: spawn {k} at {sp.position.tolist()} "
                                 f"lies outside the drivable area")
        for k, d in enumerate(self.destinations):
            if d.radius <= 0:
                raise SceneError(f"invariant violated: destination {k} radius must be positive")
            if not any(self.route(sp.lane, d) is not None for sp in self.spawn_points):
                raise SceneError(f"invariant violated: destination {k} is unreachable from every spawn point")
        for k, sp in enumerate(self.spawn_points):
            if not self.reachable_destinations(sp):
                raise SceneError(f"invariant violated: spawn {k} reaches no destination")


# -- serialization -------------------------------------------------------------

def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "scene": {"name": scene.name, "target_agent_count": scene.target_agent_count},
        "lane": [{"id": lane.id, "width": lane.width, "role": lane.role,
                  "centerline": lane.centerline.tolist()} for lane in scene.lanes],
        "spawn": [{"position": sp.position.tolist(), "heading": sp.heading, "lane": sp.lane}
                  for sp in scene.spawn_points],
        "destination": [{"center": d.center.tolist(), "radius": d.radius} for d in scene.destinations],
        "obstacle": [{"center": o.center.tolist(), "heading": o.heading, "length": o.length,
                      "width": o.width} for o in scene.static_obstacles],
    }


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise SceneError(f"{where}: missing key {key!r}")
    return table[key]


def scene_from_dict(doc: dict, name: str = "scene") -> SceneSpec:
    meta = doc.get("scene", {})
    try:
        lanes = [Lane(str(_require(t, "id", f"lane {k}")), _require(t, "centerline", f"lane {k}"),
                      float(_require(t, "width", f"lane {k}")), str(t.get("role", "")))
                 for k, t in enumerate(doc.get("lane", []))]
        spawns = [SpawnPoint(_require(t, "position", f"spawn {k}"), float(_require(t, "heading", f"spawn {k}")),
                             str(_require(t, "lane", f"spawn {k}")))
                  for k, t in enumerate(doc.get("spawn", []))]
        dests = [Destination(_require(t, "center", f"destination {k}"),
                             float(_require(t, "radius", f"destination {k}")))
                 for k, t in enumerate(doc.get("destination", []))]
        obstacles = [Obstacle(_require(t, "center", f"obstacle {k}"), float(t.get("heading", 0.0)),
                              float(_require(t, "length", f"obstacle {k}")),
                              float(_require(t, "width", f"obstacle {k}")))
                     for k, t in enumerate(doc.get("obstacle", []))]
    except (TypeError, ValueError) as err:
        if isinstance(err, SceneError):
            raise
        raise SceneError(f"malformed scene field: {err}") from err
    if not lanes:
        raise SceneError("invariant violated: scene needs at least one [[lane]]")
    if not spawns:
        raise SceneError("invariant violated: scene needs at least one [[spawn]]")
    if not dests:
        raise SceneError("invariant violated: scene needs at least one [[destination]]")
    scene = SceneSpec(str(meta.get("name", name)), lanes, spawns, dests, obstacles,
                      int(meta.get("target_agent_count", len(spawns))))
    scene.validate()
    return scene


def load_scene(path: str | Path) -> SceneSpec:
    """Parse and validate a scene file; built-in scene names are accepted too."""
    path = Path(path)
    if not path.exists():
        from copo.env.scenes import BUILTIN_SCENES, builtin_scene
        if str(path) in BUILTIN_SCENES:
            return builtin_scene(str(path))
        raise SceneError(f"scene file not found: {path}")
    text = path.read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise SceneError(f"{path}: parse error: {err}") from err
    return scene_from_dict(doc, name=path.stem)


def dump_scene(scene: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(tomli_w.dumps(scene_to_dict(scene)))
