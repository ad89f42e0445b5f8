"""Deterministic 2D multi-vehicle simulator with agent spawn/terminate/respawn."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from copo.env import geometry as geo
from copo.env.scene import VEHICLE_LENGTH, VEHICLE_WIDTH, Route, SceneSpec

SUCCESS = "success"
CRASH = "crash"
OUT_OF_ROAD = "out_of_road"
TRUNCATED = "truncated"
TERMINAL_REASONS = (SUCCESS, CRASH, OUT_OF_ROAD)


class SimulationError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    dt: float = 0.2
    wheelbase: float = 2.5
    max_steer: float = 0.6
    max_accel: float = 3.0
    max_brake: float = 5.0
    v_max: float = 15.0
    spawn_speed: float = 0.0
    progress_coef: float = 1.0
    success_reward: float = 10.0
    failure_penalty: float = 5.0
    lidar_range: float = 40.0
    n_rays: int = 72
    dead_steps: int = 10
    horizon: int = 1000
    hash_cell: float = 10.0
    spawn_margin: float = 1.0
    respawn_clearance: float = 15.0
    checkpoint_ahead: float = 15.0
    dest_scale: float = 200.0


@dataclass
class KinematicAction:
    steer_cmd: float
    accel_cmd: float

    @classmethod
    def from_array(cls, a) -> "KinematicAction":
        a = np.asarray(a, dtype=float).reshape(-1)
        return cls(float(a[0]), float(a[1]))


@dataclass
class VehicleState:
    agent_id: int
    position: np.ndarray
    heading: float
    speed: float
    steering: float
    spawn_step: int
    spawn_index: int
    destination: int
    route: Route = field(repr=False)
    progress: float = 0.0
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH
    end_step: int | None = None
    dead_timer: int = 0
    done_reason: str | None = None

    def corners(self) -> np.ndarray:
        return geo.box_corners(self.position[0], self.position[1], self.heading, self.length, self.width)


@dataclass
class StepOutcome:
    """Result of one tick.

    ``rewards``/``dones``/``reasons`` cover the agents that acted this tick;
    ``observations`` covers every agent active after the tick, including
    ``new_agents`` spawned to replace terminated ones. Agents cut off by the
    horizon also get their last observation in ``final_observations``.
    """

    rewards: dict[int, float]
    dones: dict[int, bool]
    reasons: dict[int, str]
    new_agents: list[int]
    observations: dict[int, np.ndarray]
    positions: dict[int, np.ndarray]
    step: int
    episode_done: bool
    final_observations: dict[int, np.ndarray] = field(default_factory=dict)


def accel_from_cmd(cmd: float, cfg: EnvConfig) -> float:
    return cmd * cfg.max_accel if cmd >= 0 else cmd * cfg.max_brake


def bicycle_step(x: float, y: float, heading: float, speed: float, steer: float, accel: float,
                 cfg: EnvConfig) -> tuple[float, float, float, float]:
    """One explicit Euler tick of the kinematic bicycle model (speed clamped to [0, v_max])."""
    nx = x + speed * math.cos(heading) * cfg.dt
    ny = y + speed * math.sin(heading) * cfg.dt
    nh = float(geo.wrap_angle(heading + speed / cfg.wheelbase * math.tan(steer) * cfg.dt))
    nv = min(max(speed + accel * cfg.dt, 0.0), cfg.v_max)
    return nx, ny, nh, nv


def compute_reward(progress: float, reason: str | None, cfg: EnvConfig) -> float:
    """Dense longitudinal progress plus sparse terminal bonus or penalty."""
    r = cfg.progress_coef * progress
    if reason == SUCCESS:
        r += cfg.success_reward
    elif reason in (CRASH, OUT_OF_ROAD):
        r -= cfg.failure_penalty
    return r


def ray_directions(heading: float, n_rays: int) -> np.ndarray:
    ang = heading + 2.0 * np.pi * np.arange(n_rays) / n_rays
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def lidar_from_boxes(origin: np.ndarray, heading: float, boxes: list[np.ndarray],
                     seg_a: np.ndarray | None = None, seg_b: np.ndarray | None = None,
                     n_rays: int = 72, max_range: float = 40.0) -> np.ndarray:
    """Normalized ray distances in [0, 1]; ray k points at heading + 2*pi*k/n_rays."""
    parts_a, parts_b = [], []
    for c in boxes:
        a, b = geo.box_edges(c)
        parts_a.append(a)
        parts_b.append(b)
    if seg_a is not None and len(seg_a):
        parts_a.append(seg_a)
        parts_b.append(seg_b)
    a = np.concatenate(parts_a) if parts_a else np.zeros((0, 2))
    b = np.concatenate(parts_b) if parts_b else np.zeros((0, 2))
    dist = geo.ray_segment_hits(np.asarray(origin, float), ray_directions(heading, n_rays), a, b, max_range)
    return dist / max_range


class Simulator:
    """One simulation instance; single-threaded, all randomness from one seeded generator."""

    def __init__(self, scene: SceneSpec, config: EnvConfig | None = None, record: bool = False):
        self.scene = scene
        self.cfg = config or EnvConfig()
        self.target_agent_count = scene.target_agent_count
        self.record = record
        self._routes: dict[tuple[str, int], Route | None] = {}
        self._reachable = [scene.reachable_destinations(sp) for sp in scene.spawn_points]
        self._obstacle_corners = [o.corners() for o in scene.static_obstacles]
        self.agents: dict[int, VehicleState] = {}
        self.dead: dict[int, VehicleState] = {}
        self.history: dict[int, VehicleState] = {}
        self.trajectory: list[dict] = []
        self.step_count = 0
        self.episode_done = False
        self.rng = np.random.default_rng(0)
        self._next_id = 0

    # -- lifecycle -----------------------------------------------------------

    def reset(self, seed: int) -> dict[int, np.ndarray]:
        self.rng = np.random.default_rng(seed)
        self.agents.clear()
        self.dead.clear()
        self.history.clear()
        self.trajectory = []
        self.step_count = 0
        self.episode_done = False
        self._next_id = 0
        self._spawn_up_to_target()
        return self._observe_all(sorted(self.agents))

    def _route(self, spawn_index: int, dest: int) -> Route:
        key = (self.scene.spawn_points[spawn_index].lane, dest)
        if key not in self._routes:
            self._routes[key] = self.scene.route(key[0], self.scene.destinations[dest])
        return self._routes[key]

    def _bodies(self) -> list[np.ndarray]:
        bodies = [v.corners() for v in self.agents.values()]
        bodies += [v.corners() for v in self.dead.values()]
        bodies += self._obstacle_corners
        return bodies

    def free_spawn_points(self, clearance: float = 0.0) -> list[int]:
        """Spawn points whose margin-inflated footprint touches no body.

        With ``clearance`` > 0 a point is also blocked while any active vehicle
        center lies within that radius, so a respawn never appears in front of
        a vehicle too close to stop.
        """
        bodies = self._bodies()
        centers = np.array([v.position for v in self.agents.values()]).reshape(-1, 2)
        free = []
        for k, sp in enumerate(self.scene.spawn_points):
            if clearance > 0 and len(centers) and np.min(np.sum((centers - sp.position) ** 2, axis=1)) < clearance ** 2:
                continue
            box = geo.box_corners(sp.position[0], sp.position[1], sp.heading,
                                  VEHICLE_LENGTH + 2 * self.cfg.spawn_margin,
                                  VEHICLE_WIDTH + 2 * self.cfg.spawn_margin)
            if all(not geo.boxes_overlap(box, b) for b in bodies):
                free.append(k)
        return free

    def _spawn_up_to_target(self, clearance: float = 0.0) -> list[int]:
        new_ids = []
        while len(self.agents) < self.target_agent_count:
            free = self.free_spawn_points(clearance)
            if not free:
                break
            k = int(free[self.rng.integers(len(free))])
            sp = self.scene.spawn_points[k]
            dest = int(self._reachable[k][self.rng.integers(len(self._reachable[k]))])
            route = self._route(k, dest)
            s0, _ = route.project(sp.position)
            aid = self._next_id
            self._next_id += 1
            self.agents[aid] = VehicleState(aid, sp.position.copy(), float(sp.heading), self.cfg.spawn_speed, 0.0,
                                            self.step_count, k, dest, route, progress=s0)
            self.history[aid] = self.agents[aid]
            new_ids.append(aid)
        return new_ids

    # -- stepping ------------------------------------------------------------

    def step(self, actions: dict[int, KinematicAction | np.ndarray]) -> StepOutcome:
        if self.episode_done:
            raise SimulationError("episode finished; call reset()")
        cfg = self.cfg
        missing = [i for i in self.agents if i not in actions]
        if missing:
            raise SimulationError(f"missing action for active agent(s) {sorted(missing)}")
        acting = sorted(self.agents)
        for i in acting:
            a = actions[i]
            if not isinstance(a, KinematicAction):
                a = KinematicAction.from_array(a)
            if not (math.isfinite(a.steer_cmd) and math.isfinite(a.accel_cmd)):
                raise SimulationError(f"non-finite action for agent {i}: {a}")
            steer_cmd = min(max(a.steer_cmd, -1.0), 1.0)
            accel_cmd = min(max(a.accel_cmd, -1.0), 1.0)
            v = self.agents[i]
            v.steering = steer_cmd * cfg.max_steer
            x, y, h, s = bicycle_step(v.position[0], v.position[1], v.heading, v.speed, v.steering,
                                      accel_from_cmd(accel_cmd, cfg), cfg)
            v.position = np.array([x, y])
            v.heading = h
            v.speed = s
        self.step_count += 1

        crashed = self._collisions()
        rewards, dones, reasons = {}, {}, {}
        positions = np.array([self.agents[i].position for i in acting]).reshape(-1, 2)
        road = self.scene.on_road(positions) if acting else np.zeros(0, bool)
        for n, i in enumerate(acting):
            v = self.agents[i]
            s_new, _ = v.route.project_local(v.position, v.progress)
            progress = s_new - v.progress
            v.progress = s_new
            dest = self.scene.destinations[v.destination]
            reason = None
            if i in crashed:
                reason = CRASH
            elif not road[n]:
                reason = OUT_OF_ROAD
            elif np.linalg.norm(v.position - dest.center) <= dest.radius:
                reason = SUCCESS
            rewards[i] = compute_reward(progress, reason, cfg)
            if reason is None and self.step_count >= cfg.horizon:
                reason = TRUNCATED
            dones[i] = reason is not None
            if reason is not None:
                reasons[i] = reason

        final_obs = self._observe_all([i for i in acting if reasons.get(i) == TRUNCATED])
        for i in list(self.dead):
            self.dead[i].dead_timer -= 1
            if self.dead[i].dead_timer <= 0:
                del self.dead[i]
        for i in acting:
            if dones[i]:
                v = self.agents.pop(i)
                v.end_step = self.step_count
                v.done_reason = reasons[i]
                if reasons[i] != TRUNCATED:
                    v.dead_timer = cfg.dead_steps
                    self.dead[i] = v

        if self.record:
            for i in acting:
                v = self.history[i]
                self.trajectory.append({
                    "step": self.step_count, "agent_id": i, "x": float(v.position[0]), "y": float(v.position[1]),
                    "heading": float(v.heading), "speed": float(v.speed), "reward": float(rewards[i]),
                    "done_reason": reasons.get(i, ""), "spawn_point": v.spawn_index,
                })

        self.episode_done = self.step_count >= cfg.horizon
        new_ids = [] if self.episode_done else self._spawn_up_to_target(cfg.respawn_clearance)
        obs = self._observe_all(sorted(self.agents))
        pos = {i: self.history[i].position.copy() for i in acting}
        return StepOutcome(rewards, dones, reasons, new_ids, obs, pos, self.step_count, self.episode_done,
                           final_obs)

    def _collisions(self) -> set[int]:
        """Active vehicles overlapping any other body; narrow phase is a separating-axis test."""
        grid = geo.SpatialHash(self.cfg.hash_cell)
        corners = {}
        for i, v in self.agents.items():
            corners[("a", i)] = v.corners()
        for i, v in self.dead.items():
            corners[("d", i)] = v.corners()
        for k, c in enumerate(self._obstacle_corners):
            corners[("o", k)] = c
        for key, c in corners.items():
            lo, hi = c.min(axis=0), c.max(axis=0)
            grid.insert_extent(key, lo[0], lo[1], hi[0], hi[1])
        crashed = set()
        for a, b in grid.candidate_pairs():
            if a[0] != "a" and b[0] != "a":
                continue
            if geo.boxes_overlap(corners[a], corners[b]):
                for key in (a, b):
                    if key[0] == "a":
                        crashed.add(key[1])
        return crashed

    # -- sensing -------------------------------------------------------------

    def _vehicle_bodies(self) -> list[tuple[int | None, np.ndarray, np.ndarray]]:
        """(agent id or None for dead vehicles, position, corners) of every vehicle body this tick."""
        return ([(i, v.position, v.corners()) for i, v in self.agents.items()]
                + [(None, v.position, v.corners()) for v in self.dead.values()])

    def _observe_all(self, ids: list[int]) -> dict[int, np.ndarray]:
        bodies = self._vehicle_bodies() if ids else []
        return {i: self.observe(i, bodies) for i in ids}

    def lidar_scan(self, agent_id: int, bodies: list | None = None) -> np.ndarray:
        v = self.agents[agent_id]
        reach2 = (self.cfg.lidar_range + VEHICLE_LENGTH) ** 2
        x, y = v.position
        boxes = [c for i, p, c in (self._vehicle_bodies() if bodies is None else bodies)
                 if i != agent_id and (p[0] - x) ** 2 + (p[1] - y) ** 2 <= reach2]
        boxes += self._obstacle_corners
        if len(self.scene.boundary_a):
            a, b = self.scene.boundary_a, self.scene.boundary_b
            e = b - a
            t = np.clip(np.einsum("ij,ij->i", v.position - a, e) / np.einsum("ij,ij->i", e, e), 0.0, 1.0)
            gap = a + t[:, None] * e - v.position
            near = np.einsum("ij,ij->i", gap, gap) <= self.cfg.lidar_range ** 2
            seg_a, seg_b = a[near], b[near]
        else:
            seg_a = seg_b = None
        return lidar_from_boxes(v.position, v.heading, boxes, seg_a, seg_b, self.cfg.n_rays, self.cfg.lidar_range)

    def observe(self, agent_id: int, bodies: list | None = None) -> np.ndarray:
        """Ego block (5), navigation block (4) and lidar block; every entry in [-1, 1]."""
        cfg = self.cfg
        v = self.agents[agent_id]
        route = v.route
        s, lateral = route.project_local(v.position, v.progress)
        _, tangent = route.point(s)
        half = 0.5 * route.width
        ego = [
            v.speed / cfg.v_max,
            v.steering / cfg.max_steer,
            geo.wrap_angle(v.heading - tangent) / np.pi,
            (half - lateral) / (2 * half),
            (half + lateral) / (2 * half),
        ]
        cp, _ = route.point(min(s + cfg.checkpoint_ahead, route.end_s))
        dest = self.scene.destinations[v.destination].center
        nav = []
        for target, scale in ((cp, cfg.lidar_range), (dest, cfg.dest_scale)):
            d = target - v.position
            nav.append(np.hypot(d[0], d[1]) / scale)
            nav.append(geo.wrap_angle(math.atan2(d[1], d[0]) - v.heading) / np.pi)
        obs = np.concatenate([np.array(ego + nav), self.lidar_scan(agent_id, bodies)])
        return np.clip(obs, -1.0, 1.0)

    @property
    def obs_dim(self) -> int:
        return 9 + self.cfg.n_rays

    def neighborhood_query(self, agent_id: int, d_n: float) -> set[int]:
        ids = sorted(self.agents)
        pts = np.array([self.agents[i].position for i in ids])
        k = ids.index(agent_id)
        return {ids[j] for j in geo.radius_neighbors(pts, d_n)[k]}

    def positions(self) -> dict[int, np.ndarray]:
        return {i: self.agents[i].position.copy() for i in sorted(self.agents)}

    def set_target_agent_count(self, n: int) -> None:
        self.target_agent_count = max(1, int(n))

    def export_trajectory(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.trajectory:
                fh.write(json.dumps(rec) + "\n")


def reset(scene: SceneSpec, seed: int, config: EnvConfig | None = None,
          record: bool = False) -> tuple[Simulator, dict[int, np.ndarray]]:
    sim = Simulator(scene, config, record=record)
    return sim, sim.reset(seed)


def step(sim: Simulator, actions: dict[int, KinematicAction | np.ndarray]) -> StepOutcome:
    return sim.step(actions)


def lidar_scan(sim: Simulator, agent_id: int) -> np.ndarray:
    return sim.lidar_scan(agent_id)


def neighborhood_query(sim: Simulator, agent_id: int, d_n: float) -> set[int]:
    return sim.neighborhood_query(agent_id, d_n)


def load_trajectory(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
