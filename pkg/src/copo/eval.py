"""Population metrics, agent-count sweeps, IDM mixed populations and trajectory density maps."""

from __future__ import annotations

import csv
import json
import math
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from copo import netcore
from copo.env.scene import VEHICLE_LENGTH, SceneSpec
from copo.env.simulator import (CRASH, OUT_OF_ROAD, SUCCESS, TRUNCATED, EnvConfig, KinematicAction,
                                Simulator, VehicleState)
from copo.rollout import HALF_PI


@dataclass
class EpisodeMetrics:
    n_success: int = 0
    n_crash: int = 0
    n_out_of_road: int = 0
    n_truncated: int = 0
    steps: int = 0
    episodes: int = 0

    @property
    def n_failure(self) -> int:
        return self.n_crash + self.n_out_of_road

    @property
    def n_total(self) -> int:
        return self.n_success + self.n_failure + self.n_truncated

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_total if self.n_total else 0.0

    @property
    def efficiency(self) -> float:
        return (self.n_success - self.n_failure) / self.steps if self.steps else 0.0

    @property
    def safety(self) -> int:
        return self.n_crash

    def add_outcome(self, reason: str) -> None:
        if reason == SUCCESS:
            self.n_success += 1
        elif reason == CRASH:
            self.n_crash += 1
        elif reason == OUT_OF_ROAD:
            self.n_out_of_road += 1
        elif reason == TRUNCATED:
            self.n_truncated += 1
        else:
            raise ValueError(f"unknown termination reason {reason!r}")

    def __add__(self, other: "EpisodeMetrics") -> "EpisodeMetrics":
        return EpisodeMetrics(self.n_success + other.n_success, self.n_crash + other.n_crash,
                              self.n_out_of_road + other.n_out_of_road, self.n_truncated + other.n_truncated,
                              self.steps + other.steps, self.episodes + other.episodes)

    @classmethod
    def from_reasons(cls, reasons: Iterable[str], steps: int) -> "EpisodeMetrics":
        m = cls(steps=steps, episodes=1)
        for r in reasons:
            m.add_outcome(r)
        return m

    CSV_FIELDS = ("episodes", "steps", "n_total", "n_success", "n_crash", "n_out_of_road", "n_truncated",
                  "success_rate", "efficiency", "safety")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


# -- IDM --------------------------------------------------------------------------

@dataclass
class IdmPolicyConfig:
    desired_speed: float = 8.0
    time_headway: float = 1.5
    max_accel: float = 2.0
    comfort_decel: float = 4.0
    min_gap: float = 2.0
    delta: float = 4.0
    lookahead: float = 50.0

    def __post_init__(self):
        for name in ("desired_speed", "time_headway", "max_accel", "comfort_decel", "min_gap", "lookahead"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


def idm_accel(v: float, v_lead: float | None, gap: float | None, cfg: IdmPolicyConfig) -> float:
    """Longitudinal IDM acceleration in m/s^2; no leader means free-road term only."""
    free = 1.0 - (v / cfg.desired_speed) ** cfg.delta
    if v_lead is None or gap is None:
        return cfg.max_accel * free
    s_star = cfg.min_gap + v * cfg.time_headway + v * (v - v_lead) / (2.0 * math.sqrt(cfg.max_accel * cfg.comfort_decel))
    s_star = max(s_star, 0.0)
    gap = max(gap, 1e-3)
    return cfg.max_accel * (free - (s_star / gap) ** 2)


def find_leader(ego: VehicleState, others: Iterable[VehicleState], cfg: IdmPolicyConfig) -> tuple[VehicleState | None, float | None]:
    """Nearest vehicle ahead on the ego route within the lookahead; returns (leader, bumper gap)."""
    best, best_gap = None, None
    half = 0.5 * ego.route.width
    for o in others:
        if o is ego:
            continue
        if np.sum((o.position - ego.position) ** 2) > (cfg.lookahead + VEHICLE_LENGTH) ** 2:
            continue
        s, lat = ego.route.project(o.position)
        ds = s - ego.progress
        if ds <= 0 or ds > cfg.lookahead or abs(lat) > half:
            continue
        gap = ds - 0.5 * (ego.length + o.length)
        if best_gap is None or gap < best_gap:
            best, best_gap = o, gap
    return best, best_gap


def idm_action(ego: VehicleState, leader: VehicleState | None, cfg: IdmPolicyConfig | None = None,
               env_cfg: EnvConfig | None = None, gap: float | None = None) -> KinematicAction:
    """IDM car following plus pure-pursuit tracking of the ego route, as normalized commands."""
    cfg = cfg or IdmPolicyConfig()
    env_cfg = env_cfg or EnvConfig()
    if leader is not None and gap is None:
        s_lead, _ = ego.route.project(leader.position)
        gap = s_lead - ego.progress - 0.5 * (ego.length + leader.length)
    a = idm_accel(ego.speed, None if leader is None else leader.speed, gap, cfg)
    accel_cmd = a / env_cfg.max_accel if a >= 0 else a / env_cfg.max_brake
    look = max(4.0, 1.0 * ego.speed + 4.0)
    target, _ = ego.route.point(ego.progress + look)
    d = target - ego.position
    alpha = math.atan2(d[1], d[0]) - ego.heading
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    steer = math.atan2(2.0 * env_cfg.wheelbase * math.sin(alpha), max(float(np.hypot(*d)), 1e-6))
    return KinematicAction(float(np.clip(steer / env_cfg.max_steer, -1, 1)), float(np.clip(accel_cmd, -1, 1)))


# -- episode runner -------------------------------------------------------------------

def load_policy(checkpoint) -> tuple[netcore.ParamSet, dict]:
    """Accept a ParamSet or a checkpoint path; the checkpoint file is only read."""
    if isinstance(checkpoint, netcore.ParamSet):
        return checkpoint, {}
    nets, _, extra = netcore.load_checkpoint(checkpoint)
    if "policy" not in nets:
        raise netcore.ShapeError(f"checkpoint {checkpoint} holds no policy network")
    return nets["policy"], extra


def learned_mask(n_agents: int, idm_fraction: float) -> np.ndarray:
    """Spread learned agents evenly through spawn order; the first n contain round((1-f) n) learned."""
    n = np.arange(n_agents + 1)
    count = np.floor((1.0 - idm_fraction) * n + 0.5)
    return np.diff(count) > 0


def _policy_input(policy: netcore.ParamSet, obs: np.ndarray, phi: float) -> np.ndarray:
    if policy.in_dim == obs.shape[1]:
        return obs
    if policy.in_dim == obs.shape[1] + 1:
        return np.concatenate([obs, np.full((len(obs), 1), phi / HALF_PI)], axis=1)
    raise netcore.ShapeError(f"policy expects {policy.in_dim} inputs, scene observations have {obs.shape[1]}")


def run_episode(policy: netcore.ParamSet, scene: SceneSpec, seed: int, env_cfg: EnvConfig | None = None,
                initial_agents: int | None = None, idm_fraction: float = 0.0,
                idm_cfg: IdmPolicyConfig | None = None, phi: float = 0.0,
                record: bool = False) -> tuple[EpisodeMetrics, list[dict]]:
    """One deterministic episode with mean actions; metrics count learned agents only."""
    env_cfg = env_cfg or EnvConfig()
    sim = Simulator(scene, env_cfg, record=record)
    if initial_agents is not None:
        sim.set_target_agent_count(initial_agents)
    obs = sim.reset(seed)
    if obs:
        _policy_input(policy, np.stack(list(obs.values()))[:1], phi)
    mask = learned_mask(max(sim.target_agent_count * 4, 16), idm_fraction)

    def is_learned(agent_id: int) -> bool:
        nonlocal mask
        while agent_id >= len(mask):
            mask = learned_mask(2 * len(mask), idm_fraction)
        return bool(mask[agent_id])

    reasons: list[str] = []
    while not sim.episode_done:
        ids = sorted(obs)
        if not ids:
            raise RuntimeError("no active agents; scene cannot spawn any vehicle")
        learned = [i for i in ids if is_learned(i)]
        actions: dict[int, np.ndarray | KinematicAction] = {}
        if learned:
            x = _policy_input(policy, np.stack([obs[i] for i in learned]), phi)
            mean = netcore.forward_policy(policy, x).mean
            actions.update({i: np.clip(mean[n], -1.0, 1.0) for n, i in enumerate(learned)})
        others = list(sim.agents.values()) + list(sim.dead.values())
        for i in ids:
            if i not in actions:
                ego = sim.agents[i]
                leader, gap = find_leader(ego, others, idm_cfg or IdmPolicyConfig())
                actions[i] = idm_action(ego, leader, idm_cfg, env_cfg, gap)
        res = sim.step(actions)
        reasons += [r for i, r in sorted(res.reasons.items()) if is_learned(i)]
        obs = res.observations
    return EpisodeMetrics.from_reasons(reasons, sim.step_count), (sim.trajectory if record else [])


def _episode_job(args):
    policy, scene, seed, env_cfg, initial_agents, idm_fraction, idm_cfg, phi = args
    return run_episode(policy, scene, seed, env_cfg, initial_agents, idm_fraction, idm_cfg, phi)[0]


def map_jobs(fn: Callable, jobs: list, workers: int = 1) -> list:
    """Ordered map; worker processes when ``workers`` > 1."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with mp.get_context("fork").Pool(min(workers, len(jobs))) as pool:
        return pool.map(fn, jobs)


def evaluate(checkpoint, scene: SceneSpec, n_episodes: int = 1, seed: int = 0,
             initial_agents: int | None = None, env_cfg: EnvConfig | None = None, phi: float = 0.0,
             workers: int = 1) -> EpisodeMetrics:
    """Aggregate metrics over ``n_episodes`` episodes seeded ``seed``, ``seed + 1``, ..."""
    return mixed_population_eval(checkpoint, scene, 0.0, seed, n_episodes, initial_agents, env_cfg, phi=phi,
                                 workers=workers)


def mixed_population_eval(checkpoint, scene: SceneSpec, idm_fraction: float, seed: int = 0, n_episodes: int = 1,
                          initial_agents: int | None = None, env_cfg: EnvConfig | None = None,
                          idm_cfg: IdmPolicyConfig | None = None, phi: float = 0.0,
                          workers: int = 1) -> EpisodeMetrics:
    """Learned-agent metrics when a fraction of spawned vehicles is driven by IDM."""
    if not 0.0 <= idm_fraction < 1.0:
        raise ValueError(f"idm_fraction must lie in [0, 1), got {idm_fraction}")
    policy, _ = load_policy(checkpoint)
    jobs = [(policy, scene, seed + k, env_cfg, initial_agents, idm_fraction, idm_cfg, phi) for k in range(n_episodes)]
    total = EpisodeMetrics()
    for m in map_jobs(_episode_job, jobs, workers):
        total = total + m
    return total


def sweep_initial_agents(checkpoint, scene: SceneSpec, counts: Iterable[int], **kw) -> list[tuple[int, EpisodeMetrics]]:
    return [(c, evaluate(checkpoint, scene, initial_agents=c, **kw)) for c in counts]


# -- trajectory density ------------------------------------------------------------

@dataclass
class DensityMap:
    origin: np.ndarray
    cell: float
    shape: tuple[int, int]
    groups: dict[int, np.ndarray] = field(default_factory=dict)
    crashes: list[tuple[float, float]] = field(default_factory=list)

    @property
    def total(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for g in self.groups.values():
            out += g
        return out


def trajectory_density(episodes: Iterable[Iterable[dict]], cell: float = 0.5,
                       bounds: tuple[float, float, float, float] | None = None) -> DensityMap:
    """Occupancy counts per spawn point on a ``cell``-sized grid plus crash locations.

    Grid rows index y, columns index x. ``bounds`` is (xmin, ymin, xmax, ymax);
    when omitted it covers the recorded positions.
    """
    recs = [r for ep in episodes for r in ep]
    if bounds is None:
        if recs:
            xy = np.array([[r["x"], r["y"]] for r in recs])
            lo, hi = xy.min(axis=0), xy.max(axis=0)
            bounds = (lo[0], lo[1], hi[0], hi[1])
        else:
            bounds = (0.0, 0.0, cell, cell)
    origin = np.array(bounds[:2], dtype=float)
    nx = max(1, int(math.floor((bounds[2] - bounds[0]) / cell)) + 1)
    ny = max(1, int(math.floor((bounds[3] - bounds[1]) / cell)) + 1)
    dm = DensityMap(origin, cell, (ny, nx))
    for r in recs:
        cx = int(math.floor((r["x"] - origin[0]) / cell))
        cy = int(math.floor((r["y"] - origin[1]) / cell))
        if not (0 <= cx < nx and 0 <= cy < ny):
            continue
        g = int(r.get("spawn_point", -1))
        if g not in dm.groups:
            dm.groups[g] = np.zeros(dm.shape)
        dm.groups[g][cy, cx] += 1
        if r.get("done_reason") == CRASH:
            dm.crashes.append((float(r["x"]), float(r["y"])))
    return dm


def write_pgm(path: str | Path, grid: np.ndarray) -> None:
    """Binary grayscale image, log-scaled; dark means dense. Row 0 is drawn at the top (max y)."""
    g = np.log1p(np.asarray(grid, dtype=float))[::-1]
    peak = g.max()
    img = 255 - (g / peak * 255 if peak > 0 else g).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no metric rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def load_trajectories(paths: Iterable[str | Path]) -> list[list[dict]]:
    out = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"trajectory file not found: {p}")
        with open(p) as fh:
            out.append([json.loads(line) for line in fh if line.strip()])
    return out
