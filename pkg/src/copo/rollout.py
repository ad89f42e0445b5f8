"""Experience collection, agent-episode slicing, reward streams, GAE and batching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from copo import netcore
from copo.env import geometry as geo
from copo.env.simulator import TRUNCATED, SimulationError, Simulator

STREAMS = ("I", "N", "G")
HALF_PI = 0.5 * math.pi


@dataclass
class TransitionRecord:
    agent_id: int
    step: int
    obs: list
    action: list
    log_prob_behavior: float
    r_individual: float
    r_neighborhood: float
    r_global: float
    done: bool
    v_I: float
    v_N: float
    v_G: float
    lcf_phi: float
    lcf_eps: float


@dataclass
class AgentEpisodeBuffer:
    """One agent's contiguous transitions inside an environmental episode (or batch fragment).

    ``reason`` is the termination cause of the last record; ``truncated`` means
    the lifetime continues past this buffer (horizon or batch cut) and the
    returns are bootstrapped from ``bootstrap_obs``.
    """

    agent_id: int
    steps: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    actions_env: np.ndarray
    log_prob: np.ndarray
    mean_old: np.ndarray
    log_std_old: np.ndarray
    pos_before: np.ndarray
    pos_after: np.ndarray
    r_individual: np.ndarray
    lcf_phi: float
    lcf_eps: float
    reason: str
    bootstrap_obs: np.ndarray | None = None
    r_neighborhood: np.ndarray | None = None
    r_global: np.ndarray | None = None
    values: dict[str, np.ndarray] = field(default_factory=dict)
    bootstrap_values: dict[str, float] = field(default_factory=dict)
    advantages: dict[str, np.ndarray] = field(default_factory=dict)
    targets: dict[str, np.ndarray] = field(default_factory=dict)
    critic_inputs: np.ndarray | None = None
    bootstrap_critic_input: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def truncated(self) -> bool:
        return self.reason == TRUNCATED

    @property
    def dones(self) -> np.ndarray:
        d = np.zeros(len(self), dtype=bool)
        d[-1] = True
        return d

    def rewards(self, stream: str) -> np.ndarray:
        r = {"I": self.r_individual, "N": self.r_neighborhood, "G": self.r_global}[stream]
        if r is None:
            raise ValueError(f"reward stream {stream} not computed yet")
        return r

    def records(self) -> Iterator[TransitionRecord]:
        for k in range(len(self)):
            def val(s):
                return float(self.values[s][k]) if s in self.values else float("nan")
            yield TransitionRecord(
                self.agent_id, int(self.steps[k]), self.obs[k].tolist(), self.actions[k].tolist(),
                float(self.log_prob[k]), float(self.r_individual[k]),
                float(self.r_neighborhood[k]) if self.r_neighborhood is not None else float("nan"),
                float(self.r_global[k]) if self.r_global is not None else float("nan"),
                k == len(self) - 1, val("I"), val("N"), val("G"), self.lcf_phi, self.lcf_eps)


@dataclass
class Frame:
    """All agents acting at one environment step, in ascending id order."""

    t: int
    ids: np.ndarray
    obs: np.ndarray
    actions_env: np.ndarray
    pos_before: np.ndarray
    pos_after: np.ndarray
    rewards: np.ndarray


@dataclass
class EnvironmentalEpisode:
    """Agent buffers plus per-step frames for one (possibly partial) environmental episode.

    ``tail`` holds (ids, obs, positions) of agents still running when the
    episode was cut, used to bootstrap critics that look at neighbors.
    """

    buffers: list[AgentEpisodeBuffer]
    frames: list[Frame]
    horizon: int
    tail: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    @property
    def active_counts(self) -> np.ndarray:
        return np.array([len(f.ids) for f in self.frames])

    def buffer_of(self, agent_id: int) -> AgentEpisodeBuffer:
        return self._index()[agent_id]

    def _index(self) -> dict[int, AgentEpisodeBuffer]:
        return {b.agent_id: b for b in self.buffers}

    @property
    def num_transitions(self) -> int:
        return sum(len(b) for b in self.buffers)

    def total_reward_by_time(self) -> float:
        return float(sum(f.rewards.sum() for f in self.frames))

    def total_reward_by_agent(self) -> float:
        return float(sum(b.r_individual.sum() for b in self.buffers))


class _Open:
    """Growing per-agent lists during collection."""

    def __init__(self, agent_id: int, phi: float, eps: float):
        self.agent_id = agent_id
        self.phi = phi
        self.eps = eps
        self.cols: dict[str, list] = {k: [] for k in (
            "steps", "obs", "actions", "actions_env", "log_prob", "mean_old", "log_std_old",
            "pos_before", "pos_after", "r_individual")}

    def close(self, reason: str, bootstrap_obs: np.ndarray | None) -> AgentEpisodeBuffer:
        c = {k: np.array(v) for k, v in self.cols.items()}
        return AgentEpisodeBuffer(self.agent_id, c["steps"].astype(int), c["obs"], c["actions"], c["actions_env"],
                                  c["log_prob"], c["mean_old"], c["log_std_old"], c["pos_before"],
                                  c["pos_after"], c["r_individual"], self.phi, self.eps, reason,
                                  None if bootstrap_obs is None else np.array(bootstrap_obs))


@dataclass
class LcfSampler:
    """Draws each new agent's coordination angle phi = clamp(mu + sigma * eps, -pi/2, pi/2)."""

    mu: float
    sigma: float

    def draw(self, rng: np.random.Generator) -> tuple[float, float]:
        eps = float(rng.standard_normal())
        return min(max(self.mu + self.sigma * eps, -HALF_PI), HALF_PI), eps


class Collector:
    """Steps one simulator with a shared policy, carrying episodes across batches.

    The simulator keeps running between :meth:`collect` calls; a batch cut
    closes every open agent buffer as truncated and reopens it (same agent,
    same phi) in the next batch.
    """

    def __init__(self, sim: Simulator, seed: int, phi_feature: bool = False):
        self.sim = sim
        self.seed = int(seed)
        self.phi_feature = phi_feature
        self.episode_index = 0
        self.obs: dict[int, np.ndarray] | None = None
        self.phis: dict[int, tuple[float, float]] = {}
        self.open: dict[int, _Open] = {}
        self.rng = np.random.default_rng(seed + 7919)
        self.env_steps = 0
        self.finished: list[AgentEpisodeBuffer] = []
        self.completed_reasons: list[str] = []

    def _reset(self) -> None:
        self.obs = self.sim.reset(self.seed + self.episode_index)
        self.episode_index += 1
        self.phis.clear()
        self.open.clear()

    def _policy_input(self, ids, obs: np.ndarray) -> np.ndarray:
        if not self.phi_feature:
            return obs
        phi = np.array([self.phis[i][0] for i in ids]) / HALF_PI
        return np.concatenate([obs, phi[:, None]], axis=1)

    def collect(self, policy: netcore.ParamSet, lcf: LcfSampler, batch_target: int,
                deterministic: bool = False,
                action_override: Callable[[int], np.ndarray | None] | None = None) -> list[EnvironmentalEpisode]:
        """Run until at least ``batch_target`` transitions are stored.

        ``action_override(agent_id)`` may return a fixed action for agents not
        controlled by ``policy`` (their transitions are still recorded).
        """
        episodes: list[EnvironmentalEpisode] = []
        frames: list[Frame] = []
        closed: list[AgentEpisodeBuffer] = []
        total = 0
        if self.obs is None or self.sim.episode_done:
            self._reset()
        while True:
            ids = sorted(self.obs)
            for i in ids:
                if i not in self.phis:
                    self.phis[i] = lcf.draw(self.rng)
                if i not in self.open:
                    self.open[i] = _Open(i, *self.phis[i])
            if not ids:
                raise SimulationError("no active agents to control; scene cannot spawn any vehicle")
            obs = np.stack([self.obs[i] for i in ids])
            out = netcore.forward_policy(policy, self._policy_input(ids, obs))
            if deterministic:
                raw = out.mean.copy()
                logp = netcore.gaussian_log_prob(out.mean, out.log_std, raw)
                act = np.clip(raw, -1.0, 1.0)
            else:
                act, logp, raw = netcore.sample_action(out, self.rng)
            if action_override is not None:
                for n, i in enumerate(ids):
                    a = action_override(i)
                    if a is not None:
                        act[n] = raw[n] = np.clip(a, -1.0, 1.0)
                        logp[n] = netcore.gaussian_log_prob(out.mean[n], out.log_std[n], raw[n])
            pos_before = np.stack([self.sim.agents[i].position for i in ids])
            try:
                result = self.sim.step({i: act[n] for n, i in enumerate(ids)})
            except SimulationError as err:
                raise SimulationError(f"environment step {self.sim.step_count} failed: {err}") from err
            self.env_steps += 1
            t = result.step
            pos_after = np.stack([result.positions[i] for i in ids])
            rew = np.array([result.rewards[i] for i in ids])
            frames.append(Frame(t, np.array(ids), obs, act.copy(), pos_before, pos_after, rew))
            for n, i in enumerate(ids):
                col = self.open[i].cols
                col["steps"].append(t)
                col["obs"].append(obs[n])
                col["actions"].append(raw[n])
                col["actions_env"].append(act[n])
                col["log_prob"].append(logp[n])
                col["mean_old"].append(out.mean[n])
                col["log_std_old"].append(out.log_std[n])
                col["pos_before"].append(pos_before[n])
                col["pos_after"].append(pos_after[n])
                col["r_individual"].append(rew[n])
                if result.dones[i]:
                    reason = result.reasons[i]
                    closed.append(self.open.pop(i).close(reason, result.final_observations.get(i)))
                    self.completed_reasons.append(reason)
            total += len(ids)
            self.obs = result.observations
            if result.episode_done:
                fin = sorted(result.final_observations)
                tail = (np.array(fin, dtype=int),
                        np.stack([result.final_observations[i] for i in fin]) if fin else np.zeros((0, 0)),
                        np.stack([result.positions[i] for i in fin]) if fin else np.zeros((0, 2)))
                episodes.append(self._finish(closed, frames, tail))
                closed, frames = [], []
                if total >= batch_target:
                    break
                self._reset()
                continue
            if total >= batch_target:
                tail_ids = sorted(self.obs)
                tail = (np.array(tail_ids, dtype=int),
                        np.stack([self.obs[i] for i in tail_ids]) if tail_ids else np.zeros((0, 0)),
                        np.stack([self.sim.agents[i].position for i in tail_ids]) if tail_ids else np.zeros((0, 2)))
                for i in sorted(self.open):
                    closed.append(self.open.pop(i).close(TRUNCATED, self.obs[i]))
                episodes.append(self._finish(closed, frames, tail))
                break
        return episodes

    def _finish(self, closed, frames, tail) -> EnvironmentalEpisode:
        closed = [b for b in closed if len(b)]
        closed.sort(key=lambda b: (int(b.steps[0]), b.agent_id))
        return EnvironmentalEpisode(closed, frames, self.sim.cfg.horizon, tail)


def collect(collector: Collector, policy: netcore.ParamSet, lcf: LcfSampler,
            batch_target: int) -> list[EnvironmentalEpisode]:
    return collector.collect(policy, lcf, batch_target)


# -- reward streams ---------------------------------------------------------------

def neighborhood_rewards(episode: EnvironmentalEpisode, d_n: float = 10.0) -> EnvironmentalEpisode:
    """Mean individual reward of the other agents within ``d_n`` (0 when none)."""
    index = episode._index()
    for b in episode.buffers:
        b.r_neighborhood = np.zeros(len(b))
    for f in episode.frames:
        neigh = geo.radius_neighbors(f.pos_after, d_n)
        for n, i in enumerate(f.ids):
            b = index[int(i)]
            if len(neigh[n]):
                b.r_neighborhood[f.t - b.steps[0]] = float(np.mean(f.rewards[neigh[n]]))
    return episode


def global_rewards(episode: EnvironmentalEpisode) -> EnvironmentalEpisode:
    """Every agent active at step t receives the mean reward of all agents active at t."""
    index = episode._index()
    for b in episode.buffers:
        b.r_global = np.zeros(len(b))
    for f in episode.frames:
        rg = float(np.sum(f.rewards) / len(f.rewards))
        for i in f.ids:
            b = index[int(i)]
            b.r_global[f.t - b.steps[0]] = rg
    return episode


# -- advantages -------------------------------------------------------------------

def gae(rewards: np.ndarray, values: np.ndarray, bootstrap: float, gamma: float,
        lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward GAE recursion; ``bootstrap`` is V(s_T) (0 for a true terminal)."""
    n = len(rewards)
    adv = np.zeros(n)
    nxt_v = bootstrap
    run = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * nxt_v - values[t]
        run = delta + gamma * lam * run
        adv[t] = run
        nxt_v = values[t]
    return adv, adv + values


def compute_gae(buffer: AgentEpisodeBuffer, stream: str, gamma: float, lam: float) -> AgentEpisodeBuffer:
    if stream not in buffer.values:
        raise ValueError(f"value predictions for stream {stream} missing")
    boot = buffer.bootstrap_values.get(stream, 0.0) if buffer.truncated else 0.0
    adv, tgt = gae(buffer.rewards(stream), buffer.values[stream], boot, gamma, lam)
    buffer.advantages[stream] = adv
    buffer.targets[stream] = tgt
    return buffer


# -- batching ---------------------------------------------------------------------

class SampleBatch:
    """Column store of flattened transitions with shuffled minibatch iteration."""

    def __init__(self, columns: dict[str, np.ndarray]):
        sizes = {len(v) for v in columns.values()}
        if len(sizes) != 1:
            raise ValueError(f"ragged batch columns: {sizes}")
        self.columns = columns
        self.size = sizes.pop()

    def __getitem__(self, key: str) -> np.ndarray:
        return self.columns[key]

    def __contains__(self, key: str) -> bool:
        return key in self.columns

    def __len__(self) -> int:
        return self.size

    def subset(self, idx: np.ndarray) -> "SampleBatch":
        return SampleBatch({k: v[idx] for k, v in self.columns.items()})

    def permutation(self, seed: int) -> np.ndarray:
        return np.random.default_rng(seed).permutation(self.size)

    def num_minibatches(self, minibatch: int) -> int:
        return -(-self.size // minibatch)

    def minibatches(self, minibatch: int, seed: int) -> Iterator["SampleBatch"]:
        perm = self.permutation(seed)
        for k in range(self.num_minibatches(minibatch)):
            yield self.subset(perm[k * minibatch:(k + 1) * minibatch])


def standardize(x: np.ndarray) -> np.ndarray:
    std = x.std()
    return (x - x.mean()) / (std if std > 1e-12 else 1.0)


def build_batch(episodes: list[EnvironmentalEpisode], normalize: bool = True,
                streams: tuple[str, ...] = STREAMS) -> SampleBatch:
    """Flatten buffers in episode order; optionally standardize each advantage column."""
    buffers = [b for ep in episodes for b in ep.buffers]
    if not buffers:
        raise ValueError("cannot build a batch from an empty episode list")
    cols: dict[str, list] = {k: [] for k in ("obs", "actions", "log_prob", "mean_old", "log_std_old",
                                             "phi", "eps", "agent_id", "step")}
    for s in streams:
        cols[f"adv_{s}"] = []
        cols[f"target_{s}"] = []
        cols[f"value_{s}"] = []
    has_critic = buffers[0].critic_inputs is not None
    if has_critic:
        cols["critic_obs"] = []
    for b in buffers:
        n = len(b)
        cols["obs"].append(b.obs)
        cols["actions"].append(b.actions)
        cols["log_prob"].append(b.log_prob)
        cols["mean_old"].append(b.mean_old)
        cols["log_std_old"].append(b.log_std_old)
        cols["phi"].append(np.full(n, b.lcf_phi))
        cols["eps"].append(np.full(n, b.lcf_eps))
        cols["agent_id"].append(np.full(n, b.agent_id))
        cols["step"].append(b.steps)
        for s in streams:
            cols[f"adv_{s}"].append(b.advantages[s])
            cols[f"target_{s}"].append(b.targets[s])
            cols[f"value_{s}"].append(b.values[s])
        if has_critic:
            cols["critic_obs"].append(b.critic_inputs)
    out = {k: np.concatenate(v) for k, v in cols.items()}
    for s in streams:
        out[f"adv_raw_{s}"] = out[f"adv_{s}"].copy()
        if normalize:
            out[f"adv_{s}"] = standardize(out[f"adv_{s}"])
    return SampleBatch(out)


def dump_batch(episodes: list[EnvironmentalEpisode], path: str | Path) -> None:
    """Line-delimited JSON, one TransitionRecord per line."""
    with open(path, "w") as fh:
        for ep in episodes:
            for b in ep.buffers:
                for rec in b.records():
                    fh.write(json.dumps(rec.__dict__) + "\n")
