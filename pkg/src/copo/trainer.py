"""Shared-parameter PPO family: IPO, mean-field critics, curriculum, and CoPO.

CoPO trains the policy on the coordinated advantage
``cos(phi) * A_I + sin(phi) * A_N`` and adjusts the distribution of the
per-agent angle ``phi`` by a first-order meta-gradient of the clipped
surrogate on the global-reward advantage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from copo import netcore
from copo.env.scene import SceneSpec
from copo.env.simulator import CRASH, OUT_OF_ROAD, SUCCESS, EnvConfig, Simulator
from copo.rollout import (
    HALF_PI,
    Collector,
    EnvironmentalEpisode,
    LcfSampler,
    SampleBatch,
    build_batch,
    compute_gae,
    global_rewards,
    neighborhood_rewards,
)
from copo.env import geometry as geo

log = logging.getLogger(__name__)

ALGORITHMS = ("ipo", "mfpo_concat", "mfpo_mean", "mfpo_mean_cf", "copo", "curriculum")
MFPO_VARIANTS = {"mfpo_concat": "concat_k", "mfpo_mean": "mean_field", "mfpo_mean_cf": "mean_field_cf"}
SIGMA_MIN, SIGMA_MAX = 1e-3, 1.0


@dataclass
class TrainerConfig:
    algorithm: str = "copo"
    clip_eps: float = 0.2
    kl_coeff: float = 1.0
    lr: float = 3e-4
    num_sgd_epochs: int = 5
    lcf_epochs: int = 5
    minibatch: int = 512
    batch: int = 1024
    gamma: float = 0.99
    gamma_global: float = 1.0
    lam: float = 0.95
    neighborhood_radius: float = 10.0
    lcf_lr: float = 1e-4
    lcf_init_mean: float = 0.0
    lcf_init_std: float = 0.1
    lcf_update: bool = True
    horizon: int = 1000
    feed_phi_to_policy: bool = False
    hidden: tuple[int, ...] = (256, 256)
    entropy_coeff: float = 0.0
    normalize_advantages: bool = True
    log_std_init: float = -0.5
    mfpo_k: int = 4
    mfpo_radius: float = 10.0
    max_grad_norm: float | None = None
    value_scale: float = 10.0
    max_env_steps: int = 1_000_000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        for name in ("lr", "lcf_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.minibatch < 1 or self.batch < 1:
            raise ValueError("batch and minibatch sizes must be positive")


@dataclass
class LcfDistribution:
    """Gaussian over the coordination angle, parameterized by (mu, sigma) in radians."""

    mu: float = 0.0
    sigma: float = 0.1

    def sampler(self) -> LcfSampler:
        return LcfSampler(self.mu, self.sigma)

    def sample_phi(self, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """phi for stored standard-normal draws, plus a mask of samples not clamped."""
        raw = self.mu + self.sigma * np.asarray(eps, dtype=float)
        return np.clip(raw, -HALF_PI, HALF_PI), (raw > -HALF_PI) & (raw < HALF_PI)


@dataclass
class IterationStats:
    iteration: int
    env_steps: int
    samples: int
    success_rate: float
    efficiency: float
    safety: int
    mean_kl: float
    clip_frac: float
    phi_mu: float
    phi_sigma: float
    policy_loss: float
    vf_loss_I: float
    vf_loss_N: float
    vf_loss_G: float
    mean_reward: float
    episodes_finished: int
    lcf_grad_mu: float = 0.0
    epoch_kl: list = field(default_factory=list, repr=False)
    epoch_clip_frac: list = field(default_factory=list, repr=False)

    CSV_FIELDS = ("iteration", "env_steps", "samples", "success_rate", "efficiency", "safety", "mean_kl", "clip_frac",
                  "phi_mu", "phi_sigma", "policy_loss", "vf_loss_I", "vf_loss_N", "vf_loss_G", "mean_reward",
                  "episodes_finished", "lcf_grad_mu")

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


# -- advantage mixing -------------------------------------------------------------

def coordinated_advantage(adv_i: np.ndarray, adv_n: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.cos(phi) * adv_i + np.sin(phi) * adv_n


# -- losses -----------------------------------------------------------------------

def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample KL(old || new) of diagonal Gaussians and its partials w.r.t. (mean_new, log_std_new)."""
    var_old = np.exp(2.0 * log_std_old)
    inv_var_new = np.exp(-2.0 * log_std_new)
    diff = mean_new - mean_old
    kl = np.sum(log_std_new - log_std_old + 0.5 * (var_old + diff * diff) * inv_var_new - 0.5, axis=-1)
    d_mean = diff * inv_var_new
    d_log_std = 1.0 - (var_old + diff * diff) * inv_var_new
    return kl, d_mean, d_log_std


def clipped_surrogate(logp_new: np.ndarray, logp_old: np.ndarray, adv: np.ndarray,
                      clip_eps: float) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """mean(min(rho*A, clip(rho)*A)) and its gradient w.r.t. each sample's new log-prob.

    Samples where the clipped term is the strict minimum contribute zero gradient.
    """
    with np.errstate(over="ignore"):
        ratio = np.exp(logp_new - logp_old)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        raise FloatingPointError(f"non-finite importance ratio at sample index {int(bad[0])}")
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    use_unclipped = surr1 <= surr2
    n = len(adv)
    obj = float(np.mean(np.minimum(surr1, surr2)))
    d_logp = np.where(use_unclipped, surr1, 0.0) / n
    return obj, d_logp, ratio, ~use_unclipped


@dataclass
class PolicyLossResult:
    loss: float
    grad: np.ndarray
    surrogate: float
    kl: float
    clip_frac: float
    entropy: float


def ppo_policy_loss(params: netcore.ParamSet, obs: np.ndarray, actions: np.ndarray, logp_old: np.ndarray,
                    mean_old: np.ndarray, log_std_old: np.ndarray, adv: np.ndarray, clip_eps: float,
                    kl_coeff: float, entropy_coeff: float = 0.0) -> PolicyLossResult:
    """-mean(clipped surrogate) + kl_coeff * mean KL(old||new) - entropy_coeff * entropy."""
    out = netcore.forward_policy(params, obs)
    logp = netcore.gaussian_log_prob(out.mean, out.log_std, actions)
    surr, d_logp, ratio, clipped = clipped_surrogate(logp, logp_old, adv, clip_eps)
    dm_lp, ds_lp = netcore.log_prob_grads(out.mean, out.log_std, actions)
    n = len(adv)
    kl, dm_kl, ds_kl = gaussian_kl(mean_old, log_std_old, out.mean, out.log_std)
    d_mean = -d_logp[:, None] * dm_lp + kl_coeff * dm_kl / n
    d_log_std = -d_logp[:, None] * ds_lp + kl_coeff * ds_kl / n
    entropy = float(np.sum(out.log_std[0] + 0.5 * (netcore.LOG_2PI + 1.0))) if n else 0.0
    d_log_std = d_log_std.sum(axis=0) - entropy_coeff * np.ones(params.action_dim)
    grad = netcore.policy_backward(params, out, d_mean, d_log_std)
    loss = -surr + kl_coeff * float(np.mean(kl)) - entropy_coeff * entropy
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip_eps))
    return PolicyLossResult(loss, grad, surr, float(np.mean(kl)), clip_frac, entropy)


def value_loss(params: netcore.ParamSet, inputs: np.ndarray, targets: np.ndarray,
               scale: float = 1.0) -> tuple[float, np.ndarray]:
    """0.5 * mean squared error against ``targets / scale`` and its flat gradient."""
    pred, cache = netcore.mlp_forward(params, inputs)
    err = pred[:, 0] - targets / scale
    n = len(targets)
    grad = netcore.mlp_backward(params, cache, (err / n)[:, None])
    return 0.5 * float(np.mean(err * err)), grad


def value_losses(batch: SampleBatch, nets: dict[str, netcore.ParamSet], inputs: np.ndarray | None = None,
                 scale: float = 1.0) -> dict[str, tuple[float, np.ndarray]]:
    """Independent regression loss per value head present in ``nets``."""
    x = batch["obs"] if inputs is None else inputs
    return {s: value_loss(p, x, batch[f"target_{s}"], scale) for s, p in nets.items()}


# -- centralized critic inputs ----------------------------------------------------

def _neighbor_block(ids, obs, pos, acts, k, variant, K, radius, obs_dim, act_dim):
    d = pos - pos[k]
    dist2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    others = [j for j in range(len(ids)) if j != k and dist2[j] <= radius * radius]
    parts = []
    if variant == "concat_k":
        others.sort(key=lambda j: (dist2[j], int(ids[j])))
        chosen = others[:K]
        block = np.zeros((K, obs_dim))
        for m, j in enumerate(chosen):
            block[m] = obs[j]
        parts.append(block.ravel())
    else:
        parts.append(obs[others].mean(axis=0) if others else np.zeros(obs_dim))
        if variant == "mean_field_cf":
            parts.append(acts[others].mean(axis=0) if others else np.zeros(act_dim))
    return np.concatenate(parts)


def critic_input_dim(obs_dim: int, act_dim: int, variant: str | None, K: int = 4) -> int:
    if variant is None:
        return obs_dim
    if variant == "concat_k":
        return obs_dim * (1 + K)
    if variant == "mean_field":
        return 2 * obs_dim
    if variant == "mean_field_cf":
        return 2 * obs_dim + act_dim
    raise ValueError(f"unknown critic variant {variant!r}")


def mfpo_features(episode: EnvironmentalEpisode, variant: str, K: int = 4, radius: float = 10.0) -> EnvironmentalEpisode:
    """Fill ``critic_inputs``: ego obs followed by neighbor obs (and actions for the cf variant).

    Neighbors are the other agents acting at the same step within ``radius``
    (positions before the step). ``concat_k`` stacks the K nearest, nearest
    first, zero-padded; ``mean_field`` averages them (zeros if none).
    """
    if variant not in ("concat_k", "mean_field", "mean_field_cf"):
        raise ValueError(f"unknown critic variant {variant!r}")
    index = episode._index()
    for b in episode.buffers:
        b.critic_inputs = None
    rows: dict[int, list] = {b.agent_id: [None] * len(b) for b in episode.buffers}
    obs_dim = episode.frames[0].obs.shape[1] if episode.frames else 0
    act_dim = episode.frames[0].actions_env.shape[1] if episode.frames else 0
    for f in episode.frames:
        for k, i in enumerate(f.ids):
            b = index[int(i)]
            feat = _neighbor_block(f.ids, f.obs, f.pos_before, f.actions_env, k, variant, K, radius, obs_dim, act_dim)
            rows[int(i)][f.t - b.steps[0]] = np.concatenate([f.obs[k], feat])
    for b in episode.buffers:
        b.critic_inputs = np.stack(rows[b.agent_id])
    if episode.tail is not None and len(episode.tail[0]):
        ids, obs, pos = episode.tail
        acts = np.zeros((len(ids), act_dim))
        for k, i in enumerate(ids):
            if int(i) in index and index[int(i)].truncated:
                feat = _neighbor_block(ids, obs, pos, acts, k, variant, K, radius, obs_dim, act_dim)
                index[int(i)].bootstrap_critic_input = np.concatenate([obs[k], feat])
    return episode


# -- curriculum ---------------------------------------------------------------------

def curriculum_schedule(progress: int, total: int, target_count: int) -> int:
    """Agent count at ``progress`` out of ``total`` (iterations or steps): 25/50/75/100 % of target
    over four equal phases."""
    phase = min(4 * progress // max(total, 1), 3)
    return int(math.ceil((phase + 1) / 4 * target_count))


# -- meta-gradient of the coordination factor ---------------------------------------------

@dataclass
class LcfGradient:
    objective: float
    d_mu: float
    d_sigma: float
    g1: np.ndarray = field(repr=False)


def global_surrogate_grad(theta_new: netcore.ParamSet, obs: np.ndarray, actions: np.ndarray,
                          logp_old: np.ndarray, adv_g: np.ndarray, clip_eps: float) -> tuple[float, np.ndarray]:
    """Clipped surrogate on the global advantage at ``theta_new`` and its flat gradient."""
    out = netcore.forward_policy(theta_new, obs)
    logp = netcore.gaussian_log_prob(out.mean, out.log_std, actions)
    surr, d_logp, _, _ = clipped_surrogate(logp, logp_old, adv_g, clip_eps)
    dm, ds = netcore.log_prob_grads(out.mean, out.log_std, actions)
    return surr, netcore.policy_backward(theta_new, out, d_logp[:, None] * dm, d_logp[:, None] * ds)


def lcf_objective(obs: np.ndarray, actions: np.ndarray, logp_old: np.ndarray, adv_i: np.ndarray,
                  adv_n: np.ndarray, adv_g: np.ndarray, lcf_eps: np.ndarray, theta_old: netcore.ParamSet,
                  theta_new: netcore.ParamSet, lcf: LcfDistribution, clip_eps: float,
                  g1: np.ndarray | None = None) -> LcfGradient:
    """First-order meta-gradient of the global surrogate w.r.t. (mu, sigma).

    g1 is the gradient of the global-advantage surrogate at ``theta_new``; the
    inner-update Jacobian is approximated by the score-weighted derivative of
    the coordinated advantage at ``theta_old``. Score sums are taken as one
    weighted backward pass instead of per-sample gradients.
    """
    if lcf_eps is None:
        raise ValueError("per-sample lcf_eps required for the LCF gradient")
    if theta_old.flat.shape != theta_new.flat.shape or theta_old.sizes != theta_new.sizes:
        raise netcore.ShapeError("theta_old and theta_new layouts differ")
    if g1 is None:
        _, g1 = global_surrogate_grad(theta_new, obs, actions, logp_old, adv_g, clip_eps)
    phi, live = lcf.sample_phi(lcf_eps)
    dadv_dphi = (-np.sin(phi) * adv_i + np.cos(phi) * adv_n) * live
    n = len(lcf_eps)
    adv_c = coordinated_advantage(adv_i, adv_n, phi)
    _, s_c = netcore.log_prob_and_grad(theta_old, obs, actions, adv_c / n)
    _, s_mu = netcore.log_prob_and_grad(theta_old, obs, actions, dadv_dphi / n)
    _, s_sigma = netcore.log_prob_and_grad(theta_old, obs, actions, dadv_dphi * lcf_eps / n)
    return LcfGradient(float(g1 @ s_c), float(g1 @ s_mu), float(g1 @ s_sigma), g1)


def lcf_update(lcf: LcfDistribution, gradient: tuple[float, float] | Callable[[LcfDistribution], tuple[float, float]],
               lcf_lr: float, epochs: int) -> LcfDistribution:
    """``epochs`` plain gradient-ascent steps; a callable gradient is re-evaluated every step."""
    for _ in range(epochs):
        g = gradient(lcf) if callable(gradient) else gradient
        g_mu, g_sigma = float(g[0]), float(g[1])
        if not (math.isfinite(g_mu) and math.isfinite(g_sigma)):
            log.warning("non-finite LCF gradient (%s, %s); step skipped", g_mu, g_sigma)
            continue
        lcf.mu = float(np.clip(lcf.mu + lcf_lr * g_mu, -HALF_PI, HALF_PI))
        lcf.sigma = float(np.clip(lcf.sigma + lcf_lr * g_sigma, SIGMA_MIN, SIGMA_MAX))
    return lcf


# -- training --------------------------------------------------------------------

def episode_outcomes(reasons: list[str]) -> tuple[int, int, int, int]:
    """(successes, crashes, out-of-road, total) over finished agent lifetimes."""
    succ = sum(r == SUCCESS for r in reasons)
    crash = sum(r == CRASH for r in reasons)
    oor = sum(r == OUT_OF_ROAD for r in reasons)
    return succ, crash, oor, len(reasons)


class Trainer:
    """Owns the shared policy, the three value heads, the LCF distribution and a collector."""

    def __init__(self, scene: SceneSpec, config: TrainerConfig | None = None, seed: int = 0,
                 env_config: EnvConfig | None = None):
        self.cfg = config or TrainerConfig()
        self.seed = int(seed)
        env_cfg = env_config or EnvConfig()
        env_cfg.horizon = self.cfg.horizon
        self.scene = scene
        self.sim = Simulator(scene, env_cfg)
        self.collector = Collector(self.sim, self.seed, phi_feature=self.cfg.feed_phi_to_policy)
        rng = np.random.default_rng(self.seed)
        obs_dim = self.sim.obs_dim
        self.act_dim = 2
        self.variant = MFPO_VARIANTS.get(self.cfg.algorithm)
        pol_in = obs_dim + (1 if self.cfg.feed_phi_to_policy else 0)
        crit_in = critic_input_dim(obs_dim, self.act_dim, self.variant, self.cfg.mfpo_k)
        self.policy = netcore.init_policy(pol_in, self.act_dim, self.cfg.hidden, rng, self.cfg.log_std_init)
        self.values = {s: netcore.init_value(crit_in, self.cfg.hidden, rng) for s in ("I", "N", "G")}
        self.opt = {"policy": netcore.AdamState.zeros_like(self.policy)}
        self.opt.update({s: netcore.AdamState.zeros_like(p) for s, p in self.values.items()})
        self.lcf = LcfDistribution(self.cfg.lcf_init_mean, self.cfg.lcf_init_std)
        self.iteration = 0
        self.env_steps = 0
        self.samples = 0
        self.base_target = scene.target_agent_count

    # streams whose values/advantages this algorithm needs
    @property
    def streams(self) -> tuple[str, ...]:
        return ("I", "N", "G") if self.cfg.algorithm == "copo" else ("I",)

    def policy_input(self, obs: np.ndarray, phi: np.ndarray) -> np.ndarray:
        if not self.cfg.feed_phi_to_policy:
            return obs
        return np.concatenate([obs, (phi / HALF_PI)[:, None]], axis=1)

    def process(self, episodes: list[EnvironmentalEpisode]) -> SampleBatch:
        """Reward streams, value predictions, GAE, then a flat batch."""
        cfg = self.cfg
        for ep in episodes:
            neighborhood_rewards(ep, cfg.neighborhood_radius)
            global_rewards(ep)
            if self.variant:
                mfpo_features(ep, self.variant, cfg.mfpo_k, cfg.mfpo_radius)
        buffers = [b for ep in episodes for b in ep.buffers]
        for s in ("I", "N", "G"):
            net = self.values[s]
            if s not in self.streams:
                for b in buffers:
                    b.values[s] = np.zeros(len(b))
                    b.advantages[s] = np.zeros(len(b))
                    b.targets[s] = np.zeros(len(b))
                continue
            x = np.concatenate([b.critic_inputs if self.variant else b.obs for b in buffers])
            v = cfg.value_scale * netcore.forward_value(net, x)
            off = 0
            for b in buffers:
                b.values[s] = v[off:off + len(b)]
                off += len(b)
            trunc = [b for b in buffers if b.truncated]
            if trunc:
                xb = np.stack([b.bootstrap_critic_input if self.variant else b.bootstrap_obs for b in trunc])
                vb = cfg.value_scale * netcore.forward_value(net, xb)
                for b, val in zip(trunc, vb):
                    b.bootstrap_values[s] = float(val)
            gamma = cfg.gamma_global if s == "G" else cfg.gamma
            for b in buffers:
                compute_gae(b, s, gamma, cfg.lam)
        return build_batch(episodes, normalize=cfg.normalize_advantages)

    def policy_advantage(self, batch: SampleBatch) -> np.ndarray:
        if self.cfg.algorithm == "copo":
            return coordinated_advantage(batch["adv_I"], batch["adv_N"], batch["phi"])
        return batch["adv_I"]

    def update(self, batch: SampleBatch) -> dict:
        """K_p epochs of minibatch updates of the policy and the trained value heads."""
        cfg = self.cfg
        adv_all = self.policy_advantage(batch)
        critic_key = "critic_obs" if self.variant else "obs"
        kls, clips, plosses = [], [], []
        vlosses = {s: [] for s in self.streams}
        for epoch in range(cfg.num_sgd_epochs):
            seed = (self.seed * 1_000_003 + self.iteration * 101 + epoch) % (2 ** 32)
            perm = batch.permutation(seed)
            ep_kl, ep_clip = [], []
            for k in range(batch.num_minibatches(cfg.minibatch)):
                idx = perm[k * cfg.minibatch:(k + 1) * cfg.minibatch]
                mb = batch.subset(idx)
                res = ppo_policy_loss(self.policy, self.policy_input(mb["obs"], mb["phi"]), mb["actions"],
                                      mb["log_prob"], mb["mean_old"], mb["log_std_old"], adv_all[idx],
                                      cfg.clip_eps, cfg.kl_coeff, cfg.entropy_coeff)
                netcore.optimizer_step(self.policy, res.grad, self.opt["policy"], cfg.lr, cfg.max_grad_norm)
                for s in self.streams:
                    loss, g = value_loss(self.values[s], mb[critic_key], mb[f"target_{s}"], cfg.value_scale)
                    netcore.optimizer_step(self.values[s], g, self.opt[s], cfg.lr, cfg.max_grad_norm)
                    vlosses[s].append(loss)
                ep_kl.append(res.kl)
                ep_clip.append(res.clip_frac)
                plosses.append(res.loss)
            kls.append(float(np.mean(ep_kl)))
            clips.append(float(np.mean(ep_clip)))
        return {"epoch_kl": kls, "epoch_clip_frac": clips, "policy_loss": float(np.mean(plosses)),
                **{f"vf_loss_{s}": float(np.mean(v)) for s, v in vlosses.items()}}

    def lcf_step(self, batch: SampleBatch, theta_old: netcore.ParamSet) -> float:
        cfg = self.cfg
        x = self.policy_input(batch["obs"], batch["phi"])
        _, g1 = global_surrogate_grad(self.policy, x, batch["actions"], batch["log_prob"], batch["adv_G"],
                                      cfg.clip_eps)
        first = []

        def grad_fn(lcf: LcfDistribution) -> tuple[float, float]:
            g = lcf_objective(x, batch["actions"], batch["log_prob"], batch["adv_I"], batch["adv_N"],
                              batch["adv_G"], batch["eps"], theta_old, self.policy, lcf, cfg.clip_eps, g1=g1)
            first.append(g.d_mu)
            return g.d_mu, g.d_sigma

        lcf_update(self.lcf, grad_fn, cfg.lcf_lr, cfg.lcf_epochs)
        return first[0] if first else 0.0

    def train_iteration(self) -> IterationStats:
        cfg = self.cfg
        if cfg.algorithm == "curriculum":
            self.sim.set_target_agent_count(
                curriculum_schedule(self.env_steps, cfg.max_env_steps, self.base_target))
        theta_old = self.policy.copy()
        n_reasons = len(self.collector.completed_reasons)
        ticks0 = self.collector.env_steps
        episodes = self.collector.collect(theta_old, self.lcf.sampler(), cfg.batch)
        reasons = self.collector.completed_reasons[n_reasons:]
        ticks = self.collector.env_steps - ticks0
        batch = self.process(episodes)
        upd = self.update(batch)
        grad_mu = 0.0
        if cfg.algorithm == "copo" and cfg.lcf_update:
            grad_mu = self.lcf_step(batch, theta_old)
        self.samples += len(batch)
        self.env_steps += ticks
        succ, crash, oor, total = episode_outcomes(reasons)
        stats = IterationStats(
            iteration=self.iteration, env_steps=self.env_steps, samples=self.samples,
            success_rate=succ / total if total else 0.0,
            efficiency=(succ - crash - oor) / ticks if ticks else 0.0,
            safety=crash, mean_kl=float(np.mean(upd["epoch_kl"])), clip_frac=float(np.mean(upd["epoch_clip_frac"])),
            phi_mu=self.lcf.mu, phi_sigma=self.lcf.sigma, policy_loss=upd["policy_loss"],
            vf_loss_I=upd.get("vf_loss_I", 0.0), vf_loss_N=upd.get("vf_loss_N", 0.0),
            vf_loss_G=upd.get("vf_loss_G", 0.0),
            mean_reward=float(np.mean([b.r_individual.mean() for ep in episodes for b in ep.buffers])),
            episodes_finished=total, lcf_grad_mu=grad_mu,
            epoch_kl=upd["epoch_kl"], epoch_clip_frac=upd["epoch_clip_frac"])
        self.iteration += 1
        return stats

    def train(self, iterations: int | None = None,
              callback: Callable[[IterationStats], None] | None = None) -> list[IterationStats]:
        """Run ``iterations`` iterations, or until ``max_env_steps`` simulator steps are used."""
        out = []
        while (self.env_steps < self.cfg.max_env_steps if iterations is None else len(out) < iterations):
            s = self.train_iteration()
            out.append(s)
            if callback:
                callback(s)
        return out

    def nets(self) -> dict[str, netcore.ParamSet]:
        return {"policy": self.policy, **{f"value_{s}": p for s, p in self.values.items()}}

    def save(self, path) -> None:
        extra = {"lcf_mu": self.lcf.mu, "lcf_sigma": self.lcf.sigma, "iteration": self.iteration,
                 "env_steps": self.env_steps, "samples": self.samples, "config": config_to_dict(self.cfg), "scene": self.scene.name,
                 "obs_dim": self.sim.obs_dim}
        netcore.save_checkpoint(path, self.nets(), self.opt, extra)


def config_to_dict(cfg: TrainerConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d


def trainer_config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainerConfig)}


def ipo_update(trainer: Trainer, batch: SampleBatch) -> dict:
    if trainer.cfg.algorithm not in ("ipo", "curriculum"):
        raise ValueError("ipo_update requires algorithm 'ipo' or 'curriculum'")
    return trainer.update(batch)


def train_iteration(trainer: Trainer) -> IterationStats:
    return trainer.train_iteration()
