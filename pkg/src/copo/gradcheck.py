"""Finite-difference and brute-force oracles for the analytic pieces of the stack.

Each fixture returns a :class:`FixtureResult` with the worst relative error
against its tolerance; the CLI ``gradcheck`` command prints them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from copo import netcore
from copo.env import geometry as geo
from copo.rollout import gae
from copo.trainer import (LcfDistribution, clipped_surrogate, coordinated_advantage, lcf_objective,
                          ppo_policy_loss, value_loss)


@dataclass
class FixtureResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<14s} max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e}) {status}"


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[k] += h
        xm.flat[k] -= h
        g.flat[k] = (f(xp) - f(xm)) / (2 * h)
    return g


# -- fixtures ---------------------------------------------------------------------

def check_mlp(seed: int = 0) -> FixtureResult:
    rng = np.random.default_rng(seed)
    p = netcore.init_mlp(6, (16, 16), 3, rng)
    x = rng.standard_normal((8, 6))
    w = rng.standard_normal((8, 3))
    out, acts = netcore.mlp_forward(p, x)
    analytic = netcore.mlp_backward(p, acts, w)
    fd = central_diff(lambda f: float(np.sum(w * netcore.mlp_forward(p.unflatten(f), x)[0])), p.flatten())
    return FixtureResult("mlp", rel_err(analytic, fd, 1e-6), 1e-5)


def _policy_fixture(seed: int, obs_dim: int = 5, act_dim: int = 2, n: int = 32):
    rng = np.random.default_rng(seed)
    old = netcore.init_policy(obs_dim, act_dim, (16, 16), rng)
    old.flat[:-act_dim] += 0.05 * rng.standard_normal(old.flat.size - act_dim)
    new = old.copy()
    new.flat += 0.02 * rng.standard_normal(new.flat.size)
    obs = rng.standard_normal((n, obs_dim))
    out = netcore.forward_policy(old, obs)
    act, logp, raw = netcore.sample_action(out, rng)
    return rng, old, new, obs, raw, logp, out


def check_ppo_loss(seed: int = 0) -> FixtureResult:
    """Policy loss (surrogate + KL) and value loss gradients against central differences."""
    rng, old, new, obs, raw, logp, out = _policy_fixture(seed)
    adv = rng.standard_normal(len(obs))
    errs = []
    for clip_eps in (0.2, 0.01):

        def loss(f):
            return ppo_policy_loss(new.unflatten(f), obs, raw, logp, out.mean, out.log_std, adv, clip_eps, 1.0,
                                   0.01).loss

        res = ppo_policy_loss(new, obs, raw, logp, out.mean, out.log_std, adv, clip_eps, 1.0, 0.01)
        errs.append(rel_err(res.grad, central_diff(loss, new.flatten()), 1e-6))
    vnet = netcore.init_value(5, (16, 16), rng)
    tgt = rng.standard_normal(len(obs)) * 3
    _, g = value_loss(vnet, obs, tgt, 2.0)
    fd = central_diff(lambda f: value_loss(vnet.unflatten(f), obs, tgt, 2.0)[0], vnet.flatten())
    errs.append(rel_err(g, fd, 1e-6))
    return FixtureResult("ppo_loss", max(errs), 1e-5)


def clip_branch_zero_gradient(seed: int = 0) -> bool:
    """Samples whose clipped term is the strict minimum get exactly zero gradient."""
    rng = np.random.default_rng(seed)
    logp_old = rng.standard_normal(64)
    logp_new = logp_old + rng.uniform(-1.0, 1.0, 64)
    adv = rng.standard_normal(64)
    _, d, ratio, clipped = clipped_surrogate(logp_new, logp_old, adv, 0.2)
    expect = (ratio * adv > np.clip(ratio, 0.8, 1.2) * adv)
    return bool(np.array_equal(clipped, expect) and np.all(d[clipped] == 0.0) and np.any(clipped))


@dataclass
class BanditFixture:
    """Two agents acting once from a linear Gaussian policy; each is rewarded by the other's action.

    r_i = a_j[1]: agent i's own action only matters to its neighbor, so the
    global return improves only if agents weight their neighbor's reward.
    """

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    adv_i: np.ndarray
    adv_n: np.ndarray
    adv_g: np.ndarray
    eps: np.ndarray
    theta_old: netcore.ParamSet


def bandit_fixture(seed: int = 0, pairs: int = 128) -> BanditFixture:
    rng = np.random.default_rng(seed)
    theta = netcore.init_mlp(2, (), 2, rng, action_dim=2, out_scale=0.5, log_std_init=-0.3)
    obs = rng.standard_normal((2 * pairs, 2))
    out = netcore.forward_policy(theta, obs)
    _, logp, raw = netcore.sample_action(out, rng)
    own = raw[:, 1].reshape(pairs, 2)
    r = own[:, ::-1].ravel()          # each agent receives the other agent's component 1
    r_n = own.ravel()                 # its single neighbor's reward is its own component 1
    r_g = np.repeat(own.mean(axis=1), 2)
    eps = rng.standard_normal(2 * pairs)
    return BanditFixture(obs, raw, logp, r, r_n, r_g, eps, theta)


def bandit_meta_objective(fx: BanditFixture, lcf: LcfDistribution, alpha: float, clip_eps: float = 0.2) -> float:
    """Global surrogate after one vanilla policy-gradient step on the coordinated objective."""
    phi, _ = lcf.sample_phi(fx.eps)
    adv_c = coordinated_advantage(fx.adv_i, fx.adv_n, phi)
    _, g = netcore.log_prob_and_grad(fx.theta_old, fx.obs, fx.actions, adv_c / len(adv_c))
    theta_new = fx.theta_old.unflatten(fx.theta_old.flat + alpha * g)
    out = netcore.forward_policy(theta_new, fx.obs)
    logp = netcore.gaussian_log_prob(out.mean, out.log_std, fx.actions)
    return clipped_surrogate(logp, fx.logp, fx.adv_g, clip_eps)[0]


def bandit_analytic(fx: BanditFixture, lcf: LcfDistribution, alpha: float, clip_eps: float = 0.2):
    phi, _ = lcf.sample_phi(fx.eps)
    adv_c = coordinated_advantage(fx.adv_i, fx.adv_n, phi)
    _, g = netcore.log_prob_and_grad(fx.theta_old, fx.obs, fx.actions, adv_c / len(adv_c))
    theta_new = fx.theta_old.unflatten(fx.theta_old.flat + alpha * g)
    return lcf_objective(fx.obs, fx.actions, fx.logp, fx.adv_i, fx.adv_n, fx.adv_g, fx.eps, fx.theta_old,
                         theta_new, lcf, clip_eps)


def bandit_finite_difference(fx: BanditFixture, lcf: LcfDistribution, alpha: float, h: float = 1e-4) -> tuple[float, float]:
    """Central differences of the bilevel objective in (mu, sigma), divided by the inner step size."""
    def at(mu, sigma):
        return bandit_meta_objective(fx, LcfDistribution(mu, sigma), alpha)
    d_mu = (at(lcf.mu + h, lcf.sigma) - at(lcf.mu - h, lcf.sigma)) / (2 * h)
    d_sigma = (at(lcf.mu, lcf.sigma + h) - at(lcf.mu, lcf.sigma - h)) / (2 * h)
    return d_mu / alpha, d_sigma / alpha


def check_lcf_bandit(seed: int = 0) -> FixtureResult:
    fx = bandit_fixture(seed)
    errs = []
    for mu, sigma in ((0.0, 0.1), (0.4, 0.3), (-0.7, 0.2)):
        lcf = LcfDistribution(mu, sigma)
        g = bandit_analytic(fx, lcf, 1e-2)
        fd = bandit_finite_difference(fx, lcf, 1e-2)
        errs.append(rel_err([g.d_mu, g.d_sigma], fd, 1e-8))
    return FixtureResult("lcf_bandit", max(errs), 1e-3)


def gae_direct(rewards, values, bootstrap, gamma, lam) -> np.ndarray:
    """O(T^2) sum of discounted TD residuals."""
    v_next = np.append(values[1:], bootstrap)
    delta = rewards + gamma * v_next - values
    n = len(rewards)
    return np.array([sum((gamma * lam) ** (l - t) * delta[l] for l in range(t, n)) for t in range(n)])


# (gamma, lambda) of the individual, neighborhood and global streams
GAE_SETTINGS = ((0.99, 0.95), (0.99, 0.95), (1.0, 0.95))


def check_gae(seed: int = 0, episodes: int = 100) -> FixtureResult:
    rng = np.random.default_rng(seed)
    errs = []
    for gamma, lam in GAE_SETTINGS:
        for _ in range(episodes):
            n = int(rng.integers(5, 51))
            r, v = rng.standard_normal(n), rng.standard_normal(n)
            boot = float(rng.standard_normal()) if rng.random() < 0.5 else 0.0
            adv, _ = gae(r, v, boot, gamma, lam)
            ref = gae_direct(r, v, boot, gamma, lam)
            errs.append(float(np.max(np.abs(adv - ref)) / np.max(np.abs(ref))))
    return FixtureResult("gae", max(errs), 1e-12)


def brute_force_neighbor_mean(pos: np.ndarray, rewards: np.ndarray, radius: float) -> np.ndarray:
    out = np.zeros(len(pos))
    for i in range(len(pos)):
        vals = [rewards[j] for j in range(len(pos)) if j != i
                and (pos[i, 0] - pos[j, 0]) ** 2 + (pos[i, 1] - pos[j, 1]) ** 2 <= radius * radius]
        out[i] = np.mean(vals) if vals else 0.0
    return out


def indexed_neighbor_mean(pos: np.ndarray, rewards: np.ndarray, radius: float) -> np.ndarray:
    neigh = geo.radius_neighbors(pos, radius)
    return np.array([float(np.mean(rewards[n])) if len(n) else 0.0 for n in neigh])


def check_neighborhood(seed: int = 0, layouts: int = 1000) -> FixtureResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(layouts):
        k = int(rng.integers(1, 61))
        pos = rng.uniform(-40, 40, (k, 2))
        rew = rng.standard_normal(k)
        a = indexed_neighbor_mean(pos, rew, 10.0)
        b = brute_force_neighbor_mean(pos, rew, 10.0)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return FixtureResult("neighborhood", worst, 1e-12)


FIXTURES: dict[str, Callable[[], FixtureResult]] = {
    "mlp": check_mlp,
    "ppo_loss": check_ppo_loss,
    "lcf_bandit": check_lcf_bandit,
    "gae": check_gae,
    "neighborhood": check_neighborhood,
}


def run(name: str) -> list[FixtureResult]:
    if name == "all":
        return [f() for f in FIXTURES.values()]
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)} or 'all'")
    return [FIXTURES[name]()]
