"""Acceptance criteria 1-10, one verdict line each (also repeated in the pytest terminal summary).

Criteria 8 and 9 train real policies on one core and take several minutes each.
"""

import time

import numpy as np
import pytest
from synthetic import per_agent_global_return_sum, random_episode

from copo.env import CRASH, OUT_OF_ROAD, SUCCESS, TRUNCATED, EnvConfig, Simulator, builtin_scene
from copo.eval import EpisodeMetrics, evaluate
from copo.gradcheck import (bandit_analytic, bandit_finite_difference, bandit_fixture, check_gae, check_lcf_bandit,
                            check_mlp, check_neighborhood, check_ppo_loss, clip_branch_zero_gradient)
from copo.rollout import global_rewards
from copo.trainer import LcfDistribution, Trainer, TrainerConfig

# desk-scale smoke settings shared by criteria 8 and 9
SMOKE = dict(hidden=(64, 64), horizon=200, batch=1024, minibatch=256)
SMOKE_STEPS = 100_000
EVAL_EPISODES, EVAL_SEED = 5, 1000
LCF_TREND_STEPS = 20_000
LCF_TREND_SEEDS = (0, 1, 2, 3, 4)


def random_policy_metrics(scene, n_episodes, seed, horizon) -> EpisodeMetrics:
    """Uniform random commands in [-1, 1]^2 for every agent."""
    total = EpisodeMetrics()
    for k in range(n_episodes):
        sim = Simulator(scene, EnvConfig(horizon=horizon))
        sim.reset(seed + k)
        rng = np.random.default_rng(seed + k)
        reasons = []
        while not sim.episode_done:
            out = sim.step({i: rng.uniform(-1.0, 1.0, 2) for i in sorted(sim.agents)})
            reasons += [r for _, r in sorted(out.reasons.items())]
        total = total + EpisodeMetrics.from_reasons(reasons, sim.step_count)
    return total


def train_and_evaluate(algorithm: str, seed: int = 0):
    scene = builtin_scene("mini_intersection")
    tr = Trainer(scene, TrainerConfig(algorithm=algorithm, max_env_steps=SMOKE_STEPS, **SMOKE), seed=seed)
    t0 = time.perf_counter()
    tr.train()
    minutes = (time.perf_counter() - t0) / 60
    m = evaluate(tr.policy, scene, EVAL_EPISODES, EVAL_SEED, env_cfg=EnvConfig(horizon=SMOKE["horizon"]))
    return m, tr.env_steps, minutes


@pytest.fixture(scope="module")
def smoke_runs():
    scene = builtin_scene("mini_intersection")
    baseline = random_policy_metrics(scene, EVAL_EPISODES, EVAL_SEED, SMOKE["horizon"])
    return baseline, train_and_evaluate("ipo"), train_and_evaluate("copo")


class TestAcceptance:
    def test_01_factorization_identity(self, report):
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            ep = global_rewards(random_episode(rng))
            by_time = ep.total_reward_by_time()
            worst = max(worst, abs(per_agent_global_return_sum(ep) - by_time) / max(abs(by_time), 1e-300))
        dt = time.perf_counter() - t0
        ok = worst < 1e-12 and dt < 1.0
        report(1, ok, f"factorization identity max rel err {worst:.2e} (< 1e-12) in {dt:.2f} s (< 1 s)")
        assert ok

    def test_02_reduction_to_ipo(self, report):
        scene = builtin_scene("corridor")
        base = dict(hidden=(32, 32), batch=256, minibatch=64, horizon=100)
        copo = Trainer(scene, TrainerConfig(algorithm="copo", lcf_init_mean=0.0, lcf_init_std=0.0, lcf_update=False,
                                            **base), seed=11)
        ipo = Trainer(scene, TrainerConfig(algorithm="ipo", **base), seed=11)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(3):
            copo.train_iteration()
            ipo.train_iteration()
            worst = max(worst, float(np.max(np.abs(copo.policy.flat - ipo.policy.flat))))
        dt = time.perf_counter() - t0
        ok = worst < 1e-9 and dt < 60
        report(2, ok, f"CoPO(phi=0, no LCF) vs IPO max |d theta| {worst:.2e} (< 1e-9) over 3 iterations, {dt:.1f} s")
        assert ok

    def test_03_neighborhood_oracle(self, report):
        t0 = time.perf_counter()
        res = check_neighborhood(seed=7, layouts=1000)
        dt = time.perf_counter() - t0
        ok = res.max_rel_err <= 1e-12 and dt < 5
        report(3, ok, f"spatial-index r^N vs brute force max err {res.max_rel_err:.2e} on 1000 layouts, {dt:.2f} s")
        assert ok

    def test_04_gradient_suite(self, report):
        t0 = time.perf_counter()
        results = [check_mlp(), check_ppo_loss()]
        clip_ok = clip_branch_zero_gradient()
        dt = time.perf_counter() - t0
        worst = max(r.max_rel_err for r in results)
        ok = worst < 1e-5 and clip_ok and dt < 30
        report(4, ok, f"loss gradients vs FD max rel err {worst:.2e} (< 1e-5), clip-zero exact {clip_ok}, {dt:.1f} s")
        assert ok

    def test_05_lcf_meta_gradient(self, report):
        t0 = time.perf_counter()
        res = check_lcf_bandit()
        fx = bandit_fixture(0)
        lcf = LcfDistribution(0.0, 0.1)
        fd_mu, _ = bandit_finite_difference(fx, lcf, 1e-2)
        analytic = bandit_analytic(fx, lcf, 1e-2).d_mu
        dt = time.perf_counter() - t0
        ok = res.passed and fd_mu > 0 and analytic > 0 and dt < 60
        report(5, ok, f"LCF gradient vs bilevel FD rel err {res.max_rel_err:.2e} (< 1e-3); d/dmu at mu=0: "
                      f"oracle {fd_mu:+.4f}, analytic {analytic:+.4f} (> 0), {dt:.1f} s")
        assert ok

    def test_06_gae_oracle(self, report):
        res = check_gae(seed=3, episodes=100)
        report(6, res.passed, f"GAE recursion vs O(T^2) sum, 3 stream settings x 100 episodes, "
                              f"rel err {res.max_rel_err:.2e} (< 1e-12)")
        assert res.passed

    def test_07_simulator_determinism_and_dead_vehicles(self, report):
        scene = builtin_scene("intersection4")

        def run():
            sim = Simulator(scene, EnvConfig(horizon=1000), record=True)
            sim.reset(21)
            rng = np.random.default_rng(5)
            rewards = []
            dead_seen: dict[int, list[int]] = {}
            while not sim.episode_done:
                out = sim.step({i: rng.uniform(-1, 1, 2) for i in sorted(sim.agents)})
                rewards.append(sorted(out.rewards.items()))
                for i in sim.dead:
                    dead_seen.setdefault(i, []).append(out.step)
            return sim, sim.trajectory, rewards, dead_seen

        sim_a, traj_a, rew_a, dead_a = run()
        _, traj_b, rew_b, _ = run()
        identical = traj_a == traj_b and rew_a == rew_b and len(rew_a) == 1000
        # a vehicle terminating at step t is an obstacle during steps t+1 .. t+10
        ends = {i: v.end_step for i, v in sim_a.history.items() if v.done_reason in (CRASH, OUT_OF_ROAD, SUCCESS)}
        persist_ok = all(dead_a.get(i, []) == list(range(t, min(t + 10, 1000))) for i, t in ends.items())

        lane = builtin_scene("corridor")
        sim = Simulator(lane, EnvConfig(respawn_clearance=0.0))
        sim.reset(0)
        rear, front = sorted(sim.agents, key=lambda i: sim.agents[i].position[0])
        sim.agents[front].position = np.array([60.0, 30.0])
        sim.step({i: np.array([0.0, -1.0]) for i in sim.agents})
        sim.dead[front].position = sim.agents[rear].position + np.array([5.0, 0.0])
        sim.dead[front].heading = 0.0
        sim.agents[rear].speed = 5.0
        crash = False
        for _ in range(5):
            out = sim.step({i: np.zeros(2) for i in sim.agents})
            if out.reasons.get(rear) == CRASH:
                crash = True
                break
        ok = identical and persist_ok and len(ends) > 0 and crash
        report(7, ok, f"1000-step replay bit-identical {identical}; {len(ends)} dead vehicles persisted exactly 10 "
                      f"steps {persist_ok}; collision with dead vehicle {crash}")
        assert ok

    @pytest.mark.slow
    def test_08_smoke_training(self, report, smoke_runs):
        baseline, (ipo, ipo_steps, ipo_min), (copo, copo_steps, copo_min) = smoke_runs
        checks = {
            "random <= 0.05": baseline.success_rate <= 0.05,
            "IPO >= 0.4": ipo.success_rate >= 0.4,
            "CoPO >= IPO - 0.05": copo.success_rate >= ipo.success_rate - 0.05,
            "CoPO crashes <= IPO": copo.safety <= ipo.safety,
            "budget": max(ipo_steps, copo_steps) <= SMOKE_STEPS + SMOKE["horizon"] * 8 and ipo_min + copo_min <= 20,
        }
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        report(8, ok, f"random {baseline.success_rate:.3f}; IPO {ipo.success_rate:.3f} ({ipo.safety} crashes, "
                      f"{ipo_steps} steps, {ipo_min:.1f} min); CoPO {copo.success_rate:.3f} ({copo.safety} crashes, "
                      f"{copo_steps} steps, {copo_min:.1f} min)" + (f"; failed: {failed}" if failed else ""))
        assert ok

    @pytest.mark.slow
    def test_09_lcf_trend(self, report):
        scene = builtin_scene("merge")
        finals = []
        for seed in LCF_TREND_SEEDS:
            tr = Trainer(scene, TrainerConfig(algorithm="copo", max_env_steps=LCF_TREND_STEPS, **SMOKE), seed=seed)
            tr.train()
            finals.append(tr.lcf.mu)
        rising = sum(mu > 0.0 for mu in finals)
        ok = rising >= 4
        report(9, ok, f"phi_mu after {LCF_TREND_STEPS} steps on merge: {', '.join(f'{m:+.4f}' for m in finals)}; "
                      f"{rising}/5 above 0 (>= 4)")
        assert ok

    def test_10_metric_formulas(self, report):
        tallies = [([SUCCESS] * 10 + [CRASH, OUT_OF_ROAD], 1000, 10 / 12, 0.008),
                   ([SUCCESS] * 3 + [TRUNCATED], 200, 0.75, 0.015),
                   ([CRASH] * 4, 50, 0.0, -0.08),
                   ([], 10, 0.0, 0.0)]
        ok = True
        for reasons, steps, rate, eff in tallies:
            m = EpisodeMetrics.from_reasons(reasons, steps)
            expect_eff = (reasons.count(SUCCESS) - reasons.count(CRASH) - reasons.count(OUT_OF_ROAD)) / steps
            ok &= m.success_rate == rate and m.efficiency == eff == expect_eff
            ok &= m.safety == reasons.count(CRASH)
        report(10, ok, "efficiency = (N_success - N_failure)/T and success rate exact on 4 hand-built tallies")
        assert ok
