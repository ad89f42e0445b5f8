import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copo import netcore
from copo.env import CRASH, OUT_OF_ROAD, SUCCESS, TRUNCATED, EnvConfig, Simulator, builtin_scene
from copo.eval import (EpisodeMetrics, IdmPolicyConfig, evaluate, find_leader, idm_accel, idm_action, learned_mask,
                       load_trajectories, mixed_population_eval, run_episode, sweep_initial_agents,
                       trajectory_density, write_metrics_csv, write_pgm)

SHORT = EnvConfig(horizon=50)


def straight_idm(v, v_lead, gap, a=2.0, b=4.0, v0=8.0, T=1.5, s0=2.0, delta=4.0):
    """IDM written out term by term."""
    if v_lead is None:
        return a * (1 - (v / v0) ** delta)
    s_star = s0 + v * T + v * (v - v_lead) / (2 * math.sqrt(a * b))
    return a * (1 - (v / v0) ** delta - (max(s_star, 0.0) / gap) ** 2)


@pytest.fixture(scope="module")
def policy():
    sim = Simulator(builtin_scene("mini_intersection"))
    return netcore.init_policy(sim.obs_dim, 2, (16,), np.random.default_rng(0))


class TestMetrics:
    def test_efficiency_example(self):
        m = EpisodeMetrics.from_reasons([SUCCESS] * 10 + [CRASH, OUT_OF_ROAD], 1000)
        assert m.efficiency == 0.008
        assert m.n_failure == 2 and m.safety == 1

    def test_all_succeed(self):
        m = EpisodeMetrics.from_reasons([SUCCESS] * 7, 100)
        assert m.success_rate == 1.0 and m.safety == 0

    def test_success_rate_counts_truncated(self):
        m = EpisodeMetrics.from_reasons([SUCCESS, SUCCESS, CRASH, TRUNCATED], 50)
        assert m.success_rate == 0.5
        assert m.n_total == 4

    def test_sum(self):
        a = EpisodeMetrics.from_reasons([SUCCESS, CRASH], 10)
        b = EpisodeMetrics.from_reasons([SUCCESS, OUT_OF_ROAD], 20)
        c = a + b
        assert (c.n_success, c.n_crash, c.n_out_of_road, c.steps, c.episodes) == (2, 1, 1, 30, 2)
        assert c.efficiency == 0.0

    def test_unknown_reason(self):
        with pytest.raises(ValueError):
            EpisodeMetrics.from_reasons(["teleported"], 10)


class TestIdm:
    def test_free_road_equilibrium(self):
        assert idm_accel(8.0, None, None, IdmPolicyConfig()) == pytest.approx(0.0)

    def test_stopped_leader_at_min_gap(self):
        sim = Simulator(builtin_scene("corridor"))
        sim.reset(0)
        ego = sim.agents[0]
        ego.speed = 5.0
        a = idm_accel(5.0, 0.0, 2.0, IdmPolicyConfig())
        assert a < -IdmPolicyConfig().comfort_decel
        act = idm_action(ego, ego, IdmPolicyConfig(), gap=2.0)
        assert act.accel_cmd == -1.0

    @given(st.floats(0, 15), st.floats(0, 15), st.floats(0.1, 60))
    @settings(max_examples=200, deadline=None)
    def test_matches_formula(self, v, v_lead, gap):
        cfg = IdmPolicyConfig()
        got = idm_accel(v, v_lead, gap, cfg)
        assert got == pytest.approx(straight_idm(v, v_lead, gap), rel=1e-12, abs=1e-12)

    @given(st.floats(0.5, 15), st.floats(0, 15), st.floats(0.5, 60))
    @settings(max_examples=100, deadline=None)
    def test_scale_consistent(self, v, v_lead, gap):
        base = IdmPolicyConfig()
        doubled = IdmPolicyConfig(min_gap=2 * base.min_gap, time_headway=2 * base.time_headway,
                                  comfort_decel=base.comfort_decel / 4)
        assert idm_accel(v, v_lead, 2 * gap, doubled) == pytest.approx(idm_accel(v, v_lead, gap, base), rel=1e-9)

    def test_leader_on_route(self):
        sim = Simulator(builtin_scene("corridor"))
        sim.reset(0)
        rear, front = sorted(sim.agents.values(), key=lambda v: v.position[0])
        leader, gap = find_leader(rear, sim.agents.values(), IdmPolicyConfig())
        assert leader is front
        assert gap == pytest.approx(front.position[0] - rear.position[0] - 4.5)
        assert find_leader(front, sim.agents.values(), IdmPolicyConfig()) == (None, None)

    def test_idm_drives_corridor(self):
        sim = Simulator(builtin_scene("corridor"), EnvConfig(horizon=400))
        sim.reset(0)
        reasons = []
        while not sim.episode_done and len(reasons) < 2:
            acts = {}
            for i, v in sim.agents.items():
                leader, gap = find_leader(v, sim.agents.values(), IdmPolicyConfig())
                acts[i] = idm_action(v, leader, gap=gap)
            reasons += list(sim.step(acts).reasons.values())
        assert reasons[:2] == [SUCCESS, SUCCESS]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            IdmPolicyConfig(time_headway=0.0)


class TestEvaluate:
    def test_same_seed_same_metrics(self, policy):
        scene = builtin_scene("mini_intersection")
        a = evaluate(policy, scene, 2, seed=3, env_cfg=SHORT)
        b = evaluate(policy, scene, 2, seed=3, env_cfg=SHORT)
        assert a == b and a.episodes == 2 and a.steps == 100

    def test_fraction_zero_equals_evaluate(self, policy):
        scene = builtin_scene("mini_intersection")
        assert mixed_population_eval(policy, scene, 0.0, 1, 2, env_cfg=SHORT) == evaluate(policy, scene, 2, 1,
                                                                                         env_cfg=SHORT)

    @pytest.mark.parametrize("f", [1.0, -0.1, 1.5])
    def test_bad_fraction_rejected(self, policy, f):
        with pytest.raises(ValueError, match="idm_fraction"):
            mixed_population_eval(policy, builtin_scene("mini_intersection"), f)

    @pytest.mark.parametrize("f", [0.0, 0.25, 0.5, 0.75])
    def test_learned_count_rounding(self, f):
        mask = learned_mask(200, f)
        for n in range(1, 201):
            assert mask[:n].sum() == math.floor((1 - f) * n + 0.5)

    def test_mixed_counts_only_learned(self, policy):
        scene = builtin_scene("mini_intersection")
        full = evaluate(policy, scene, 1, 0, env_cfg=SHORT)
        half = mixed_population_eval(policy, scene, 0.5, 0, 1, env_cfg=SHORT)
        assert 0 < half.n_total < full.n_total + 10

    def test_workers_match_serial(self, policy):
        scene = builtin_scene("mini_intersection")
        assert evaluate(policy, scene, 3, 0, env_cfg=SHORT, workers=2) == evaluate(policy, scene, 3, 0, env_cfg=SHORT)

    def test_dimension_mismatch(self):
        wrong = netcore.init_policy(7, 2, (4,), np.random.default_rng(0))
        with pytest.raises(netcore.ShapeError):
            evaluate(wrong, builtin_scene("mini_intersection"), 1, env_cfg=SHORT)

    def test_checkpoint_not_mutated(self, policy, tmp_path):
        path = tmp_path / "c.npz"
        netcore.save_checkpoint(path, {"policy": policy})
        before = path.read_bytes()
        evaluate(path, builtin_scene("mini_intersection"), 1, env_cfg=SHORT)
        assert path.read_bytes() == before

    def test_sweep_rows(self, policy):
        rows = sweep_initial_agents(policy, builtin_scene("mini_intersection"), [1, 2], env_cfg=SHORT)
        assert [c for c, _ in rows] == [1, 2]


class TestDensity:
    def test_empty(self):
        dm = trajectory_density([])
        assert dm.total.sum() == 0 and dm.crashes == []

    def test_straight_line(self):
        ep = [{"x": 0.1 + 0.5 * k, "y": 2.2, "spawn_point": 0, "done_reason": ""} for k in range(20)]
        dm = trajectory_density([ep], bounds=(0.0, 0.0, 12.0, 5.0))
        rows = np.flatnonzero(dm.total.sum(axis=1))
        assert rows.tolist() == [4]
        assert dm.total.sum() == 20

    def test_mass_conservation_and_groups(self, policy):
        scene = builtin_scene("mini_intersection")
        _, traj = run_episode(policy, scene, 0, SHORT, record=True)
        dm = trajectory_density([traj])
        assert dm.total.sum() == len(traj)
        assert set(dm.groups) == {r["spawn_point"] for r in traj}
        assert len(dm.crashes) == sum(r["done_reason"] == CRASH for r in traj)

    def test_pgm_header(self, tmp_path):
        write_pgm(tmp_path / "d.pgm", np.array([[0.0, 3.0], [1.0, 0.0]]))
        data = (tmp_path / "d.pgm").read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n") and len(data) == len(b"P5\n2 2\n255\n") + 4

    def test_missing_trajectory_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.jsonl"):
            load_trajectories([tmp_path / "nope.jsonl"])

    def test_metrics_csv(self, tmp_path):
        write_metrics_csv(tmp_path / "m.csv", [EpisodeMetrics.from_reasons([SUCCESS], 10).row()])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0].startswith("episodes,steps") and len(lines) == 2
