import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from synthetic import episode_from_lifetimes, per_agent_global_return_sum, random_episode

from copo import netcore
from copo.env import EnvConfig, Simulator, builtin_scene
from copo.gradcheck import brute_force_neighbor_mean, gae_direct
from copo.rollout import (Collector, LcfSampler, build_batch, compute_gae, dump_batch, gae, global_rewards,
                          neighborhood_rewards)


def three_agent_episode(rewards=(1.0, 2.0, 3.0), xs=(0.0, 5.0, 20.0)):
    return episode_from_lifetimes({0: (1, 1), 1: (1, 1), 2: (1, 1)}, lambda i, t: rewards[i],
                                  lambda i, t: (xs[i], 0.0), 1)


def fill_values(episode, rng):
    for b in episode.buffers:
        for s in "ING":
            b.values[s] = rng.standard_normal(len(b))
            b.bootstrap_values[s] = float(rng.standard_normal())


def small_collector(seed=0, target=4, horizon=60):
    sim = Simulator(builtin_scene("mini_intersection", target=target), EnvConfig(horizon=horizon))
    policy = netcore.init_policy(sim.obs_dim, 2, (16,), np.random.default_rng(seed))
    return Collector(sim, seed), policy


class TestRewardStreams:
    def test_neighborhood_worked_example(self):
        ep = neighborhood_rewards(three_agent_episode(), 10.0)
        np.testing.assert_array_equal([b.r_neighborhood[0] for b in ep.buffers], [2.0, 1.0, 0.0])

    def test_lone_agent_zero(self):
        ep = neighborhood_rewards(episode_from_lifetimes({0: (1, 3)}, lambda i, t: 5.0, lambda i, t: (0, 0), 3))
        np.testing.assert_array_equal(ep.buffers[0].r_neighborhood, 0.0)

    def test_infinite_radius_is_mean_of_others(self):
        ep = neighborhood_rewards(three_agent_episode(xs=(0.0, 500.0, -900.0)), math.inf)
        np.testing.assert_allclose([b.r_neighborhood[0] for b in ep.buffers], [2.5, 2.0, 1.5])

    def test_neighborhood_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            ep = neighborhood_rewards(random_episode(rng), 10.0)
            index = {b.agent_id: b for b in ep.buffers}
            for f in ep.frames:
                ref = brute_force_neighbor_mean(f.pos_after, f.rewards, 10.0)
                got = [index[int(i)].r_neighborhood[f.t - index[int(i)].steps[0]] for i in f.ids]
                np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_global_mean(self):
        ep = global_rewards(three_agent_episode())
        np.testing.assert_array_equal([b.r_global[0] for b in ep.buffers], [2.0, 2.0, 2.0])

    def test_single_agent_global_is_own(self):
        ep = global_rewards(episode_from_lifetimes({0: (1, 2)}, lambda i, t: 3.0 * t, lambda i, t: (0, 0), 2))
        np.testing.assert_array_equal(ep.buffers[0].r_global, [3.0, 6.0])

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_factorization_identity(self, seed):
        ep = global_rewards(random_episode(np.random.default_rng(seed)))
        by_time = ep.total_reward_by_time()
        assert ep.total_reward_by_agent() == pytest.approx(by_time, rel=1e-12, abs=1e-12)
        assert per_agent_global_return_sum(ep) == pytest.approx(by_time, rel=1e-12, abs=1e-12)


class TestGae:
    def test_lambda_zero_is_td_error(self):
        rng = np.random.default_rng(0)
        r, v = rng.standard_normal(10), rng.standard_normal(10)
        adv, tgt = gae(r, v, 0.7, 0.99, 0.0)
        delta = r + 0.99 * np.append(v[1:], 0.7) - v
        np.testing.assert_array_equal(adv, delta)
        np.testing.assert_array_equal(tgt, adv + v)

    def test_telescoping(self):
        rng = np.random.default_rng(1)
        r, v = rng.standard_normal(12), rng.standard_normal(12)
        adv, _ = gae(r, v, 0.0, 1.0, 1.0)
        np.testing.assert_allclose(adv, np.cumsum(r[::-1])[::-1] - v, atol=1e-12)

    @pytest.mark.parametrize("gamma", [0.99, 1.0])
    def test_matches_direct_sum(self, gamma):
        rng = np.random.default_rng(2)
        r, v = rng.standard_normal(5), rng.standard_normal(5)
        adv, _ = gae(r, v, 0.3, gamma, 0.95)
        np.testing.assert_allclose(adv, gae_direct(r, v, 0.3, gamma, 0.95), rtol=1e-12, atol=1e-14)

    def test_bootstrap_only_when_truncated(self):
        rng = np.random.default_rng(3)
        ep = global_rewards(neighborhood_rewards(random_episode(rng, horizon=20)))
        fill_values(ep, rng)
        for b in ep.buffers:
            compute_gae(b, "I", 0.99, 0.95)
            boot = b.bootstrap_values["I"] if b.truncated else 0.0
            ref, _ = gae(b.r_individual, b.values["I"], boot, 0.99, 0.95)
            np.testing.assert_array_equal(b.advantages["I"], ref)

    def test_missing_values_rejected(self):
        ep = three_agent_episode()
        with pytest.raises(ValueError, match="value predictions"):
            compute_gae(ep.buffers[0], "I", 0.99, 0.95)

    def test_stream_independence(self):
        rng = np.random.default_rng(5)
        ep = global_rewards(neighborhood_rewards(random_episode(rng, horizon=30)))
        fill_values(ep, rng)
        before = {}
        for b in ep.buffers:
            for s, g in (("I", 0.99), ("N", 0.99), ("G", 1.0)):
                compute_gae(b, s, g, 0.95)
            before[b.agent_id] = (b.advantages["I"].copy(), b.advantages["G"].copy())
        for b in ep.buffers:
            b.r_neighborhood = b.r_neighborhood + rng.standard_normal(len(b))
            for s, g in (("I", 0.99), ("N", 0.99), ("G", 1.0)):
                compute_gae(b, s, g, 0.95)
            np.testing.assert_array_equal(b.advantages["I"], before[b.agent_id][0])
            np.testing.assert_array_equal(b.advantages["G"], before[b.agent_id][1])

    def test_per_agent_isolation(self):
        rng = np.random.default_rng(6)
        ep = global_rewards(random_episode(rng, horizon=25))
        fill_values(ep, rng)
        for b in ep.buffers:
            compute_gae(b, "I", 0.99, 0.95)
        first = {b.agent_id: b.advantages["I"].copy() for b in ep.buffers}
        ep.buffers.reverse()
        for b in ep.buffers:
            compute_gae(b, "I", 0.99, 0.95)
            np.testing.assert_array_equal(b.advantages["I"], first[b.agent_id])


class TestBatch:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        eps = [global_rewards(neighborhood_rewards(random_episode(rng, horizon=40))) for _ in range(5)]
        for ep in eps:
            fill_values(ep, rng)
            for b in ep.buffers:
                for s in "ING":
                    compute_gae(b, s, 0.99, 0.95)
        return eps

    def test_normalized_columns(self):
        batch = build_batch(self.make())
        for s in "ING":
            assert abs(batch[f"adv_{s}"].mean()) < 1e-10
            assert abs(batch[f"adv_{s}"].std() - 1.0) < 1e-10

    def test_unnormalized_keeps_raw(self):
        batch = build_batch(self.make(), normalize=False)
        np.testing.assert_array_equal(batch["adv_I"], batch["adv_raw_I"])

    def test_shuffle_deterministic(self):
        batch = build_batch(self.make())
        np.testing.assert_array_equal(batch.permutation(3), batch.permutation(3))
        assert not np.array_equal(batch.permutation(3), batch.permutation(4))

    def test_minibatch_count(self):
        batch = build_batch(self.make())
        n = len(batch)
        assert batch.num_minibatches(512) == math.ceil(n / 512)
        sizes = [len(mb) for mb in batch.minibatches(64, 0)]
        assert sum(sizes) == n and len(sizes) == math.ceil(n / 64)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_batch([])

    def test_dump_one_line_per_transition(self, tmp_path):
        eps = self.make()
        dump_batch(eps, tmp_path / "b.jsonl")
        lines = (tmp_path / "b.jsonl").read_text().splitlines()
        assert len(lines) == sum(ep.num_transitions for ep in eps)


class TestCollect:
    def test_zero_sigma_fixes_phi(self):
        col, policy = small_collector()
        eps = col.collect(policy, LcfSampler(0.3, 0.0), 300)
        assert all(b.lcf_phi == 0.3 for ep in eps for b in ep.buffers)

    def test_phi_clamped(self):
        col, policy = small_collector()
        eps = col.collect(policy, LcfSampler(1.5, 1.0), 300)
        phis = [b.lcf_phi for ep in eps for b in ep.buffers]
        assert max(phis) <= math.pi / 2 and min(phis) >= -math.pi / 2

    def test_batch_target_and_capacity(self):
        col, policy = small_collector(target=4, horizon=50)
        eps = col.collect(policy, LcfSampler(0.0, 0.1), 500)
        assert sum(ep.num_transitions for ep in eps) >= 500
        for ep in eps:
            assert ep.active_counts.max() <= 4
            assert ep.total_reward_by_agent() == pytest.approx(ep.total_reward_by_time(), rel=1e-12)

    def test_buffers_are_contiguous(self):
        col, policy = small_collector(horizon=40)
        eps = col.collect(policy, LcfSampler(0.0, 0.5), 400)
        for ep in eps:
            for b in ep.buffers:
                assert np.all(np.diff(b.steps) == 1)

    def test_phi_survives_batch_cut(self):
        col, policy = small_collector(horizon=200)
        first = col.collect(policy, LcfSampler(0.0, 0.5), 100)
        cut = {b.agent_id: b.lcf_phi for b in first[-1].buffers if b.truncated}
        assert cut
        second = col.collect(policy, LcfSampler(0.9, 0.5), 100)
        for b in second[0].buffers:
            if b.agent_id in cut:
                assert b.lcf_phi == cut[b.agent_id]

    def test_deterministic(self):
        def run():
            col, policy = small_collector(seed=3)
            eps = col.collect(policy, LcfSampler(0.0, 0.2), 300)
            return [(b.agent_id, b.steps.tolist(), b.r_individual.tolist()) for ep in eps for b in ep.buffers]

        assert run() == run()
