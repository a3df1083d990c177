"""mdp-core: rollouts, rewards, enumeration, values, bi-level checking."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttclab.constructions import two_branch_instance
from ttclab.errors import CapExceeded
from ttclab.mdp import (
    MdpSpec,
    Prompt,
    Trajectory,
    bilevel_location,
    check_bilevel_property,
    enumerate_trajectories,
    q_value_exact,
    rollout,
    single_prompt_mdp,
    trajectory_reward,
    tree_stats_exact,
    value_exact,
    value_mc,
)
from ttclab.planted import make_planted_env, normalized_return, procedural_policy, subsequence_mdp
from ttclab.policies import DeterministicPolicy, RandomSoftmaxPolicy, UniformPolicy
from ttclab.rewards import BrokenResetReward, NeverReward, RandomPrefixReward, SubsequenceReward


@pytest.fixture(scope="module")
def env10():
    return make_planted_env(10, n_prompts=8, seed=0, n_test=4)


def prompt_ones(env):
    return Prompt(id=999, tokens=(1, 1, 1, 1, 1))


class TestRollout:
    def test_deterministic_policy_rolls_all_zeros(self, env10):
        mdp = env10.mdp("train")
        pol = DeterministicPolicy(mdp.vocab_size, token=0)
        traj = rollout(pol, mdp, mdp.prompts[0], np.random.default_rng(0))
        assert traj.actions == (0,) * 10

    def test_mu_1000_starts_with_gold_prefix(self, env10):
        # oracle: exact per-step conditional gamma/(gamma+30) = 1000/1030, so
        # P(first five tokens are the gold subsequence) = (1000/1030)^5 = 0.86270
        p = prompt_ones(env10)
        mu = procedural_policy(env10, 1000.0)
        assert mu.action_probs(p, ())[7] == pytest.approx(1000 / 1030, abs=1e-12)
        exact = (1000 / 1030) ** 5
        assert exact == pytest.approx(0.8626088, abs=1e-6)
        mdp = env10.mdp("train")
        rng = np.random.default_rng(3)
        hits = 0
        n = 400
        for _ in range(n):
            traj = rollout(mu, mdp, p, rng)
            hits += traj.actions[:5] == (7, 7, 7, 7, 7)
        se = math.sqrt(exact * (1 - exact) / n)
        assert abs(hits / n - exact) <= 4 * se

    def test_fixed_seed_reproducible(self, env10):
        mdp = env10.mdp("train")
        mu = procedural_policy(env10, 10.0)
        t1 = rollout(mu, mdp, mdp.prompts[0], np.random.default_rng(7))
        t2 = rollout(mu, mdp, mdp.prompts[0], np.random.default_rng(7))
        assert t1 == t2


class TestTrajectoryReward:
    def test_gold_prefix_match(self, env10):
        p = prompt_ones(env10)
        traj = Trajectory(p, (7, 7, 7, 7, 7, 0, 0, 0, 0, 0))
        assert trajectory_reward(env10.reward, traj) == 6
        assert bilevel_location(env10.reward, traj) == 5

    def test_no_match_is_zero(self, env10):
        p = prompt_ones(env10)
        traj = Trajectory(p, (1, 2, 3, 4, 5, 6, 8, 9, 10, 11))
        assert trajectory_reward(env10.reward, traj) == 0
        assert bilevel_location(env10.reward, traj) is None

    def test_reward_three_normalizes_to_half_at_h10(self, env10):
        # a match completing at step 8 of H=10 earns 3; 3/(10-4) = 0.5
        p = prompt_ones(env10)
        traj = Trajectory(p, (0, 0, 0, 7, 7, 7, 7, 7, 0, 0))
        assert trajectory_reward(env10.reward, traj) == 3
        assert normalized_return(3, 10) == 0.5

    def test_location_inverts_reward(self, env10):
        p = prompt_ones(env10)
        traj = Trajectory(p, (0, 7, 7, 7, 7, 7, 0, 0, 0, 0))
        assert trajectory_reward(env10.reward, traj) == 10 - 6 + 1
        assert bilevel_location(env10.reward, traj) == 6


class TestLocationAgainstLinearScan:
    def test_random_instances_match_scan(self):
        rng = np.random.default_rng(5)
        reward = RandomPrefixReward(seed=11, hit_prob=0.15)
        prompt = Prompt(id=0, tokens=())
        for _ in range(200):
            actions = tuple(int(a) for a in rng.integers(0, 3, size=8))
            traj = Trajectory(prompt, actions)
            scan = None
            for h in range(1, 9):
                if reward.step_reward(prompt, actions, h) == 1:
                    scan = h
                    break
            assert bilevel_location(reward, traj) == scan


class TestEnumeration:
    def test_counts_and_total_mass(self):
        mdp = single_prompt_mdp(2, 3, NeverReward())
        pol = RandomSoftmaxPolicy(2, seed=1)
        pairs = list(enumerate_trajectories(mdp, mdp.prompts[0], pol))
        assert len(pairs) == 8
        assert sum(p for _, p in pairs) == pytest.approx(1.0, abs=1e-9)

    def test_uniform_probabilities(self):
        mdp = single_prompt_mdp(2, 3, NeverReward())
        pairs = list(enumerate_trajectories(mdp, mdp.prompts[0], UniformPolicy(2)))
        assert all(p == pytest.approx(1 / 8, abs=1e-12) for _, p in pairs)

    def test_two_branch_collapses_to_two_reward_classes(self):
        mdp, base = two_branch_instance(0.3, 4)
        mass = {}
        for traj, p in enumerate_trajectories(mdp, mdp.prompts[0], base):
            r = trajectory_reward(mdp.reward, traj)
            mass[r] = mass.get(r, 0.0) + p
        assert set(mass) == {0, 4}
        assert mass[4] == pytest.approx(0.3, abs=1e-9)
        assert mass[0] == pytest.approx(0.7, abs=1e-9)

    def test_cap_exceeded(self):
        mdp = MdpSpec(4, 12, (Prompt(0, ()),), (1.0,), NeverReward(), enum_cap=2**10)
        with pytest.raises(CapExceeded):
            list(enumerate_trajectories(mdp, mdp.prompts[0], UniformPolicy(4)))


class TestValues:
    def test_zero_reward_support(self):
        mdp = single_prompt_mdp(2, 4, NeverReward())
        assert value_exact(UniformPolicy(2), mdp) == 0.0

    def test_two_branch_half(self):
        mdp, base = two_branch_instance(0.5, 4)
        assert value_exact(base, mdp) == pytest.approx(2.0, abs=1e-12)

    def test_mc_matches_exact_within_three_stderr(self):
        mdp, base = two_branch_instance(0.5, 4)
        est, se = value_mc(base, mdp, 100_000, np.random.default_rng(0))
        assert abs(est - 2.0) <= 3 * se

    def test_mc_deterministic_policy_zero_stderr(self):
        mdp = single_prompt_mdp(2, 4, NeverReward())
        est, se = value_mc(DeterministicPolicy(2), mdp, 50, np.random.default_rng(0))
        assert est == 0.0 and se == 0.0

    def test_mc_two_samples_boundary(self):
        mdp, base = two_branch_instance(0.5, 4)
        est, se = value_mc(base, mdp, 2, np.random.default_rng(0))
        assert np.isfinite(est) and np.isfinite(se)

    def test_mc_converges_in_99_percent_of_runs(self):
        mdp, base = two_branch_instance(0.35, 3)
        exact = value_exact(base, mdp)
        bad = 0
        for seed in range(100):
            est, se = value_mc(base, mdp, 800, np.random.default_rng(seed))
            if abs(est - exact) > 4 * max(se, 1e-12):
                bad += 1
        assert bad <= 1


class TestQValues:
    def test_absorption_gives_full_tail_for_all_actions(self):
        mdp = subsequence_mdp(2, 6, {0: (1, 1)})
        pol = RandomSoftmaxPolicy(2, seed=3)
        prompt = mdp.prompts[0]
        prefix = (1, 1, 0)  # already matched at step 2; next step h = 4
        for a in range(2):
            q = q_value_exact(pol, mdp, prompt, prefix, a)
            assert q == pytest.approx(6 - 4 + 1, abs=1e-12)

    def test_terminal_step_equals_step_reward(self):
        mdp = subsequence_mdp(2, 4, {0: (1, 1)})
        pol = UniformPolicy(2)
        prompt = mdp.prompts[0]
        assert q_value_exact(pol, mdp, prompt, (0, 0, 0), 0) == 0.0
        assert q_value_exact(pol, mdp, prompt, (0, 1, 1), 0) == 1.0

    def test_matches_suffix_enumeration_oracle(self):
        # oracle: brute-force over all suffix completions
        mdp = subsequence_mdp(3, 5, {0: (1, 2)})
        pol = RandomSoftmaxPolicy(3, seed=9)
        prompt = mdp.prompts[0]
        rng = np.random.default_rng(4)
        for _ in range(10):
            k = int(rng.integers(0, 4))
            prefix = tuple(int(a) for a in rng.integers(0, 3, size=k))
            action = int(rng.integers(0, 3))
            h = k + 1
            expected = 0.0
            import itertools

            for tail in itertools.product(range(3), repeat=5 - h):
                seq = prefix + (action,) + tail
                prob = 1.0
                pre = prefix
                for a in (action,) + tail:
                    probs = pol.action_probs(prompt, pre)
                    if pre == prefix and a == action:
                        pass  # the action itself is conditioned on, not weighted
                    else:
                        prob *= probs[a]
                    pre = pre + (a,)
                total = sum(
                    mdp.reward.step_reward(prompt, seq, t) for t in range(h, 6)
                )
                expected += prob * total
            got = q_value_exact(pol, mdp, prompt, prefix, action)
            assert got == pytest.approx(expected, abs=1e-9)


class TestBiLevelChecker:
    def test_subsequence_reward_passes_exhaustive(self):
        mdp = subsequence_mdp(3, 5, {0: (1, 2), 1: (2, 2)})
        res = check_bilevel_property(mdp.reward, mdp, mode="exhaustive")
        assert res.passed and res.counterexample is None

    def test_broken_reward_fails_with_counterexample(self):
        mdp = subsequence_mdp(3, 5, {0: (1, 2)})
        broken = BrokenResetReward(mdp.reward)
        res = check_bilevel_property(broken, mdp, mode="exhaustive")
        assert not res.passed
        assert res.counterexample is not None
        assert res.step_rewards is not None
        # the reported sequence really is non-monotone
        seq = res.step_rewards
        assert any(seq[i + 1] < seq[i] for i in range(len(seq) - 1))

    def test_sampled_mode(self):
        mdp = subsequence_mdp(3, 6, {0: (1, 2)})
        res = check_bilevel_property(
            mdp.reward, mdp, mode="sampled", budget=200, rng=np.random.default_rng(0)
        )
        assert res.passed and res.checked == 200


class TestInvariants:
    @given(st.integers(0, 2**31 - 1), st.integers(2, 3), st.integers(2, 6))
    @settings(max_examples=40, deadline=None)
    def test_reward_equals_inverted_location(self, seed, vocab, horizon):
        rng = np.random.default_rng(seed)
        reward = RandomPrefixReward(seed=seed, hit_prob=0.2)
        prompt = Prompt(id=0, tokens=())
        actions = tuple(int(a) for a in rng.integers(0, vocab, size=horizon))
        traj = Trajectory(prompt, actions)
        loc = bilevel_location(reward, traj)
        expected = 0 if loc is None else horizon - loc + 1
        assert trajectory_reward(reward, traj) == expected

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_enumeration_mass_sums_to_one(self, seed):
        mdp = single_prompt_mdp(3, 4, NeverReward())
        pol = RandomSoftmaxPolicy(3, seed=seed)
        total = sum(p for _, p in enumerate_trajectories(mdp, mdp.prompts[0], pol))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_value_exact_equals_prob_weighted_rewards(self):
        mdp = subsequence_mdp(2, 6, {0: (1, 1)})
        pol = RandomSoftmaxPolicy(2, seed=12)
        total = sum(
            p * trajectory_reward(mdp.reward, t)
            for t, p in enumerate_trajectories(mdp, mdp.prompts[0], pol)
        )
        assert value_exact(pol, mdp) == pytest.approx(total, abs=1e-12)

    def test_tree_stats_match_enumeration(self):
        mdp = subsequence_mdp(2, 6, {0: (1, 0)})
        pol = RandomSoftmaxPolicy(2, seed=21)
        st_ = tree_stats_exact(pol, mdp, mdp.prompts[0])
        rs, ps = [], []
        for t, p in enumerate_trajectories(mdp, mdp.prompts[0], pol):
            rs.append(trajectory_reward(mdp.reward, t))
            ps.append(p)
        rs, ps = np.asarray(rs, float), np.asarray(ps)
        assert st_.mean_reward == pytest.approx(float(ps @ rs), abs=1e-12)
        assert st_.reward_variance == pytest.approx(
            float(ps @ (rs - ps @ rs) ** 2), abs=1e-9
        )
