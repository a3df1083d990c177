"""constructions: tilts, comparators, complement rewards, codebooks, packing."""

import math

import numpy as np
import pytest

from ttclab.constructions import (
    ComplementReward,
    complement_reward,
    extend_comparator,
    gilbert_varshamov_codebook,
    make_comparator_policy,
    make_packing_family,
    make_tilted_policy,
    solve_tilt_theta,
    two_branch_instance,
    verify_codebook,
)
from ttclab.errors import EmptySupport, Infeasible, NotHalfBiLevel
from ttclab.mdp import (
    MdpSpec,
    Prompt,
    check_bilevel_property,
    enumerate_trajectories,
    tree_stats_exact,
    trajectory_reward,
    value_exact,
)
from ttclab.metrics import DivergenceKind, density_ratio_sup, divergence, anti_concentration
from ttclab.policies import RandomSoftmaxPolicy
from ttclab.rewards import RandomPrefixReward, SubsequenceReward


class TestSolveTiltTheta:
    def test_zero_eps_gives_zero(self):
        assert solve_tilt_theta(2.0, 1.0, 0.0) == 0.0

    def test_worked_example(self):
        theta = solve_tilt_theta(2.0, 1.0, 1.0)
        assert theta == pytest.approx(2.0, abs=1e-12)
        # back-substitution: chi^2 = theta^2 sigma^2 / (sigma + theta J)^2 = 1
        chi = theta**2 * 4.0 / (2.0 + theta * 1.0) ** 2
        assert chi == pytest.approx(1.0, abs=1e-12)

    def test_boundary_is_infeasible(self):
        with pytest.raises(Infeasible):
            solve_tilt_theta(2.0, 1.0, 4.0)  # sqrt(eps) = sigma/J exactly
        with pytest.raises(Infeasible):
            solve_tilt_theta(2.0, 1.0, 9.0)
        with pytest.raises(Infeasible):
            solve_tilt_theta(0.0, 1.0, 0.5)


class TestTiltedPolicy:
    def test_zero_theta_equals_base(self):
        mdp, base = two_branch_instance(0.5, 4)
        tp = make_tilted_policy(base, mdp.reward, 0.0, 2.0, mdp, mdp.prompts[0])
        assert divergence(DivergenceKind.CHI_SQUARED, tp, base, mdp, mdp.prompts[0]) == pytest.approx(0.0, abs=1e-12)
        assert value_exact(tp, mdp) == pytest.approx(value_exact(base, mdp), abs=1e-12)

    def test_solver_theta_hits_eps_and_value_gap(self):
        # two-branch p=1/2 H=4: J = 2, sigma = 2; pick eps = 0.25
        mdp, base = two_branch_instance(0.5, 4)
        sigma, jb, eps = 2.0, 2.0, 0.25
        theta = solve_tilt_theta(sigma, jb, eps)
        tp = make_tilted_policy(base, mdp.reward, theta, sigma, mdp, mdp.prompts[0])
        chi = divergence(DivergenceKind.CHI_SQUARED, tp, base, mdp, mdp.prompts[0])
        assert chi == pytest.approx(eps, abs=1e-9)
        gap = value_exact(tp, mdp) - jb
        assert gap == pytest.approx(sigma * math.sqrt(eps), abs=1e-9)


class TestComparatorPolicy:
    def test_two_branch_point_mass_on_winning_branch(self):
        mdp, base = two_branch_instance(0.5, 4)
        pi_c = make_comparator_policy(base, mdp.reward, {0: 1.0}, mdp)
        assert value_exact(pi_c, mdp) == pytest.approx(4.0, abs=1e-9)
        ratio = density_ratio_sup(pi_c, base, mdp, mdp.prompts[0])
        c0 = anti_concentration(base, mdp, {0: 1.0}).per_prompt[0]
        assert ratio == pytest.approx(2.0, abs=1e-9)
        assert ratio == pytest.approx(1.0 / c0, abs=1e-9)

    def test_eps_zero_support_is_above_mean(self):
        mdp, base = two_branch_instance(0.3, 4)
        pi_c = make_comparator_policy(base, mdp.reward, {0: 0.0}, mdp)
        for traj, p in enumerate_trajectories(mdp, mdp.prompts[0], pi_c):
            if p > 0:
                assert trajectory_reward(mdp.reward, traj) >= 0.3 * 4

    def test_empty_support_raises(self):
        mdp, base = two_branch_instance(0.5, 4)
        with pytest.raises(EmptySupport):
            make_comparator_policy(base, mdp.reward, {0: 4.0}, mdp)  # threshold 6 > max 4

    def test_dominates_tilted_witness(self):
        mdp, base = two_branch_instance(0.4, 4)
        st = tree_stats_exact(base, mdp, mdp.prompts[0])
        sigma, jb = math.sqrt(st.reward_variance), st.mean_reward
        eps = 0.5 * sigma**2 / jb**2
        pi_c = make_comparator_policy(base, mdp.reward, {0: eps}, mdp)
        tilted = make_tilted_policy(base, mdp.reward, solve_tilt_theta(sigma, jb, eps), sigma, mdp, mdp.prompts[0])
        assert value_exact(pi_c, mdp) >= value_exact(tilted, mdp) - 1e-9


class TestExtendComparator:
    def test_h0_equals_horizon_is_identity(self):
        mdp, base = two_branch_instance(0.5, 4)
        pi_c = make_comparator_policy(base, mdp.reward, {0: 1.0}, mdp)
        ext = extend_comparator(pi_c, base, 4, 4)
        for prefix in [(), (0,), (0, 1, 0)]:
            np.testing.assert_allclose(
                ext.action_probs(mdp.prompts[0], prefix), pi_c.action_probs(mdp.prompts[0], prefix)
            )

    def test_extension_adds_full_tail(self):
        mdp, base = two_branch_instance(0.5, 4)
        pi_c = make_comparator_policy(base, mdp.reward, {0: 1.0}, mdp)
        ext = extend_comparator(pi_c, base, 4, 8)
        ext_mdp = MdpSpec(2, 8, mdp.prompts, mdp.prompt_dist, mdp.reward)
        assert value_exact(ext, ext_mdp) == pytest.approx(4.0 + 4.0, abs=1e-9)

    def test_density_ratio_sup_unchanged(self):
        mdp, base = two_branch_instance(0.5, 4)
        pi_c = make_comparator_policy(base, mdp.reward, {0: 1.0}, mdp)
        r4 = density_ratio_sup(pi_c, base, mdp, mdp.prompts[0])
        ext = extend_comparator(pi_c, base, 4, 7)
        ext_mdp = MdpSpec(2, 7, mdp.prompts, mdp.prompt_dist, mdp.reward)
        r7 = density_ratio_sup(ext, base, ext_mdp, mdp.prompts[0])
        assert r7 == pytest.approx(r4, abs=1e-9)


class TestComplementReward:
    def _half_mdp(self, seed=0, horizon=4):
        prompt = Prompt(id=0, tokens=())
        reward = RandomPrefixReward(seed=seed, hit_prob=0.2, force_depth=horizon // 2)
        return MdpSpec(2, horizon, (prompt,), (1.0,), reward)

    def test_not_half_bilevel_rejected(self):
        reward = SubsequenceReward(2, lambda p: (1, 1))
        mdp = MdpSpec(2, 4, (Prompt(0, ()),), (1.0,), reward)
        with pytest.raises(NotHalfBiLevel):
            complement_reward(reward, mdp)

    def test_all_flips_at_one_complement_never_flips(self):
        mdp = self._half_mdp(horizon=4)
        always_one = RandomPrefixReward(seed=1, hit_prob=1.0)
        inst = MdpSpec(2, 4, mdp.prompts, (1.0,), always_one)
        comp = complement_reward(always_one, inst)
        pol = RandomSoftmaxPolicy(2, seed=3)
        comp_mdp = MdpSpec(2, 4, inst.prompts, (1.0,), comp)
        assert value_exact(pol, comp_mdp) == pytest.approx(0.0, abs=1e-12)
        assert value_exact(pol, inst) == pytest.approx(4.0, abs=1e-12)

    def test_mean_and_variance_identities(self):
        for seed in range(10):
            mdp = self._half_mdp(seed=seed, horizon=4)
            comp = complement_reward(mdp.reward, mdp)
            comp_mdp = MdpSpec(2, 4, mdp.prompts, (1.0,), comp)
            pol = RandomSoftmaxPolicy(2, seed=seed + 100)
            a = tree_stats_exact(pol, mdp, mdp.prompts[0])
            b = tree_stats_exact(pol, comp_mdp, mdp.prompts[0])
            assert b.mean_reward == pytest.approx(4 - a.mean_reward, abs=1e-9)
            assert b.reward_variance == pytest.approx(a.reward_variance, abs=1e-9)

    def test_complement_is_bilevel(self):
        mdp = self._half_mdp(seed=5, horizon=6)
        comp = complement_reward(mdp.reward, mdp)
        comp_mdp = MdpSpec(2, 6, mdp.prompts, (1.0,), comp)
        assert check_bilevel_property(comp, comp_mdp, mode="exhaustive").passed


class TestCodebooks:
    def test_k8_meets_bound(self):
        cb = gilbert_varshamov_codebook(8)
        assert cb.size >= 4
        assert verify_codebook(cb) >= 2

    def test_k4_contains_extremes(self):
        cb = gilbert_varshamov_codebook(4)
        assert 0b0000 in cb.words and 0b1111 in cb.words
        assert cb.size >= 2

    def test_exhaustive_verification_all_k(self):
        for k in (8, 12):
            cb = gilbert_varshamov_codebook(k)
            assert verify_codebook(cb) >= math.ceil(k / 4)

    def test_max_size_truncation(self):
        cb = gilbert_varshamov_codebook(12, max_size=8)
        assert cb.size == 8
        assert verify_codebook(cb) >= 3

    def test_small_k_rejected(self):
        with pytest.raises(ValueError):
            gilbert_varshamov_codebook(3)


class TestPackingFamily:
    def _instance(self):
        prompts = (Prompt(id=0, tokens=(1,)), Prompt(id=1, tokens=(2,)))
        reward = RandomPrefixReward(seed=0, hit_prob=0.3, force_depth=2)
        mdp = MdpSpec(2, 4, prompts, (0.5, 0.5), reward)
        ref = RandomSoftmaxPolicy(2, seed=7)
        return mdp, ref

    def test_equal_codewords_coincide(self):
        mdp, ref = self._instance()
        fam = make_packing_family(ref, mdp.reward, [{0}, {1}], 0.0005, mdp, words=(0b00, 0b11))
        for prompt in mdp.prompts:
            chi = divergence(DivergenceKind.CHI_SQUARED, fam.policies[0b11], fam.policies[0b11], mdp, prompt)
            assert chi == pytest.approx(0.0, abs=1e-12)

    def test_infeasible_xi_rejected(self):
        mdp, ref = self._instance()
        with pytest.raises(Infeasible):
            make_packing_family(ref, mdp.reward, [{0}, {1}], 100.0, mdp)

    def test_non_half_reward_rejected(self):
        prompts = (Prompt(id=0, tokens=(1,)), Prompt(id=1, tokens=(2,)))
        reward = SubsequenceReward(2, lambda p: (1, 1))
        mdp = MdpSpec(2, 4, prompts, (0.5, 0.5), reward)
        with pytest.raises((NotHalfBiLevel, Infeasible)):
            make_packing_family(RandomSoftmaxPolicy(2, seed=1), reward, [{0}, {1}], 0.001, mdp)


class TestTwoBranchInstance:
    def test_degenerate_p_zero_variance(self):
        for p in (0.0, 1.0):
            mdp, base = two_branch_instance(p, 5)
            st = tree_stats_exact(base, mdp, mdp.prompts[0])
            assert st.reward_variance == pytest.approx(0.0, abs=1e-12)

    def test_half_p_variance(self):
        mdp, base = two_branch_instance(0.5, 4)
        st = tree_stats_exact(base, mdp, mdp.prompts[0])
        assert st.reward_variance == pytest.approx(4.0, abs=1e-12)
