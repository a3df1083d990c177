"""metrics: divergences, heterogeneity, anti-concentration, partition score."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttclab.constructions import two_branch_instance
from ttclab.errors import AbsoluteContinuityViolated, PartitionInvalid
from ttclab.mdp import Prompt, single_prompt_mdp
from ttclab.metrics import (
    DivergenceKind,
    HeterogeneityReport,
    MonteCarlo,
    anti_concentration,
    density_ratio_sup,
    divergence,
    divergence_inequality_check,
    divergence_mc,
    divergence_over_prompts,
    heterogeneity,
    partition_score_L,
)
from ttclab.policies import (
    DeterministicPolicy,
    FirstStepBranchPolicy,
    RandomSoftmaxPolicy,
    TableTrajectoryPolicy,
)
from ttclab.rewards import NeverReward

ALL_KINDS = list(DivergenceKind)


class TestDivergence:
    def test_identical_policies_all_zero(self):
        mdp = single_prompt_mdp(3, 3, NeverReward())
        p = RandomSoftmaxPolicy(3, seed=5)
        for kind in ALL_KINDS:
            assert divergence(kind, p, p, mdp, mdp.prompts[0]) == pytest.approx(0.0, abs=1e-12)

    def test_two_branch_chi_squared_closed_form(self):
        # theta^2 / (p (1-p)) with p = 1/2, theta = 1/4 gives exactly 1/4
        mdp, base = two_branch_instance(0.5, 4)
        alt = FirstStepBranchPolicy(2, 0.25)
        chi = divergence(DivergenceKind.CHI_SQUARED, alt, base, mdp, mdp.prompts[0])
        assert chi == pytest.approx(0.25, abs=1e-12)

    def test_mc_agrees_with_exact_within_four_stderr(self):
        mdp, base = two_branch_instance(0.4, 3)
        alt = FirstStepBranchPolicy(2, 0.25)
        for kind in ALL_KINDS:
            exact = divergence(kind, alt, base, mdp, mdp.prompts[0])
            est = divergence_mc(
                kind, alt, base, mdp, mdp.prompts[0], MonteCarlo(100_000, np.random.default_rng(0))
            )
            assert abs(est.value - exact) <= 4 * max(est.std_error, 1e-9)

    def test_absolute_continuity_violation_raises(self):
        mdp = single_prompt_mdp(2, 2, NeverReward())
        prompt = mdp.prompts[0]
        p = TableTrajectoryPolicy(2, prompt, {(0, 0): 0.5, (1, 1): 0.5})
        q = TableTrajectoryPolicy(2, prompt, {(0, 0): 1.0})
        for kind in (DivergenceKind.CHI_SQUARED, DivergenceKind.KL):
            with pytest.raises(AbsoluteContinuityViolated):
                divergence(kind, p, q, mdp, prompt)
        # TV and Hellinger stay finite
        assert divergence(DivergenceKind.TV, p, q, mdp, prompt) == pytest.approx(0.5)

    def test_aggregate_over_prompts(self):
        mdp, base = two_branch_instance(0.5, 3)
        alt = FirstStepBranchPolicy(2, 0.25)
        agg = divergence_over_prompts(DivergenceKind.CHI_SQUARED, alt, base, mdp)
        assert agg == pytest.approx(0.25, abs=1e-12)


class TestDensityRatioSup:
    def test_identical_is_one(self):
        mdp = single_prompt_mdp(2, 3, NeverReward())
        p = RandomSoftmaxPolicy(2, seed=1)
        assert density_ratio_sup(p, p, mdp, mdp.prompts[0]) == pytest.approx(1.0, abs=1e-9)

    def test_outside_support_is_infinite(self):
        mdp = single_prompt_mdp(2, 2, NeverReward())
        prompt = mdp.prompts[0]
        p = TableTrajectoryPolicy(2, prompt, {(1, 1): 1.0})
        q = TableTrajectoryPolicy(2, prompt, {(0, 0): 1.0})
        assert math.isinf(density_ratio_sup(p, q, mdp, prompt))


class TestHeterogeneity:
    def test_deterministic_policy_is_zero(self):
        mdp, _ = two_branch_instance(0.5, 4)
        rep = heterogeneity(DeterministicPolicy(2, 0), mdp)
        assert rep.per_prompt[0] == pytest.approx(0.0, abs=1e-12)

    def test_two_branch_closed_form(self):
        # p (1-p) H^2 = 4 at p = 1/2, H = 4
        mdp, base = two_branch_instance(0.5, 4)
        for method in ("reward_variance", "sum_of_q_variances"):
            rep = heterogeneity(base, mdp, method=method)
            assert rep.total == pytest.approx(4.0, abs=1e-9)
        assert rep.mean == pytest.approx(2.0, abs=1e-9)

    def test_methods_agree_on_random_policy(self):
        from ttclab.planted import subsequence_mdp

        mdp = subsequence_mdp(3, 5, {0: (1, 2), 1: (2, 1)})
        pol = RandomSoftmaxPolicy(3, seed=17)
        a = heterogeneity(pol, mdp, method="sum_of_q_variances")
        b = heterogeneity(pol, mdp, method="reward_variance")
        for pid in a.per_prompt:
            assert a.per_prompt[pid] == pytest.approx(b.per_prompt[pid], abs=1e-9)

    def test_mc_backend_reward_variance_only(self):
        mdp, base = two_branch_instance(0.5, 4)
        mc = MonteCarlo(4000, np.random.default_rng(0))
        rep = heterogeneity(base, mdp, method="reward_variance", backend=mc)
        assert rep.total == pytest.approx(4.0, rel=0.15)
        with pytest.raises(ValueError):
            heterogeneity(base, mdp, method="sum_of_q_variances", backend=mc)


class TestAntiConcentration:
    def test_two_branch_eps_one(self):
        mdp, base = two_branch_instance(0.5, 4)
        rep = anti_concentration(base, mdp, {0: 1.0})
        assert rep.thresholds[0] == pytest.approx(4.0, abs=1e-9)
        assert rep.per_prompt[0] == pytest.approx(0.5, abs=1e-12)
        assert rep.c_min == rep.per_prompt[0]

    def test_eps_zero_is_mass_at_or_above_mean(self):
        mdp, base = two_branch_instance(0.3, 4)
        rep = anti_concentration(base, mdp, {0: 0.0})
        assert rep.per_prompt[0] == pytest.approx(0.3, abs=1e-12)

    def test_zero_variance_boundary_is_one(self):
        mdp, _ = two_branch_instance(0.5, 4)
        rep = anti_concentration(DeterministicPolicy(2, 0), mdp, {0: 2.0})
        assert rep.per_prompt[0] == pytest.approx(1.0)

    @given(st.floats(0.0, 3.0), st.floats(0.0, 3.0))
    @settings(max_examples=30, deadline=None)
    def test_monotone_nonincreasing_in_eps(self, e1, e2):
        mdp, base = two_branch_instance(0.4, 4)
        lo, hi = min(e1, e2), max(e1, e2)
        r_lo = anti_concentration(base, mdp, {0: lo}).per_prompt[0]
        r_hi = anti_concentration(base, mdp, {0: hi}).per_prompt[0]
        assert r_hi <= r_lo + 1e-12


def _report(sigmas, rho=None):
    n = len(sigmas)
    rho = rho or {i: 1.0 / n for i in range(n)}
    per = {i: s**2 for i, s in enumerate(sigmas)}
    sig = np.asarray(sigmas, float)
    w = np.asarray([rho[i] for i in range(n)])
    return HeterogeneityReport(
        per_prompt=per,
        rho=rho,
        total=float(w @ sig**2),
        mean=float(w @ sig),
        median=float(np.median(sig)),
    )


class TestPartitionScore:
    def test_symmetric_case_is_quarter_of_mean_sigma(self):
        rep = _report([2.0] * 8)
        partition = [{0, 1}, {2, 3}, {4, 5}, {6, 7}]
        # ceil(4/4) = 1 part; each part holds sigma-mass 2 * (2/8) = 0.5 = mean/4
        assert partition_score_L(rep, partition, 4) == pytest.approx(rep.mean / 4, abs=1e-12)

    def test_zero_sigma_part_gives_zero(self):
        rep = _report([2.0, 2.0, 2.0, 0.0])
        partition = [{0}, {1}, {2}, {3}]
        assert partition_score_L(rep, partition, 4) == pytest.approx(0.0, abs=1e-12)

    def test_invalid_partitions(self):
        rep = _report([1.0, 2.0, 3.0])
        with pytest.raises(PartitionInvalid):
            partition_score_L(rep, [{0, 1}], 1)  # does not cover
        with pytest.raises(PartitionInvalid):
            partition_score_L(rep, [{0, 1}, {1, 2}], 2)  # overlap
        with pytest.raises(PartitionInvalid):
            partition_score_L(rep, [{0, 1, 2}, set()], 2)  # empty part

    def test_brute_force_optimal_partition_dominates(self):
        # oracle: exhaustive search over all partitions of 6 prompts into 3 parts
        rng = np.random.default_rng(3)
        rep = _report(list(rng.uniform(0.2, 3.0, size=6)))
        ids = list(range(6))
        k = 3

        def partitions_into(items, k):
            if k == 1:
                yield [set(items)]
                return
            if len(items) == k:
                yield [{i} for i in items]
                return
            first, rest = items[0], items[1:]
            for sub in partitions_into(rest, k - 1):
                yield [{first}] + sub
            for sub in partitions_into(rest, k):
                for i in range(k):
                    yield [s | {first} if j == i else set(s) for j, s in enumerate(sub)]

        best = max(partition_score_L(rep, p, k) for p in partitions_into(ids, k))
        for _ in range(20):
            perm = list(rng.permutation(6))
            cuts = sorted(rng.choice(range(1, 6), size=2, replace=False))
            parts = [set(perm[: cuts[0]]), set(perm[cuts[0] : cuts[1]]), set(perm[cuts[1] :])]
            assert best >= partition_score_L(rep, parts, k) - 1e-12

    def test_exact_size_subsets_match_full_enumeration(self):
        # non-negative scores mean supersets cannot lower the minimum
        rng = np.random.default_rng(9)
        rep = _report(list(rng.uniform(0.0, 2.0, size=8)))
        partition = [{0, 1}, {2}, {3, 4}, {5}, {6}, {7}]
        k = 6
        m = math.ceil(k / 4)
        scores = [
            sum(rep.rho[x] * rep.sigma(x) for x in part) for part in partition
        ]
        full = min(
            sum(scores[i] for i in comb)
            for size in range(m, k + 1)
            for comb in itertools.combinations(range(k), size)
        )
        assert partition_score_L(rep, partition, k) == pytest.approx(full, abs=1e-12)


class TestDivergenceChain:
    def test_identical_pair_trivially_holds(self):
        mdp = single_prompt_mdp(3, 3, NeverReward())
        p = RandomSoftmaxPolicy(3, seed=2)
        rep = divergence_inequality_check(p, p, mdp, mdp.prompts[0])
        assert rep.passed
        assert rep.tv == pytest.approx(0.0, abs=1e-12)
        assert rep.hellinger_sq == pytest.approx(0.0, abs=1e-12)

    def test_random_pairs_hold(self):
        mdp = single_prompt_mdp(3, 4, NeverReward())
        for s in range(30):
            p = RandomSoftmaxPolicy(3, seed=2 * s + 1, scale=1.5)
            q = RandomSoftmaxPolicy(3, seed=2 * s + 2, scale=1.5)
            rep = divergence_inequality_check(p, q, mdp, mdp.prompts[0])
            assert rep.passed, rep.slacks

    def test_disjoint_support_boundary(self):
        mdp = single_prompt_mdp(2, 3, NeverReward())
        prompt = mdp.prompts[0]
        p = TableTrajectoryPolicy(2, prompt, {(0, 0, 0): 1.0})
        q = TableTrajectoryPolicy(2, prompt, {(1, 1, 1): 1.0})
        rep = divergence_inequality_check(p, q, mdp, prompt)
        assert rep.passed
        assert rep.tv == pytest.approx(1.0)
        assert math.isinf(rep.kl) and math.isinf(rep.chi_squared)


class TestMcClipFlag:
    def test_heavy_ratio_flags_bias(self):
        mdp = single_prompt_mdp(2, 8, NeverReward())
        prompt = mdp.prompts[0]
        p = DeterministicPolicy(2, 0)
        q = FirstStepBranchPolicy(2, 0.5)  # uniform afterwards; ratio 2^8 on p's support
        est = divergence_mc(
            DivergenceKind.CHI_SQUARED, p, q, mdp, prompt, MonteCarlo(2000, np.random.default_rng(1), weight_clip=10.0)
        )
        assert est.clip_fraction > 1e-3 and est.bias_flagged
