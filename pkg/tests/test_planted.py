"""planted-subsequence environment: reward, procedural/mixture policies,
rejection-sampled experts, normalized return."""

import math

import numpy as np
import pytest

from ttclab.mdp import Prompt, Trajectory, check_bilevel_property, tree_stats_exact
from ttclab.metrics import MonteCarlo, anti_concentration, heterogeneity
from ttclab.planted import (
    EXHAUSTED,
    Exhausted,
    MixtureBasePolicy,
    PlantedEnvSpec,
    batch_rollout,
    gold_subsequence,
    make_planted_env,
    mixture_base_policy,
    normalized_return,
    procedural_policy,
    rejection_sample_expert,
    subsequence_mdp,
)
from ttclab.policies import DeterministicPolicy
from ttclab.rewards import SubsequenceReward

GAMMAS = [5.0, 10.0, 20.0, 50.0, 100.0, 500.0]


def small_env(vocab=4, gold=(1, 2), horizon=6):
    """Reduced-vocab planted-style environment for enumerable oracles."""
    prompts = (Prompt(id=0, tokens=(1, 1, 1, 1, 1)), Prompt(id=1, tokens=(2, 2, 2, 2, 2)))
    golds = {0: gold, 1: tuple(reversed(gold))}
    reward = SubsequenceReward(vocab, lambda p: golds[p.id])
    return PlantedEnvSpec(
        horizon=horizon,
        train_prompts=prompts[:1],
        test_prompts=prompts[1:],
        seed=0,
        vocab_size=vocab,
        pad_token=0,
        reward=reward,
    )


class TestMakeEnv:
    def test_gold_map_example(self):
        env = make_planted_env(10, n_prompts=4, seed=0, n_test=2)
        p = Prompt(id=0, tokens=(3, 1, 4, 1, 5))
        assert gold_subsequence(p) == (11, 7, 13, 7, 15)

    def test_horizon_too_small_rejected(self):
        with pytest.raises(ValueError):
            make_planted_env(4, n_prompts=4, seed=0)

    def test_prompt_sets_disjoint_and_sized(self):
        env = make_planted_env(8, n_prompts=32, seed=1, n_test=16)
        train = {p.tokens for p in env.train_prompts}
        test = {p.tokens for p in env.test_prompts}
        assert len(train) == 32 and len(test) == 16
        assert not (train & test)

    def test_reward_is_bilevel_on_sampled_trajectories(self):
        env = make_planted_env(8, n_prompts=4, seed=2, n_test=2)
        res = check_bilevel_property(
            env.reward, env.mdp("train"), mode="sampled", budget=300, rng=np.random.default_rng(0)
        )
        assert res.passed


class TestProceduralPolicy:
    def test_gamma_1000_is_nearly_dirac(self):
        env = make_planted_env(10, n_prompts=4, seed=0, n_test=2)
        p = env.train_prompts[0]
        mu = procedural_policy(env, 1000.0)
        probs = mu.action_probs(p, ())
        assert probs[gold_subsequence(p)[0]] == pytest.approx(1000 / 1030, abs=1e-12)

    def test_gamma_1_is_uniform(self):
        env = make_planted_env(10, n_prompts=4, seed=0, n_test=2)
        p = env.train_prompts[0]
        mu = procedural_policy(env, 1.0)
        np.testing.assert_allclose(mu.action_probs(p, ()), np.full(31, 1 / 31), atol=1e-12)

    def test_pad_boosted_after_full_match(self):
        env = make_planted_env(10, n_prompts=4, seed=0, n_test=2)
        p = env.train_prompts[0]
        mu = procedural_policy(env, 50.0)
        probs = mu.action_probs(p, gold_subsequence(p))
        assert probs[env.pad_token] == pytest.approx(50 / 80, abs=1e-12)

    def test_match_restart_uses_suffix_automaton(self):
        # gold (1, 2) over vocab 3: after (1, 1) the matched prefix is still "1"
        env = small_env(vocab=3, gold=(1, 2), horizon=6)
        mu = procedural_policy(env, 10.0)
        p = env.train_prompts[0]
        probs = mu.action_probs(p, (1, 1))
        assert probs[2] == pytest.approx(10 / 12, abs=1e-12)  # boosted: next gold token

    def test_normalized_return_monotone_in_gamma(self):
        env = make_planted_env(12, n_prompts=16, seed=3, n_test=8)
        rng = np.random.default_rng(0)
        vals = []
        for gamma in GAMMAS:
            mu = procedural_policy(env, gamma)
            prompts = [env.train_prompts[i % 16] for i in range(10_000)]
            batch = batch_rollout(mu, prompts, env.horizon, rng)
            r = batch.rewards / env.max_reward
            vals.append((float(r.mean()), float(r.std(ddof=1) / math.sqrt(len(r)))))
        for (lo, se_lo), (hi, se_hi) in zip(vals, vals[1:]):
            assert hi - lo > -3 * math.hypot(se_lo, se_hi)
        assert vals[-1][0] > vals[0][0]


class TestMixturePolicy:
    def test_single_component_equals_procedural(self):
        env = make_planted_env(10, n_prompts=4, seed=0, n_test=2)
        p = env.train_prompts[0]
        mu = procedural_policy(env, 20.0)
        mix = mixture_base_policy(env, [20.0])
        rng = np.random.default_rng(1)
        prefix = ()
        for _ in range(6):
            np.testing.assert_allclose(
                mix.action_probs(p, prefix), mu.action_probs(p, prefix), atol=1e-12
            )
            prefix = prefix + (int(rng.integers(0, 31)),)

    def test_chain_rule_reproduces_mixture_density(self):
        # enumeration oracle on a reduced-vocab sub-instance
        import itertools

        env = small_env(vocab=3, gold=(1, 2), horizon=4)
        mix = MixtureBasePolicy(env, [2.0, 8.0, 30.0])
        p = env.train_prompts[0]
        total = 0.0
        for actions in itertools.product(range(3), repeat=4):
            direct = mix.trajectory_prob(p, actions)
            prod, prefix = 1.0, ()
            for a in actions:
                prod *= mix.action_probs(p, prefix)[a]
                prefix = prefix + (a,)
            assert prod == pytest.approx(direct, abs=1e-9)
            total += direct
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_mixture_more_heterogeneous_than_components_at_h16(self):
        env = make_planted_env(16, n_prompts=2, seed=5, n_test=1)
        mdp = env.mdp("train")
        mix_rep = heterogeneity(
            mixture_base_policy(env, GAMMAS),
            mdp,
            method="reward_variance",
            backend=MonteCarlo(10_000, np.random.default_rng(0)),
        )
        for gamma in GAMMAS:
            comp_rep = heterogeneity(
                procedural_policy(env, gamma),
                mdp,
                method="reward_variance",
                backend=MonteCarlo(10_000, np.random.default_rng(1)),
            )
            assert mix_rep.total > comp_rep.total

    def test_weights_validated(self):
        env = make_planted_env(8, n_prompts=4, seed=0, n_test=2)
        with pytest.raises(ValueError):
            mixture_base_policy(env, [5.0, 10.0], [0.9, 0.2])
        with pytest.raises(ValueError):
            mixture_base_policy(env, [])


class TestRejectionSampling:
    def test_high_gamma_succeeds_immediately(self):
        # exact first-attempt success probability >= (1000/1030)^5 = 0.8626 >= 0.85
        env = make_planted_env(10, n_prompts=8, seed=1, n_test=4)
        base = mixture_base_policy(env, [1000.0])
        rng = np.random.default_rng(0)
        prompts = [env.train_prompts[i % 8] for i in range(2000)]
        batch = batch_rollout(base, prompts, env.horizon, rng)
        assert (batch.locations > 0).mean() >= 0.85

    def test_returned_trajectories_are_correct(self):
        env = make_planted_env(10, n_prompts=8, seed=1, n_test=4)
        base = mixture_base_policy(env, GAMMAS)
        rng = np.random.default_rng(2)
        for prompt in env.train_prompts[:4]:
            out = rejection_sample_expert(base, env, prompt, max_attempts=200, rng=rng)
            assert isinstance(out, Trajectory)
            assert env.reward.location(prompt, out.actions) is not None

    def test_impossible_base_exhausts(self):
        env = make_planted_env(10, n_prompts=4, seed=1, n_test=2)
        stuck = DeterministicPolicy(31, token=0)  # padding never matches gold
        out = rejection_sample_expert(stuck, env, env.train_prompts[0], 5, np.random.default_rng(0))
        assert isinstance(out, Exhausted)
        assert out is EXHAUSTED


class TestNormalizedReturn:
    def test_values(self):
        assert normalized_return(6.0, 10) == 1.0
        assert normalized_return(3.0, 10) == 0.5
        assert normalized_return(0.0, 10) == 0.0

    def test_small_horizon_rejected(self):
        with pytest.raises(ValueError):
            normalized_return(1.0, 4)


class TestAntiConcentrationAtDerivedRadius:
    def test_mixture_tail_positive_up_to_characterization_radius(self):
        # reduced sub-instance: the regularity bound sigma^2/J^2 caps the
        # radius at which the chi^2-ball supremum is characterized; the
        # mixture keeps positive tail mass through that whole range
        env = small_env(vocab=3, gold=(1, 2), horizon=6)
        mix = MixtureBasePolicy(env, [2.0, 5.0, 20.0, 60.0])
        mdp = env.mdp("train")
        prompt = mdp.prompts[0]
        st = tree_stats_exact(mix, mdp, prompt)
        eps_max = 0.99 * st.reward_variance / st.mean_reward**2
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            rep = anti_concentration(mix, mdp, {prompt.id: frac * eps_max})
            assert rep.per_prompt[prompt.id] > 0.0
