"""Contextual planted-subsequence environment: gold-subsequence reward,
procedural policies, the mixture base policy, and rejection-sampled experts.

Prompts are length-5 sequences over {1..10}; the gold subsequence is
(g(x_1),...,g(x_5)) with g(x) = 2x + 5 over a 31-token vocab whose token 0 is
padding. A trajectory is correct once the gold subsequence has appeared
contiguously in its emitted tokens; the per-step reward is 1 from that point
on, so the maximum return at horizon H is H - 4.

Policies here implement a batched rollout protocol (batch_start/batch_step)
on top of the scalar Policy interface; the batched path is what the training
harness uses, the scalar path is what oracle-scale enumeration uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mdp import MdpSpec, Policy, Prompt, Trajectory
from .rewards import SubsequenceReward

VOCAB_SIZE = 31
PAD_TOKEN = 0
PROMPT_LENGTH = 5
PROMPT_TOKEN_MIN = 1
PROMPT_TOKEN_MAX = 10
GOLD_LENGTH = 5


def gold_map(x: int) -> int:
    return 2 * x + 5


def gold_subsequence(prompt: Prompt) -> tuple[int, ...]:
    return tuple(gold_map(x) for x in prompt.tokens)


class Exhausted:
    """Sentinel: rejection sampling ran out of attempts."""

    def __repr__(self):
        return "EXHAUSTED"


EXHAUSTED = Exhausted()


@dataclass(frozen=True)
class PlantedEnvSpec:
    horizon: int
    train_prompts: tuple[Prompt, ...]
    test_prompts: tuple[Prompt, ...]
    seed: int
    vocab_size: int = VOCAB_SIZE
    pad_token: int = PAD_TOKEN
    reward: SubsequenceReward = field(default=None)  # set in make_planted_env

    @property
    def max_reward(self) -> int:
        return self.horizon - (GOLD_LENGTH - 1)

    def prompts(self, split: str) -> tuple[Prompt, ...]:
        if split == "train":
            return self.train_prompts
        if split == "test":
            return self.test_prompts
        if split == "all":
            return self.train_prompts + self.test_prompts
        raise ValueError(f"unknown split {split!r}")

    def mdp(self, split: str = "train") -> MdpSpec:
        prompts = self.prompts(split)
        dist = tuple([1.0 / len(prompts)] * len(prompts))
        return MdpSpec(self.vocab_size, self.horizon, prompts, dist, self.reward)

    def automaton(self, prompt: Prompt) -> np.ndarray:
        return self.reward.automaton(prompt)


def make_planted_env(
    horizon: int, n_prompts: int = 512, seed: int = 0, n_test: Optional[int] = None
) -> PlantedEnvSpec:
    """Sample disjoint train/test prompt sets and attach the match reward."""
    if horizon < GOLD_LENGTH:
        raise ValueError(f"horizon must be >= {GOLD_LENGTH} to plant the subsequence")
    if n_test is None:
        n_test = max(1, n_prompts // 2)
    rng = np.random.default_rng(seed)
    span = PROMPT_TOKEN_MAX - PROMPT_TOKEN_MIN + 1
    universe = span**PROMPT_LENGTH
    codes = rng.choice(universe, size=n_prompts + n_test, replace=False)
    prompts = []
    for pid, code in enumerate(codes):
        toks = []
        c = int(code)
        for _ in range(PROMPT_LENGTH):
            toks.append(PROMPT_TOKEN_MIN + c % span)
            c //= span
        prompts.append(Prompt(id=pid, tokens=tuple(toks)))
    reward = SubsequenceReward(VOCAB_SIZE, gold_subsequence)
    return PlantedEnvSpec(
        horizon=horizon,
        train_prompts=tuple(prompts[:n_prompts]),
        test_prompts=tuple(prompts[n_prompts:]),
        seed=seed,
        reward=reward,
    )


def subsequence_mdp(
    vocab_size: int,
    horizon: int,
    gold_by_prompt: dict[int, tuple[int, ...]],
    prompt_tokens: Optional[dict[int, tuple[int, ...]]] = None,
) -> MdpSpec:
    """Reduced-vocab match instance for oracle-scale certification."""
    golds = dict(gold_by_prompt)
    prompts = tuple(
        Prompt(id=pid, tokens=(prompt_tokens or {}).get(pid, ()))
        for pid in sorted(golds)
    )
    reward = SubsequenceReward(vocab_size, lambda p: golds[p.id])
    dist = tuple([1.0 / len(prompts)] * len(prompts))
    return MdpSpec(vocab_size, horizon, prompts, dist, reward)


def normalized_return(value_j: float, horizon: int) -> float:
    """J / (H - 4): puts different horizons on one scale."""
    if horizon < GOLD_LENGTH:
        raise ValueError(f"horizon must be >= {GOLD_LENGTH}")
    return value_j / (horizon - (GOLD_LENGTH - 1))


class _BatchState:
    """Shared per-rollout-batch state for automaton-structured policies."""

    __slots__ = ("prompts", "trans", "gold", "k", "loc", "t", "weights", "record", "steps")

    def __init__(self, prompts, trans, gold, n_components):
        B = len(prompts)
        self.prompts = prompts
        self.trans = trans  # (B, L+1, V)
        self.gold = gold  # (B, L)
        self.k = np.zeros(B, dtype=np.int64)
        self.loc = np.zeros(B, dtype=np.int64)  # 0 = no match yet
        self.t = 0
        self.weights = np.full((B, n_components), 1.0 / n_components)
        self.record = False
        self.steps: list[dict] = []


class MixtureBasePolicy(Policy):
    """Mixture of procedural policies sharing the prompt's match automaton.

    Sampling draws one component per episode implicitly: per-token
    conditionals use the exact Bayesian posterior over components given the
    prefix, which reproduces the component-sum trajectory density.
    """

    def __init__(self, env: PlantedEnvSpec, gammas: Sequence[float], weights: Optional[Sequence[float]] = None):
        if len(gammas) == 0 or any(g <= 0 for g in gammas):
            raise ValueError("gammas must be positive")
        self.env = env
        self.gammas = np.asarray(gammas, dtype=float)
        if weights is None:
            weights = np.full(len(gammas), 1.0 / len(gammas))
        self.weights = np.asarray(weights, dtype=float)
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights < 0).any():
            raise ValueError("weights must form a probability simplex")
        V = env.vocab_size
        self._p_boost = self.gammas / (self.gammas + V - 1)  # (C,)
        self._p_other = 1.0 / (self.gammas + V - 1)  # (C,)

    @classmethod
    def single(cls, env: PlantedEnvSpec, gamma: float) -> "MixtureBasePolicy":
        return cls(env, [gamma], [1.0])

    # scalar interface -----------------------------------------------------
    def _posterior_and_state(self, prompt, prefix):
        trans = self.env.automaton(prompt)
        gold = gold_for_policy(self.env, prompt)
        L = len(gold)
        w = self.weights.copy()
        k = 0
        for a in prefix:
            boosted = gold[k] if k < L else self.env.pad_token
            lik = self._p_boost if a == boosted else self._p_other
            w = w * lik
            s = w.sum()
            if s <= 0.0:
                w = np.full_like(w, 1.0 / len(w))
            else:
                w = w / s
            k = int(trans[k, a])
        return w, k, gold, L

    def action_probs(self, prompt, prefix):
        w, k, gold, L = self._posterior_and_state(prompt, tuple(prefix))
        boosted = gold[k] if k < L else self.env.pad_token
        alpha = float(np.dot(w, self._p_other))
        beta = float(np.dot(w, self._p_boost - self._p_other))
        probs = np.full(self.env.vocab_size, alpha)
        probs[boosted] += beta
        return probs

    def trajectory_prob(self, prompt, actions):
        trans = self.env.automaton(prompt)
        gold = gold_for_policy(self.env, prompt)
        L = len(gold)
        per_comp = self.weights.copy()
        k = 0
        for a in actions:
            boosted = gold[k] if k < L else self.env.pad_token
            lik = self._p_boost if a == boosted else self._p_other
            per_comp = per_comp * lik
            k = int(trans[k, a])
        return float(per_comp.sum())

    # batched interface ----------------------------------------------------
    def batch_start(self, prompts: Sequence[Prompt], record: bool = False) -> _BatchState:
        trans = np.stack([self.env.automaton(p) for p in prompts])
        gold = np.stack([np.asarray(gold_for_policy(self.env, p)) for p in prompts])
        st = _BatchState(list(prompts), trans, gold, len(self.gammas))
        st.record = record
        return st

    def compact_probs(self, st: _BatchState):
        """Mixture conditional as (alpha, beta, boosted): alpha everywhere plus
        beta extra mass on the boosted token."""
        L = st.gold.shape[1]
        boosted = np.where(st.k < L, st.gold[np.arange(len(st.prompts)), np.minimum(st.k, L - 1)], self.env.pad_token)
        alpha = st.weights @ self._p_other
        beta = st.weights @ (self._p_boost - self._p_other)
        return alpha, beta, boosted

    def advance(self, st: _BatchState, tokens: np.ndarray) -> None:
        B = len(st.prompts)
        L = st.gold.shape[1]
        boosted = np.where(st.k < L, st.gold[np.arange(B), np.minimum(st.k, L - 1)], self.env.pad_token)
        is_boost = tokens == boosted
        lik = np.where(is_boost[:, None], self._p_boost[None, :], self._p_other[None, :])
        st.weights = st.weights * lik
        st.weights /= st.weights.sum(axis=1, keepdims=True)
        st.k = st.trans[np.arange(B), st.k, tokens]
        st.t += 1
        st.loc = np.where((st.loc == 0) & (st.k == L), st.t, st.loc)

    def batch_step(self, st: _BatchState, rng: np.random.Generator) -> np.ndarray:
        alpha, beta, boosted = self.compact_probs(st)
        B = len(st.prompts)
        u = rng.random(B)
        uniform_draw = rng.integers(0, self.env.vocab_size, size=B)
        tokens = np.where(u < beta, boosted, uniform_draw).astype(np.int64)
        if st.record:
            st.steps.append({"alpha": alpha, "beta": beta, "boosted": boosted, "k": st.k.copy()})
        self.advance(st, tokens)
        return tokens


def gold_for_policy(env: PlantedEnvSpec, prompt: Prompt) -> tuple[int, ...]:
    return tuple(env.reward.gold_for(prompt))


class ProceduralPolicy(Policy):
    """Sharpness-gamma policy: boosts the next gold token (or padding once the
    gold subsequence has been produced) with probability gamma/(gamma+V-1)."""

    def __init__(self, env: PlantedEnvSpec, gamma: float):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.env = env
        self.gamma = gamma
        self._mix = MixtureBasePolicy.single(env, gamma)

    def action_probs(self, prompt, prefix):
        return self._mix.action_probs(prompt, prefix)

    def trajectory_prob(self, prompt, actions):
        return self._mix.trajectory_prob(prompt, actions)

    def batch_start(self, prompts, record: bool = False):
        return self._mix.batch_start(prompts, record)

    def batch_step(self, st, rng):
        return self._mix.batch_step(st, rng)

    def compact_probs(self, st):
        return self._mix.compact_probs(st)

    def advance(self, st, tokens):
        return self._mix.advance(st, tokens)


def procedural_policy(env: PlantedEnvSpec, gamma: float) -> ProceduralPolicy:
    return ProceduralPolicy(env, gamma)


def mixture_base_policy(
    env: PlantedEnvSpec, gammas: Sequence[float], weights: Optional[Sequence[float]] = None
) -> MixtureBasePolicy:
    return MixtureBasePolicy(env, gammas, weights)


@dataclass
class RolloutBatch:
    prompts: list[Prompt]
    actions: np.ndarray  # (B, H) int64
    locations: np.ndarray  # (B,) int64, 0 = no match
    state: object = None

    @property
    def rewards(self) -> np.ndarray:
        H = self.actions.shape[1]
        return np.where(self.locations > 0, H - self.locations + 1, 0)


def batch_rollout(
    policy, prompts: Sequence[Prompt], horizon: int, rng: np.random.Generator, record: bool = False
) -> RolloutBatch:
    """Vectorized rollouts for policies implementing the batch protocol."""
    st = policy.batch_start(list(prompts), record=record)
    cols = []
    for _ in range(horizon):
        cols.append(policy.batch_step(st, rng))
    actions = np.stack(cols, axis=1)
    return RolloutBatch(list(prompts), actions, st.loc.copy(), state=st)


def rejection_sample_expert(
    base: Policy,
    env: PlantedEnvSpec,
    prompt: Prompt,
    max_attempts: int,
    rng: np.random.Generator,
):
    """First sampled trajectory with positive reward, or EXHAUSTED."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    for _ in range(max_attempts):
        if hasattr(base, "batch_start"):
            batch = batch_rollout(base, [prompt], env.horizon, rng)
            actions = tuple(int(a) for a in batch.actions[0])
            loc = int(batch.locations[0])
        else:
            prefix: tuple[int, ...] = ()
            for _ in range(env.horizon):
                prefix = prefix + (base.sample_action(prompt, prefix, rng),)
            actions = prefix
            loc = env.reward.location(prompt, actions) or 0
        if loc > 0:
            return Trajectory(prompt, actions)
    return EXHAUSTED


def batch_rejection_sample(
    base,
    env: PlantedEnvSpec,
    prompts: Sequence[Prompt],
    max_attempts: int,
    rng: np.random.Generator,
) -> list:
    """Vectorized rejection sampling; entries are Trajectory or EXHAUSTED."""
    out: list = [EXHAUSTED] * len(prompts)
    pending = list(range(len(prompts)))
    for _ in range(max_attempts):
        if not pending:
            break
        batch = batch_rollout(base, [prompts[i] for i in pending], env.horizon, rng)
        still = []
        for row, i in enumerate(pending):
            if batch.locations[row] > 0:
                out[i] = Trajectory(prompts[i], tuple(int(a) for a in batch.actions[row]))
            else:
                still.append(i)
        pending = still
    return out
