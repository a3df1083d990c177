"""Reward families: subsequence-match rewards and synthetic bi-level rewards.

Every reward here is represented by its first-flip location; per-step values
are reconstructed on demand (the bi-level property makes the location a
sufficient statistic).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ._hash import hash_ints
from .mdp import BiLevelReward, Prompt


def kmp_automaton(gold: Sequence[int], vocab_size: int) -> np.ndarray:
    """String-matching automaton over `gold` with an absorbing full-match state.

    trans[k, a] is the length of the longest suffix of (matched-prefix + a)
    that is again a prefix of gold; state len(gold) is absorbing.
    """
    gold = tuple(gold)
    L = len(gold)
    if L == 0:
        raise ValueError("gold must be non-empty")
    if any(g < 0 or g >= vocab_size for g in gold):
        raise ValueError("gold tokens must lie in the vocab")
    trans = np.zeros((L + 1, vocab_size), dtype=np.int64)
    trans[0, gold[0]] = 1
    fallback = 0
    for k in range(1, L + 1):
        for a in range(vocab_size):
            if k < L and a == gold[k]:
                trans[k, a] = k + 1
            else:
                trans[k, a] = trans[fallback, a]
        if k < L:
            fallback = trans[fallback, gold[k]]
    trans[L, :] = L
    return trans


def match_location(trans: np.ndarray, actions: Sequence[int]) -> Optional[int]:
    """First 1-based index at which the automaton reaches its final state."""
    final = trans.shape[0] - 1
    k = 0
    for h, a in enumerate(actions, start=1):
        k = trans[k, a]
        if k == final:
            return h
    return None


class SubsequenceReward(BiLevelReward):
    """Reward 1 from the first step at which the prompt's gold contiguous
    subsequence has appeared in the emitted tokens, 0 before."""

    def __init__(self, vocab_size: int, gold_for: Callable[[Prompt], tuple[int, ...]]):
        self.vocab_size = vocab_size
        self.gold_for = gold_for
        self._automata: dict[tuple[int, ...], np.ndarray] = {}

    def automaton(self, prompt: Prompt) -> np.ndarray:
        gold = tuple(self.gold_for(prompt))
        trans = self._automata.get(gold)
        if trans is None:
            trans = kmp_automaton(gold, self.vocab_size)
            self._automata[gold] = trans
        return trans

    def location(self, prompt, actions):
        return match_location(self.automaton(prompt), actions)


class FirstTokenReward(BiLevelReward):
    """Flips at step 1 when the first action equals `token`, else never.

    The two-branch instance's reward.
    """

    def __init__(self, token: int = 0):
        self.token = token

    def location(self, prompt, actions):
        if len(actions) >= 1 and actions[0] == self.token:
            return 1
        return None


class NeverReward(BiLevelReward):
    def location(self, prompt, actions):
        return None


class RandomPrefixReward(BiLevelReward):
    """Pseudo-random prefix-measurable bi-level reward.

    Each prefix independently flips with probability `hit_prob`, decided by a
    deterministic hash of (seed, prompt.id, prefix); the location is the first
    flipped prefix along the trajectory. With `force_depth` set, any
    trajectory not yet flipped at that depth flips there, which makes the
    reward half-bi-level when force_depth <= floor(H/2).
    """

    def __init__(self, seed: int, hit_prob: float, force_depth: Optional[int] = None):
        self.seed = seed
        self.hit_prob = hit_prob
        self.force_depth = force_depth

    def _flips_at(self, prompt: Prompt, prefix: tuple[int, ...]) -> bool:
        if self.force_depth is not None and len(prefix) == self.force_depth:
            return True
        h = hash_ints(self.seed, (prompt.id, len(prefix)) + prefix)
        return (h / 2.0**64) < self.hit_prob

    def location(self, prompt, actions):
        actions = tuple(actions)
        for h in range(1, len(actions) + 1):
            if self._flips_at(prompt, actions[:h]):
                return h
        return None


class BrokenResetReward(BiLevelReward):
    """Deliberately invalid reward: pays 1 only at the flip step, 0 after.

    Exists to exercise `check_bilevel_property`'s counterexample path.
    """

    assume_bilevel = False

    def __init__(self, inner: BiLevelReward):
        self.inner = inner

    def step_reward(self, prompt, actions, h):
        loc = self.inner.location(prompt, tuple(actions[:h]))
        return 1 if loc == h else 0
