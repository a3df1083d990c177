"""Concrete policy families for oracle-scale instances.

Trajectory-table policies realize trajectory-level reweightings (tilts,
restrictions) as explicit weighted tables per prompt, with autoregressive
conditionals recovered by prefix-mass normalization.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ._hash import hash_ints
from .mdp import MdpSpec, Policy, Prompt, Trajectory, enumerate_trajectories


class DeterministicPolicy(Policy):
    """All mass on one token at every state."""

    def __init__(self, vocab_size: int, token: int = 0):
        self.vocab_size = vocab_size
        self.token = token

    def action_probs(self, prompt, prefix):
        p = np.zeros(self.vocab_size)
        p[self.token] = 1.0
        return p


class UniformPolicy(Policy):
    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def action_probs(self, prompt, prefix):
        return np.full(self.vocab_size, 1.0 / self.vocab_size)


class RandomSoftmaxPolicy(Policy):
    """Independent pseudo-random softmax conditionals at every state.

    Logits are derived deterministically from (seed, prompt.id, prefix) via
    64-bit mixing, so the policy is a pure function with exact density and
    needs no storage.
    """

    def __init__(self, vocab_size: int, seed: int, scale: float = 1.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.scale = scale

    def action_probs(self, prompt, prefix):
        h = hash_ints(self.seed, (prompt.id, len(prefix)) + tuple(prefix))
        state_rng = np.random.default_rng(h)
        z = state_rng.standard_normal(self.vocab_size) * self.scale
        z -= z.max()
        e = np.exp(z)
        return e / e.sum()


class FirstStepBranchPolicy(Policy):
    """Plays token 0 with probability p at step 1; uniform elsewhere.

    The base policy of the two-branch instance; continuations are uniform so
    that density ratios between two such policies cancel after step 1.
    """

    def __init__(self, vocab_size: int, p: float):
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        self.vocab_size = vocab_size
        self.p = p

    def action_probs(self, prompt, prefix):
        if len(prefix) == 0:
            probs = np.zeros(self.vocab_size)
            probs[0] = self.p
            probs[1:] = (1.0 - self.p) / (self.vocab_size - 1)
            return probs
        return np.full(self.vocab_size, 1.0 / self.vocab_size)


class TableTrajectoryPolicy(Policy):
    """Explicit distribution over full-length action tuples for one prompt.

    Conditionals are prefix-mass ratios; states outside the support get a
    uniform conditional (they are reached with probability zero).
    """

    def __init__(self, vocab_size: int, prompt: Prompt, table: dict[tuple[int, ...], float]):
        total = float(sum(table.values()))
        if total <= 0:
            raise ValueError("table mass must be positive")
        self.vocab_size = vocab_size
        self.prompt = prompt
        self.table = {a: w / total for a, w in table.items() if w > 0.0}
        self._prefix_mass: dict[tuple[int, ...], float] = {}
        for actions, w in self.table.items():
            for i in range(len(actions) + 1):
                key = actions[:i]
                self._prefix_mass[key] = self._prefix_mass.get(key, 0.0) + w

    def action_probs(self, prompt, prefix):
        probs = np.zeros(self.vocab_size)
        base = self._prefix_mass.get(tuple(prefix), 0.0)
        if base <= 0.0:
            probs[:] = 1.0 / self.vocab_size
            return probs
        for a in range(self.vocab_size):
            probs[a] = self._prefix_mass.get(tuple(prefix) + (a,), 0.0) / base
        return probs

    def trajectory_prob(self, prompt, actions):
        return self.table.get(tuple(actions), 0.0)


class ReweightedPolicy(Policy):
    """Multi-prompt wrapper: per-prompt trajectory tables with a fallback.

    Prompts without a table fall back to the carrier policy.
    """

    def __init__(self, fallback: Policy, tables: dict[int, TableTrajectoryPolicy]):
        self.fallback = fallback
        self.tables = tables

    def action_probs(self, prompt, prefix):
        t = self.tables.get(prompt.id)
        if t is None:
            return self.fallback.action_probs(prompt, prefix)
        return t.action_probs(prompt, prefix)

    def trajectory_prob(self, prompt, actions):
        t = self.tables.get(prompt.id)
        if t is None:
            return self.fallback.trajectory_prob(prompt, actions)
        return t.trajectory_prob(prompt, actions)


class SwitchHorizonPolicy(Policy):
    """Follows `head` for the first h0 steps and `tail` afterwards."""

    def __init__(self, head: Policy, tail: Policy, h0: int):
        self.head = head
        self.tail = tail
        self.h0 = h0

    def action_probs(self, prompt, prefix):
        if len(prefix) < self.h0:
            return self.head.action_probs(prompt, prefix)
        return self.tail.action_probs(prompt, prefix)


def reweight_by(
    base: Policy,
    mdp: MdpSpec,
    prompt: Prompt,
    weight_fn: Callable[[Trajectory], float],
) -> TableTrajectoryPolicy:
    """Trajectory table proportional to weight_fn(tau) * base(tau | prompt)."""
    table: dict[tuple[int, ...], float] = {}
    for traj, p in enumerate_trajectories(mdp, prompt, base):
        if p <= 0.0:
            continue
        w = weight_fn(traj)
        if w > 0.0:
            table[traj.actions] = w * p
    return TableTrajectoryPolicy(mdp.vocab_size, prompt, table)
