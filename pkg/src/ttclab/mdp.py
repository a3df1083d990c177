"""Autoregressive token MDP: trajectories, bi-level rewards, rollouts, exact
enumeration, and value/Q computation.

States are (prompt, action-prefix) pairs; transitions are concatenation, so
the only randomness anywhere is in policies. Rewards are per-step 0/1 and,
for every concrete reward here, non-decreasing along a trajectory ("bi-level"),
which makes the first flip index a sufficient statistic for the whole reward
sequence.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import CapExceeded

DEFAULT_ENUM_CAP = 2**22


@dataclass(frozen=True)
class Prompt:
    """A fixed input problem: token sequence plus a stable integer index."""

    id: int
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class Trajectory:
    prompt: Prompt
    actions: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.actions)


class BiLevelReward(ABC):
    """Per-step 0/1 reward, binary and non-decreasing along every trajectory.

    Concrete classes override at least one of `location` / `step_reward`;
    each has a default implementation in terms of the other. `step_reward`
    evaluates r(s_h, a_h), which for an autoregressive MDP is a function of
    the action prefix a_1..a_h.

    `assume_bilevel` is True for every honest reward in this package; it
    gates absorption shortcuts in exact value computation. Deliberately
    broken rewards (used to exercise `check_bilevel_property`) set it False.
    """

    assume_bilevel: bool = True

    def location(self, prompt: Prompt, actions: Sequence[int]) -> Optional[int]:
        """First 1-based step h with r(s_h, a_h) = 1, or None."""
        for h in range(1, len(actions) + 1):
            if self.step_reward(prompt, actions, h) == 1:
                return h
        return None

    def step_reward(self, prompt: Prompt, actions: Sequence[int], h: int) -> int:
        loc = self.location(prompt, tuple(actions[:h]))
        return 0 if loc is None else 1


class Policy(ABC):
    """Autoregressive conditional token distribution."""

    supports_exact_density: bool = True

    @abstractmethod
    def action_probs(self, prompt: Prompt, prefix: tuple[int, ...]) -> np.ndarray:
        """Conditional distribution over the action vocab at state (prompt, prefix)."""

    def sample_action(self, prompt: Prompt, prefix: tuple[int, ...], rng: np.random.Generator) -> int:
        p = self.action_probs(prompt, prefix)
        return int(rng.choice(len(p), p=p))

    def trajectory_prob(self, prompt: Prompt, actions: Sequence[int]) -> float:
        prob = 1.0
        prefix: tuple[int, ...] = ()
        for a in actions:
            prob *= float(self.action_probs(prompt, prefix)[a])
            if prob == 0.0:
                return 0.0
            prefix = prefix + (a,)
        return prob


@dataclass(frozen=True)
class MdpSpec:
    """Finite-horizon token MDP with deterministic concatenation transitions."""

    vocab_size: int
    horizon: int
    prompts: tuple[Prompt, ...]
    prompt_dist: tuple[float, ...]
    reward: BiLevelReward
    enum_cap: int = DEFAULT_ENUM_CAP

    def __post_init__(self):
        if self.vocab_size <= 0 or self.horizon <= 0:
            raise ValueError("vocab_size and horizon must be positive")
        if len(self.prompts) != len(self.prompt_dist):
            raise ValueError("prompt_dist length mismatch")
        w = np.asarray(self.prompt_dist, dtype=float)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("prompt_dist must be non-negative and sum to 1 +/- 1e-12")

    def check_enumerable(self, prompt_count: int = 1) -> None:
        if self.vocab_size**self.horizon * prompt_count > self.enum_cap:
            raise CapExceeded(
                f"{self.vocab_size}^{self.horizon} leaves exceed cap {self.enum_cap}"
            )


def single_prompt_mdp(vocab_size, horizon, reward, prompt_tokens=(), enum_cap=DEFAULT_ENUM_CAP) -> MdpSpec:
    """Convenience constructor for one-prompt oracle instances."""
    p = Prompt(id=0, tokens=tuple(prompt_tokens))
    return MdpSpec(vocab_size, horizon, (p,), (1.0,), reward, enum_cap)


def rollout(policy: Policy, mdp: MdpSpec, prompt: Prompt, rng: np.random.Generator) -> Trajectory:
    """Sample a length-H trajectory autoregressively."""
    prefix: tuple[int, ...] = ()
    for _ in range(mdp.horizon):
        a = policy.sample_action(prompt, prefix, rng)
        prefix = prefix + (a,)
    return Trajectory(prompt, prefix)


def bilevel_location(reward: BiLevelReward, trajectory: Trajectory) -> Optional[int]:
    """First step h with r(s_h, a_h) = 1; None when reward is 0 throughout."""
    return reward.location(trajectory.prompt, trajectory.actions)


def trajectory_reward(reward: BiLevelReward, trajectory: Trajectory) -> int:
    """Cumulative reward sum_h r(s_h, a_h) = H - location + 1, or 0.

    Relies on the bi-level property; per-step rewards after the first flip
    are all 1.
    """
    h = len(trajectory.actions)
    loc = reward.location(trajectory.prompt, trajectory.actions)
    return 0 if loc is None else h - loc + 1


def enumerate_trajectories(
    mdp: MdpSpec, prompt: Prompt, policy: Policy
) -> Iterator[tuple[Trajectory, float]]:
    """All vocab^H trajectories with their probabilities, lexicographic order."""
    mdp.check_enumerable()
    if not policy.supports_exact_density:
        raise ValueError("enumeration requires a policy with exact density")
    V, H = mdp.vocab_size, mdp.horizon

    def rec(prefix: tuple[int, ...], prob: float):
        if len(prefix) == H:
            yield Trajectory(prompt, prefix), prob
            return
        conds = policy.action_probs(prompt, prefix) if prob > 0.0 else np.zeros(V)
        for a in range(V):
            yield from rec(prefix + (a,), prob * float(conds[a]) if prob > 0.0 else 0.0)

    yield from rec((), 1.0)


def reward_distribution_exact(
    mdp: MdpSpec, prompt: Prompt, policy: Policy
) -> tuple[np.ndarray, np.ndarray]:
    """(rewards, probabilities) over all trajectories for one prompt."""
    rewards, probs = [], []
    for traj, p in enumerate_trajectories(mdp, prompt, policy):
        rewards.append(trajectory_reward(mdp.reward, traj))
        probs.append(p)
    return np.asarray(rewards, dtype=float), np.asarray(probs, dtype=float)


def value_exact(policy: Policy, mdp: MdpSpec) -> float:
    """J_r(pi) = E_{x~rho} E_{tau~pi} [r(tau)] by exact enumeration."""
    mdp.check_enumerable()
    total = 0.0
    for prompt, w in zip(mdp.prompts, mdp.prompt_dist):
        if w == 0.0:
            continue
        r, p = reward_distribution_exact(mdp, prompt, policy)
        total += w * float(np.dot(r, p))
    return total


def value_mc(
    policy: Policy, mdp: MdpSpec, n_samples: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Unbiased sample mean of r(tau) with standard error of the mean."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    weights = np.asarray(mdp.prompt_dist)
    idx = rng.choice(len(mdp.prompts), size=n_samples, p=weights)
    vals = np.empty(n_samples)
    for i, j in enumerate(idx):
        traj = rollout(policy, mdp, mdp.prompts[j], rng)
        vals[i] = trajectory_reward(mdp.reward, traj)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


def q_value_exact(
    policy: Policy, mdp: MdpSpec, prompt: Prompt, prefix: tuple[int, ...], action: int
) -> float:
    """Expected reward-to-go from (state, action) under policy continuation.

    The state is at step h = len(prefix) + 1; returns E[sum_{t=h}^H r_t | s_h, a_h].
    """
    H, V = mdp.horizon, mdp.vocab_size
    h = len(prefix) + 1
    if h > H:
        raise ValueError("state is beyond the horizon")
    if V ** (H - h) > mdp.enum_cap:
        raise CapExceeded("suffix sub-tree too large")
    reward = mdp.reward
    first = reward.step_reward(prompt, prefix + (action,), h)
    if first == 1 and reward.assume_bilevel:
        return float(H - h + 1)

    def rec(pfx: tuple[int, ...], step: int, hit: bool) -> float:
        # expected sum of rewards over steps step..H given prefix pfx of length step-1
        if step > H:
            return 0.0
        if hit and reward.assume_bilevel:
            return float(H - step + 1)
        conds = policy.action_probs(prompt, pfx)
        out = 0.0
        for a in range(V):
            if conds[a] == 0.0:
                continue
            r = reward.step_reward(prompt, pfx + (a,), step)
            out += conds[a] * (r + rec(pfx + (a,), step + 1, hit or r == 1))
        return float(out)

    return first + rec(prefix + (action,), h + 1, first == 1)


@dataclass
class TreeStats:
    """Exact per-prompt statistics from one pass over the trajectory tree."""

    mean_reward: float
    second_moment: float
    sum_expected_q_variance: float

    @property
    def reward_variance(self) -> float:
        return max(self.second_moment - self.mean_reward**2, 0.0)


def tree_stats_exact(policy: Policy, mdp: MdpSpec, prompt: Prompt) -> TreeStats:
    """One recursive pass computing E[r], E[r^2] and sum_h E_{d_h}[Var_a Q].

    Prunes subtrees below a bi-level flip (all Q-values there are forced),
    which is exact for rewards satisfying the bi-level property.
    """
    mdp.check_enumerable()
    H, V = mdp.horizon, mdp.vocab_size
    reward = mdp.reward
    if not reward.assume_bilevel:
        raise ValueError("tree_stats_exact requires a bi-level reward")

    def rec(prefix: tuple[int, ...], step: int, hit: bool):
        # returns (E[G], E[G^2], sum of E Var Q over this subtree), where
        # G = sum_{t=step}^{H} r_t given the state (prompt, prefix).
        if step > H:
            return 0.0, 0.0, 0.0
        if hit:
            g = float(H - step + 1)
            return g, g * g, 0.0
        conds = policy.action_probs(prompt, prefix)
        q = np.zeros(V)
        g2 = np.zeros(V)
        ev_below = 0.0
        for a in range(V):
            r = reward.step_reward(prompt, prefix + (a,), step)
            eg, eg2, ev = rec(prefix + (a,), step + 1, r == 1)
            q[a] = r + eg
            g2[a] = r * r + 2.0 * r * eg + eg2
            ev_below += conds[a] * ev
        eg_here = float(np.dot(conds, q))
        eg2_here = float(np.dot(conds, g2))
        var_q = float(np.dot(conds, q * q)) - eg_here**2
        return eg_here, eg2_here, ev_below + max(var_q, 0.0)

    eg, eg2, ev = rec((), 1, False)
    return TreeStats(mean_reward=eg, second_moment=eg2, sum_expected_q_variance=ev)


@dataclass
class BiLevelCheckResult:
    passed: bool
    checked: int
    counterexample: Optional[Trajectory] = None
    step_rewards: Optional[list[int]] = None


def _scan_trajectory(reward: BiLevelReward, traj: Trajectory) -> Optional[list[int]]:
    """Per-step rewards if the trajectory violates the bi-level property, else None."""
    seq = [reward.step_reward(traj.prompt, traj.actions, h) for h in range(1, len(traj) + 1)]
    prev = 0
    for r in seq:
        if r not in (0, 1) or r < prev:
            return seq
        prev = r
    return None


def check_bilevel_property(
    reward: BiLevelReward,
    mdp: MdpSpec,
    mode: str = "exhaustive",
    budget: int = 1000,
    rng: Optional[np.random.Generator] = None,
) -> BiLevelCheckResult:
    """Verify binary non-decreasing per-step rewards on every checked trajectory."""
    checked = 0
    if mode == "exhaustive":
        mdp.check_enumerable(prompt_count=len(mdp.prompts))
        V, H = mdp.vocab_size, mdp.horizon
        for prompt in mdp.prompts:
            actions = [0] * H
            # odometer over all V^H action tuples
            while True:
                traj = Trajectory(prompt, tuple(actions))
                seq = _scan_trajectory(reward, traj)
                checked += 1
                if seq is not None:
                    return BiLevelCheckResult(False, checked, traj, seq)
                i = H - 1
                while i >= 0 and actions[i] == V - 1:
                    actions[i] = 0
                    i -= 1
                if i < 0:
                    break
                actions[i] += 1
        return BiLevelCheckResult(True, checked)
    if mode == "sampled":
        if rng is None:
            rng = np.random.default_rng(0)
        for _ in range(budget):
            prompt = mdp.prompts[rng.integers(len(mdp.prompts))]
            actions = tuple(int(a) for a in rng.integers(0, mdp.vocab_size, size=mdp.horizon))
            traj = Trajectory(prompt, actions)
            seq = _scan_trajectory(reward, traj)
            checked += 1
            if seq is not None:
                return BiLevelCheckResult(False, checked, traj, seq)
        return BiLevelCheckResult(True, checked)
    raise ValueError(f"unknown mode {mode!r}")
