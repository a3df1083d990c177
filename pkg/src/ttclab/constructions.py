"""Executable constructions: tilted / comparator / extension policies,
complement rewards, packing families, greedy codebooks, and the two-branch
worst-case instance.

Trajectory-level reweightings are realized as explicit weighted trajectory
tables per prompt at oracle scale; autoregressive conditionals come from
prefix-mass normalization. Feasibility violations are hard errors, never
clamps: outside their regimes these objects certify nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptySupport, Infeasible, NotHalfBiLevel
from .mdp import (
    BiLevelReward,
    MdpSpec,
    Policy,
    Prompt,
    Trajectory,
    reward_distribution_exact,
    trajectory_reward,
    tree_stats_exact,
)
from .policies import (
    FirstStepBranchPolicy,
    ReweightedPolicy,
    SwitchHorizonPolicy,
    TableTrajectoryPolicy,
    reweight_by,
)
from .rewards import FirstTokenReward


def solve_tilt_theta(sigma: float, value_j: float, eps: float) -> float:
    """Tilt strength theta with theta*sigma = sqrt(eps)*(sigma + theta*J).

    Substituting back makes the tilted policy's chi^2 to its base exactly eps.
    Infeasible when sqrt(eps) >= sigma/J (the regularity condition).
    """
    if sigma <= 0:
        raise Infeasible("sigma must be positive")
    if eps < 0 or value_j < 0:
        raise ValueError("eps and J must be non-negative")
    root = math.sqrt(eps)
    denom = sigma - root * value_j
    if value_j > 0 and denom <= 0:
        raise Infeasible(f"sqrt(eps)={root:.6g} >= sigma/J={sigma / value_j:.6g}")
    return root * sigma / denom


class TiltedPolicy(Policy):
    """Trajectory density proportional to (sigma + theta*r(tau)) * base(tau|x)."""

    def __init__(self, base, theta, sigma, reward, prompt, table: TableTrajectoryPolicy):
        self.base = base
        self.theta = theta
        self.sigma = sigma
        self.reward = reward
        self.prompt = prompt
        self.table = table

    def action_probs(self, prompt, prefix):
        if prompt.id == self.prompt.id:
            return self.table.action_probs(prompt, prefix)
        return self.base.action_probs(prompt, prefix)

    def trajectory_prob(self, prompt, actions):
        if prompt.id == self.prompt.id:
            return self.table.trajectory_prob(prompt, actions)
        return self.base.trajectory_prob(prompt, actions)


def make_tilted_policy(
    base: Policy, reward: BiLevelReward, theta: float, sigma: float, mdp: MdpSpec, prompt: Prompt
) -> TiltedPolicy:
    if theta < 0 or sigma < 0:
        raise ValueError("theta and sigma must be non-negative")
    table = reweight_by(
        base, mdp, prompt, lambda traj: sigma + theta * trajectory_reward(reward, traj)
    )
    return TiltedPolicy(base, theta, sigma, reward, prompt, table)


class ComparatorPolicy(Policy):
    """Base policy restricted and renormalized to trajectories with
    r(tau) >= mean + sigma*sqrt(eps), per prompt."""

    def __init__(self, base, tables, thresholds, eps_per_prompt, support_mass):
        self.base = base
        self.tables: dict[int, TableTrajectoryPolicy] = tables
        self.thresholds: dict[int, float] = thresholds
        self.eps_per_prompt: dict[int, float] = eps_per_prompt
        self.support_mass: dict[int, float] = support_mass

    def action_probs(self, prompt, prefix):
        t = self.tables.get(prompt.id)
        if t is None:
            return self.base.action_probs(prompt, prefix)
        return t.action_probs(prompt, prefix)

    def trajectory_prob(self, prompt, actions):
        t = self.tables.get(prompt.id)
        if t is None:
            return self.base.trajectory_prob(prompt, actions)
        return t.trajectory_prob(prompt, actions)


def make_comparator_policy(
    base: Policy, reward: BiLevelReward, eps_per_prompt: dict[int, float], mdp: MdpSpec
) -> ComparatorPolicy:
    tables: dict[int, TableTrajectoryPolicy] = {}
    thresholds: dict[int, float] = {}
    mass: dict[int, float] = {}
    for prompt in mdp.prompts:
        eps = eps_per_prompt[prompt.id]
        r, p = reward_distribution_exact(mdp, prompt, base)
        mean = float(np.dot(r, p))
        sigma = math.sqrt(max(float(np.dot((r - mean) ** 2, p)), 0.0))
        thr = mean + sigma * math.sqrt(eps)
        keep = r >= thr - 1e-9
        support_mass = float(p[keep].sum())
        if support_mass <= 0.0:
            raise EmptySupport(f"no trajectory clears threshold {thr:.6g} at prompt {prompt.id}")
        tables[prompt.id] = reweight_by(
            base,
            mdp,
            prompt,
            lambda traj: 1.0 if trajectory_reward(reward, traj) >= thr - 1e-9 else 0.0,
        )
        thresholds[prompt.id] = thr
        mass[prompt.id] = support_mass
    return ComparatorPolicy(base, tables, thresholds, dict(eps_per_prompt), mass)


def extend_comparator(pi_c: Policy, base: Policy, h0: int, horizon: int) -> Policy:
    """Policy playing pi_c for the first h0 steps and base thereafter."""
    if h0 > horizon:
        raise ValueError("h0 must not exceed the extended horizon")
    return SwitchHorizonPolicy(pi_c, base, h0)


class ComplementReward(BiLevelReward):
    """Reward with relocated flips: a trajectory flipping at step t flips here
    at step H - t + 2 (never, when t = 1), so that pointwise
    complement(tau) = H - original(tau). Valid for half-bi-level originals.
    """

    def __init__(self, inner: BiLevelReward, horizon: int):
        self.inner = inner
        self.horizon = horizon

    def location(self, prompt, actions):
        loc = self.inner.location(prompt, actions)
        if loc is None or loc == 1:
            return None
        relocated = self.horizon - loc + 2
        return relocated if relocated <= len(actions) else None


def _assert_half_bilevel(reward: BiLevelReward, mdp: MdpSpec) -> int:
    """Breadth-first scan of unflipped prefixes down to floor(H/2).

    Returns the number of minimal (first-flip) states found; raises when some
    prefix of length floor(H/2) is still unflipped, i.e. some trajectory's
    bi-level would come after floor(H/2) or never.
    """
    half = mdp.horizon // 2
    V = mdp.vocab_size
    if V**half * len(mdp.prompts) > mdp.enum_cap:
        raise Infeasible("half-depth scan exceeds enumeration cap")
    n_minimal = 0
    for prompt in mdp.prompts:
        frontier: list[tuple[int, ...]] = [()]
        for depth in range(1, half + 1):
            nxt: list[tuple[int, ...]] = []
            for pfx in frontier:
                for a in range(V):
                    child = pfx + (a,)
                    if reward.location(prompt, child) == depth:
                        n_minimal += 1
                    else:
                        nxt.append(child)
            frontier = nxt
        if frontier:
            raise NotHalfBiLevel(
                f"prefix {frontier[0]} of prompt {prompt.id} is unflipped at depth {half}"
            )
    return n_minimal


def complement_reward(reward: BiLevelReward, mdp: MdpSpec) -> ComplementReward:
    """The flip-relocating reward: E[complement] = H - E[original] and equal
    variance, for every policy. Requires every trajectory to flip by H/2."""
    _assert_half_bilevel(reward, mdp)
    return ComplementReward(reward, mdp.horizon)


@dataclass(frozen=True)
class Codebook:
    k: int
    words: tuple[int, ...]  # bitmasks
    min_distance_required: int

    @property
    def size(self) -> int:
        return len(self.words)

    def bits(self, word: int) -> tuple[int, ...]:
        return tuple((word >> i) & 1 for i in range(self.k))


def gilbert_varshamov_codebook(k: int, max_size: Optional[int] = None) -> Codebook:
    """Greedy lexicographic binary code with pairwise Hamming distance >= ceil(k/4)."""
    if k < 4:
        raise ValueError("k must be >= 4")
    d = math.ceil(k / 4)
    kept: list[int] = []
    for cand in range(2**k):
        ok = True
        for w in kept:
            if (cand ^ w).bit_count() < d:
                ok = False
                break
        if ok:
            kept.append(cand)
            if max_size is not None and len(kept) >= max_size:
                break
    return Codebook(k=k, words=tuple(kept), min_distance_required=d)


def verify_codebook(cb: Codebook) -> int:
    """Exhaustive pairwise check; returns the achieved minimum distance."""
    best = cb.k
    for i, a in enumerate(cb.words):
        for b in cb.words[i + 1 :]:
            dist = (a ^ b).bit_count()
            if dist < cb.min_distance_required:
                raise AssertionError(f"words {a:0{cb.k}b}, {b:0{cb.k}b} at distance {dist}")
            best = min(best, dist)
    return best


class PartitionSwappedReward(BiLevelReward):
    """Original reward on some prompts, the complement reward on the rest."""

    def __init__(self, original: BiLevelReward, complement: ComplementReward, swapped_ids: set[int]):
        self.original = original
        self.complement = complement
        self.swapped_ids = swapped_ids

    def location(self, prompt, actions):
        if prompt.id in self.swapped_ids:
            return self.complement.location(prompt, actions)
        return self.original.location(prompt, actions)


@dataclass
class PackingFamily:
    """2^k-style policy/reward family indexed by codeword bitmasks."""

    k: int
    words: tuple[int, ...]
    partition: list[set[int]]
    xi: float
    policies: dict[int, Policy]
    rewards: dict[int, BiLevelReward]
    theta: dict[int, float]
    sigma: dict[int, float]
    value: dict[int, float]

    def part_of(self, prompt_id: int) -> int:
        for i, part in enumerate(self.partition):
            if prompt_id in part:
                return i
        raise KeyError(prompt_id)


def make_packing_family(
    reference: Policy,
    reward: BiLevelReward,
    partition: list[set[int]],
    xi: float,
    mdp: MdpSpec,
    words: Optional[Sequence[int]] = None,
) -> PackingFamily:
    """Tilt the reference on parts with z_i = 1 and swap in the complement
    reward on parts with z_i = 0, for each codeword z."""
    k = len(partition)
    sigma: dict[int, float] = {}
    value: dict[int, float] = {}
    theta: dict[int, float] = {}
    for prompt in mdp.prompts:
        stats = tree_stats_exact(reference, mdp, prompt)
        sigma[prompt.id] = math.sqrt(stats.reward_variance)
        value[prompt.id] = stats.mean_reward
    bound = min(
        (sigma[i] ** 2 / (4.0 * value[i] ** 2) if value[i] > 0 else math.inf)
        for i in sigma
    )
    if xi < 0 or xi > bound:
        raise Infeasible(f"xi={xi:.6g} outside [0, {bound:.6g}]")
    for pid in sigma:
        theta[pid] = solve_tilt_theta(sigma[pid], value[pid], xi) if xi > 0 else 0.0
    comp = complement_reward(reward, mdp)
    if words is None:
        # ceil(k/4) = 1 for k < 4, so the full hypercube is a valid codebook
        words = tuple(range(2**k)) if k < 4 else gilbert_varshamov_codebook(k).words

    prompt_by_id = {p.id: p for p in mdp.prompts}
    tilt_tables: dict[int, TableTrajectoryPolicy] = {}
    for pid, prompt in prompt_by_id.items():
        tilt_tables[pid] = reweight_by(
            reference,
            mdp,
            prompt,
            lambda traj, _pid=pid: sigma[_pid] + theta[_pid] * trajectory_reward(reward, traj),
        )

    policies: dict[int, Policy] = {}
    rewards: dict[int, BiLevelReward] = {}
    for z in words:
        tilted_ids = set()
        swapped_ids = set()
        for i, part in enumerate(partition):
            if (z >> i) & 1:
                tilted_ids |= part
            else:
                swapped_ids |= part
        policies[z] = ReweightedPolicy(
            reference, {pid: tilt_tables[pid] for pid in tilted_ids}
        )
        rewards[z] = PartitionSwappedReward(reward, comp, swapped_ids)
    return PackingFamily(
        k=k,
        words=tuple(words),
        partition=[set(p) for p in partition],
        xi=xi,
        policies=policies,
        rewards=rewards,
        theta=theta,
        sigma=sigma,
        value=value,
    )


def two_branch_instance(p: float, horizon: int, vocab_size: int = 2) -> tuple[MdpSpec, Policy]:
    """Single-prompt MDP: token 0 at step 1 hits a bi-level forever, anything
    else earns 0 forever; the base plays token 0 with probability p."""
    prompt = Prompt(id=0, tokens=())
    mdp = MdpSpec(
        vocab_size=vocab_size,
        horizon=horizon,
        prompts=(prompt,),
        prompt_dist=(1.0,),
        reward=FirstTokenReward(0),
    )
    return mdp, FirstStepBranchPolicy(vocab_size, p)
