"""Divergences, heterogeneity, anti-concentration, coverage, and the
lower-bound partition score.

Exact backends enumerate the trajectory tree; Monte-Carlo backends sample
rollouts and, for density-ratio divergences, use self-normalized clipped
importance weights.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

from .errors import AbsoluteContinuityViolated, PartitionInvalid
from .mdp import (
    MdpSpec,
    Policy,
    Prompt,
    enumerate_trajectories,
    reward_distribution_exact,
    rollout,
    trajectory_reward,
    tree_stats_exact,
)


class DivergenceKind(Enum):
    CHI_SQUARED = "chi_squared"
    KL = "kl"
    TV = "tv"
    HELLINGER_SQUARED = "hellinger_squared"


@dataclass(frozen=True)
class MonteCarlo:
    """Monte-Carlo backend configuration."""

    n_samples: int
    rng: np.random.Generator
    weight_clip: float = 1e3


Backend = Union[str, MonteCarlo]


@dataclass
class McEstimate:
    value: float
    std_error: float
    clip_fraction: float

    @property
    def bias_flagged(self) -> bool:
        return self.clip_fraction > 1e-3


@dataclass
class HeterogeneityReport:
    """Per-prompt reward variance (= summed expected Q-variance) and aggregates."""

    per_prompt: dict[int, float]
    rho: dict[int, float]
    total: float
    mean: float
    median: float

    def sigma(self, prompt_id: int) -> float:
        return math.sqrt(max(self.per_prompt[prompt_id], 0.0))


@dataclass
class AntiConcReport:
    per_prompt: dict[int, float]
    thresholds: dict[int, float]
    epsilons: dict[int, float]
    c_min: float


def _joint_probs(p: Policy, q: Policy, mdp: MdpSpec, prompt: Prompt):
    """Aligned probability vectors over all trajectories of one prompt."""
    pv, qv = [], []
    for traj, qp in enumerate_trajectories(mdp, prompt, q):
        qv.append(qp)
        pv.append(p.trajectory_prob(prompt, traj.actions))
    return np.asarray(pv), np.asarray(qv)


def _divergence_from_arrays(kind: DivergenceKind, pv: np.ndarray, qv: np.ndarray) -> float:
    """Divergence values; returns inf instead of raising on support violation."""
    if kind is DivergenceKind.TV:
        return 0.5 * float(np.abs(pv - qv).sum())
    if kind is DivergenceKind.HELLINGER_SQUARED:
        return float(((np.sqrt(pv) - np.sqrt(qv)) ** 2).sum())
    violated = bool(((qv == 0.0) & (pv > 0.0)).any())
    if kind is DivergenceKind.CHI_SQUARED:
        if violated:
            return math.inf
        mask = qv > 0.0
        return float((pv[mask] ** 2 / qv[mask]).sum() - 1.0)
    if kind is DivergenceKind.KL:
        if violated:
            return math.inf
        mask = pv > 0.0
        return float((pv[mask] * np.log(pv[mask] / qv[mask])).sum())
    raise ValueError(f"unknown kind {kind}")


def _mc_divergence(
    kind: DivergenceKind, p: Policy, q: Policy, mdp: MdpSpec, prompt: Prompt, mc: MonteCarlo
) -> McEstimate:
    """Sampled estimate. chi^2 / TV / Hellinger sample from q; KL samples from p."""
    n = mc.n_samples
    sample_from = p if kind is DivergenceKind.KL else q
    ratios = np.empty(n)
    for i in range(n):
        traj = rollout(sample_from, mdp, prompt, mc.rng)
        pp = p.trajectory_prob(prompt, traj.actions)
        qp = q.trajectory_prob(prompt, traj.actions)
        if kind is DivergenceKind.KL:
            if qp == 0.0:
                ratios[i] = math.inf
                continue
            ratios[i] = pp / qp
        else:
            ratios[i] = math.inf if qp == 0.0 else pp / qp
    if np.isinf(ratios).any():
        raise AbsoluteContinuityViolated("sampled a trajectory outside the denominator support")
    clipped = np.minimum(ratios, mc.weight_clip)
    clip_fraction = float((ratios > mc.weight_clip).mean())
    if kind is DivergenceKind.KL:
        vals = np.log(clipped)
    elif kind is DivergenceKind.TV:
        vals = 0.5 * np.abs(clipped - 1.0)
    elif kind is DivergenceKind.HELLINGER_SQUARED:
        vals = 2.0 - 2.0 * np.sqrt(clipped)
    else:  # chi^2 with self-normalized weights
        norm = clipped.mean()
        vals = (clipped / norm) ** 2 - 1.0
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n))
    return McEstimate(est, se, clip_fraction)


def divergence_mc(
    kind: DivergenceKind, p: Policy, q: Policy, mdp: MdpSpec, prompt: Prompt, mc: MonteCarlo
) -> McEstimate:
    return _mc_divergence(kind, p, q, mdp, prompt, mc)


def divergence(
    kind: DivergenceKind,
    p: Policy,
    q: Policy,
    mdp: MdpSpec,
    prompt: Prompt,
    backend: Backend = "exact",
) -> float:
    """Trajectory-level divergence between p(.|x) and q(.|x)."""
    if isinstance(backend, MonteCarlo):
        est = _mc_divergence(kind, p, q, mdp, prompt, backend)
        if est.bias_flagged:
            warnings.warn(
                f"{est.clip_fraction:.2%} of importance weights clipped; estimate is biased",
                stacklevel=2,
            )
        return est.value
    pv, qv = _joint_probs(p, q, mdp, prompt)
    val = _divergence_from_arrays(kind, pv, qv)
    if math.isinf(val):
        raise AbsoluteContinuityViolated(
            f"p has mass outside q's support at prompt {prompt.id}"
        )
    return val


def divergence_over_prompts(
    kind: DivergenceKind, p: Policy, q: Policy, mdp: MdpSpec, backend: Backend = "exact"
) -> float:
    """rho-weighted aggregate of per-prompt divergences."""
    return sum(
        w * divergence(kind, p, q, mdp, prompt, backend)
        for prompt, w in zip(mdp.prompts, mdp.prompt_dist)
        if w > 0.0
    )


def density_ratio_sup(p: Policy, q: Policy, mdp: MdpSpec, prompt: Prompt) -> float:
    """max over q's support of p(tau)/q(tau); inf if p has mass outside it."""
    pv, qv = _joint_probs(p, q, mdp, prompt)
    if ((qv == 0.0) & (pv > 0.0)).any():
        return math.inf
    mask = qv > 0.0
    return float((pv[mask] / qv[mask]).max())


def _weighted_lower_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    idx = int(np.searchsorted(cum, 0.5 * cum[-1], side="left"))
    return float(values[order][min(idx, len(values) - 1)])


def _mc_reward_variance(policy, mdp, prompt, mc: MonteCarlo) -> float:
    vals = np.empty(mc.n_samples)
    for i in range(mc.n_samples):
        traj = rollout(policy, mdp, prompt, mc.rng)
        vals[i] = trajectory_reward(mdp.reward, traj)
    return float(vals.var(ddof=1))


def heterogeneity(
    policy: Policy,
    mdp: MdpSpec,
    method: str = "reward_variance",
    backend: Backend = "exact",
) -> HeterogeneityReport:
    """Per-prompt heterogeneity sigma^2_{pi,x} plus total / mean / median.

    Methods: 'sum_of_q_variances' sums expected Q-variance over steps;
    'reward_variance' takes the variance of the trajectory reward. By the
    total-variance identity the two agree exactly on enumerable instances.
    """
    if method not in ("sum_of_q_variances", "reward_variance"):
        raise ValueError(f"unknown method {method!r}")
    per: dict[int, float] = {}
    rho: dict[int, float] = {}
    for prompt, w in zip(mdp.prompts, mdp.prompt_dist):
        rho[prompt.id] = float(w)
        if isinstance(backend, MonteCarlo):
            if method != "reward_variance":
                raise ValueError("sum_of_q_variances requires the exact backend")
            per[prompt.id] = _mc_reward_variance(policy, mdp, prompt, backend)
        else:
            stats = tree_stats_exact(policy, mdp, prompt)
            per[prompt.id] = (
                stats.sum_expected_q_variance
                if method == "sum_of_q_variances"
                else stats.reward_variance
            )
    ids = list(per)
    var = np.asarray([per[i] for i in ids])
    w = np.asarray([rho[i] for i in ids])
    sig = np.sqrt(np.maximum(var, 0.0))
    return HeterogeneityReport(
        per_prompt=per,
        rho=rho,
        total=float(np.dot(w, var)),
        mean=float(np.dot(w, sig)),
        median=_weighted_lower_median(sig, w),
    )


def anti_concentration(
    policy: Policy,
    mdp: MdpSpec,
    eps_per_prompt: dict[int, float],
    backend: Backend = "exact",
) -> AntiConcReport:
    """Tail mass c_x(eps) = Pr[r(tau) >= mean + sigma_x * sqrt(eps)] per prompt."""
    per: dict[int, float] = {}
    thresholds: dict[int, float] = {}
    for prompt in mdp.prompts:
        eps = eps_per_prompt[prompt.id]
        if eps < 0:
            raise ValueError("eps must be >= 0")
        if isinstance(backend, MonteCarlo):
            vals = np.empty(backend.n_samples)
            for i in range(backend.n_samples):
                traj = rollout(policy, mdp, prompt, backend.rng)
                vals[i] = trajectory_reward(mdp.reward, traj)
            mean, sigma = float(vals.mean()), float(vals.std(ddof=0))
            thr = mean + sigma * math.sqrt(eps)
            per[prompt.id] = float((vals >= thr - 1e-9).mean())
        else:
            r, p = reward_distribution_exact(mdp, prompt, policy)
            mean = float(np.dot(r, p))
            var = float(np.dot((r - mean) ** 2, p))
            sigma = math.sqrt(max(var, 0.0))
            thr = mean + sigma * math.sqrt(eps)
            per[prompt.id] = float(p[r >= thr - 1e-9].sum())
        thresholds[prompt.id] = thr
    return AntiConcReport(
        per_prompt=per,
        thresholds=thresholds,
        epsilons=dict(eps_per_prompt),
        c_min=min(per.values()),
    )


def partition_score_L(
    expert_het: HeterogeneityReport, partition: list[set[int]], k: int
) -> float:
    """min over subsets K of >= k/4 parts of the rho-weighted sigma mass in their union.

    Exact subset minimization for k <= 20 (it suffices to scan subsets of
    exactly ceil(k/4) parts: part scores are non-negative, so supersets can
    only raise the mass). For larger k the sorted greedy bound is returned,
    which coincides with the exact value for the same reason.
    """
    if len(partition) != k or k < 1:
        raise PartitionInvalid(f"expected {k} parts, got {len(partition)}")
    seen: set[int] = set()
    for part in partition:
        if not part:
            raise PartitionInvalid("empty part")
        if part & seen:
            raise PartitionInvalid("parts are not disjoint")
        seen |= part
    if seen != set(expert_het.per_prompt):
        raise PartitionInvalid("partition does not cover the prompt space")
    scores = [
        sum(expert_het.rho[x] * expert_het.sigma(x) for x in part) for part in partition
    ]
    m = math.ceil(k / 4)
    if k <= 20:
        return min(sum(c) for c in itertools.combinations(scores, m))
    return float(sum(sorted(scores)[:m]))


@dataclass
class DivergenceChainReport:
    """Pinsker / Le Cam chain evaluated on one enumerated prompt.

    Hellinger convention: `hellinger_sq` is sum (sqrt p - sqrt q)^2, range
    [0, 2]; `hellinger` is its square root. The asserted chain is the one
    that holds identically for that convention:
        TV <= sqrt(KL / 2)
        TV <= hellinger           and   hellinger_sq <= 2 TV
        hellinger_sq / 6 <= chi2(P || (P+Q)/2) <= hellinger_sq
    Infinite KL / chi^2 (disjoint support) satisfy the chain vacuously.
    """

    tv: float
    kl: float
    chi_squared: float
    hellinger_sq: float
    chi_squared_mid: float
    slacks: dict[str, float] = field(default_factory=dict)
    passed: bool = True

    @property
    def hellinger(self) -> float:
        return math.sqrt(max(self.hellinger_sq, 0.0))


def divergence_inequality_check(
    p: Policy, q: Policy, mdp: MdpSpec, prompt: Prompt, tol: float = 1e-9
) -> DivergenceChainReport:
    pv, qv = _joint_probs(p, q, mdp, prompt)
    tv = _divergence_from_arrays(DivergenceKind.TV, pv, qv)
    kl = _divergence_from_arrays(DivergenceKind.KL, pv, qv)
    chi = _divergence_from_arrays(DivergenceKind.CHI_SQUARED, pv, qv)
    hsq = _divergence_from_arrays(DivergenceKind.HELLINGER_SQUARED, pv, qv)
    mid = 0.5 * (pv + qv)
    chi_mid = _divergence_from_arrays(DivergenceKind.CHI_SQUARED, pv, mid)
    h = math.sqrt(max(hsq, 0.0))
    slacks = {
        "tv_le_sqrt_half_kl": (math.inf if math.isinf(kl) else math.sqrt(kl / 2.0)) - tv,
        "tv_le_hellinger": h - tv,
        "hellinger_sq_le_2tv": 2.0 * tv - hsq,
        "chi2_mid_ge_sixth_hsq": chi_mid - hsq / 6.0,
        "chi2_mid_le_hsq": hsq - chi_mid,
    }
    passed = all(s >= -tol for s in slacks.values())
    return DivergenceChainReport(
        tv=tv,
        kl=kl,
        chi_squared=chi,
        hellinger_sq=hsq,
        chi_squared_mid=chi_mid,
        slacks=slacks,
        passed=passed,
    )
