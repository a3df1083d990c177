"""Trainable stack: verifier-free SFT, binary-search reward annotation,
multiclass verifier training, the pessimistic bootstrap ensemble, and
REINFORCE with an analytic per-context KL penalty against the base policy.

All optimizers are plain fixed-step SGD. Training batches, bootstrap
resamples, and rollouts draw from generators seeded by the config, so a
(config, seed) pair fully determines every trained model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyDataset
from .mdp import BiLevelReward, MdpSpec, Policy, Prompt, Trajectory, enumerate_trajectories
from .models import (
    LocationVerifier,
    PolicySpace,
    SuffixSoftmaxPolicy,
    scatter_add_rows,
    space_for_env,
    wcode_matrix,
    prefix_wcodes,
)
from .planted import PlantedEnvSpec, batch_rollout


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.5
    kl_weight: float = 0.2
    iterations: int = 2000
    seed: int = 0
    bootstrap_fraction: float = 1.0

    def __post_init__(self):
        if min(self.batch_size, self.iterations) <= 0 or self.learning_rate <= 0:
            raise ValueError("batch_size, iterations and learning_rate must be positive")
        if self.kl_weight < 0 or not 0 < self.bootstrap_fraction <= 1:
            raise ValueError("kl_weight must be >= 0 and bootstrap_fraction in (0, 1]")


@dataclass
class AnnotatedRecord:
    prompt: Prompt
    actions: tuple[int, ...]
    location: Optional[int]


@dataclass
class AnnotatedDataset:
    records: list[AnnotatedRecord]
    annotation_calls_used: int
    horizon: int


def _first_hit_binary(query: Callable[[int], bool], lo: int, hi: int) -> int:
    """Smallest h in [lo, hi] with query(h) true; query must be monotone and
    query(hi) known true."""
    while lo < hi:
        mid = (lo + hi) // 2
        if query(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def binary_search_annotate(
    trajectory: Trajectory, reward_oracle: BiLevelReward, horizon: int
) -> tuple[Optional[int], int]:
    """Locate the bi-level with one membership query at H plus a binary search.

    Uses at most 1 + ceil(log2 H) per-step reward queries and matches a
    linear scan exactly (monotonicity of bi-level rewards).
    """
    calls = 0

    def query(h: int) -> bool:
        nonlocal calls
        calls += 1
        return reward_oracle.step_reward(trajectory.prompt, trajectory.actions, h) == 1

    if not query(horizon):
        return None, calls
    loc = _first_hit_binary(query, 1, horizon)
    return loc, calls


def annotation_cost(horizon: int) -> int:
    return 1 + math.ceil(math.log2(horizon))


def annotate_rollouts(
    base,
    env: PlantedEnvSpec,
    budget: int,
    rng: np.random.Generator,
    split: str = "train",
    per_trajectory: bool = False,
) -> AnnotatedDataset:
    """Spend a reward-annotation budget on base-policy rollouts.

    By default the budget counts total oracle calls, funding
    floor(budget / (1 + ceil(log2 H))) trajectories; with per_trajectory=True
    it counts trajectories instead.
    """
    H = env.horizon
    n_records = budget if per_trajectory else budget // annotation_cost(H)
    if n_records < 1:
        raise EmptyDataset(f"budget {budget} funds no annotated trajectory at H={H}")
    pool = env.prompts(split)
    idx = rng.choice(len(pool), size=n_records)
    prompts = [pool[i] for i in idx]
    batch = batch_rollout(base, prompts, H, rng)
    records = []
    calls = 0
    for row, prompt in enumerate(prompts):
        traj = Trajectory(prompt, tuple(int(a) for a in batch.actions[row]))
        loc, used = binary_search_annotate(traj, env.reward, H)
        calls += used
        records.append(AnnotatedRecord(prompt, traj.actions, loc))
    return AnnotatedDataset(records, calls, H)


# --------------------------------------------------------------------------
# shared policy-training plumbing


class _PolicyData:
    """Precomputed feature/base tensors for a fixed set of trajectories."""

    def __init__(self, policy: SuffixSoftmaxPolicy, prompts: Sequence[Prompt], actions: np.ndarray):
        sp = policy.space
        self.prompts = list(prompts)
        self.actions = actions.astype(np.int64)
        N, H = actions.shape
        wc = prefix_wcodes(actions, sp)
        pkeys = np.asarray([sp.prompt_key(p) for p in prompts], dtype=np.uint64)
        self.i1 = policy.g1_indices(np.repeat(pkeys[:, None], H, axis=1), wc)
        self.i3 = policy.g3_indices(wc)
        self.fids = np.stack([sp.prompt_feature_ids(p) for p in prompts])
        base = policy.base
        if hasattr(base, "batch_start"):
            st = base.batch_start(list(prompts))
            alphas, betas, boosts = [], [], []
            for h in range(H):
                a, b, t = base.compact_probs(st)
                alphas.append(a)
                betas.append(b)
                boosts.append(t)
                base.advance(st, self.actions[:, h])
            self.alpha = np.stack(alphas, axis=1)
            self.beta = np.stack(betas, axis=1)
            self.boosted = np.stack(boosts, axis=1)
            self.base_dense = None
        else:
            dense = np.empty((N, H, sp.vocab_size))
            for n, p in enumerate(prompts):
                prefix: tuple[int, ...] = ()
                for h in range(H):
                    dense[n, h] = base.action_probs(p, prefix)
                    prefix = prefix + (int(self.actions[n, h]),)
            self.base_dense = dense

    def base_probs(self, rows: np.ndarray, V: int) -> np.ndarray:
        if self.base_dense is not None:
            return self.base_dense[rows]
        B = len(rows)
        H = self.actions.shape[1]
        out = np.repeat(self.alpha[rows][:, :, None], V, axis=2)
        bi, hi = np.meshgrid(np.arange(B), np.arange(H), indexing="ij")
        out[bi, hi, self.boosted[rows]] += self.beta[rows]
        return out


def _policy_forward(policy: SuffixSoftmaxPolicy, data: _PolicyData, rows: np.ndarray):
    """probs, residual logits f, and the index arrays for a row minibatch."""
    V = policy.space.vocab_size
    i1 = data.i1[rows]
    i3 = data.i3[rows]
    f = policy.g1[i1] + policy.g3[i3] + policy.g2[data.fids[rows]].sum(axis=1)[:, None, :]
    base = data.base_probs(rows, V)
    z = base * np.exp(f - f.max(axis=2, keepdims=True))
    probs = z / z.sum(axis=2, keepdims=True)
    return probs, f, i1, i3


def _kl_gradient(probs: np.ndarray, f: np.ndarray) -> np.ndarray:
    """d KL(pi || base) / d f for the residual parameterization: pi*(f - E_pi f)."""
    ef = (probs * f).sum(axis=2, keepdims=True)
    return probs * (f - ef)


def _apply_updates(policy: SuffixSoftmaxPolicy, data: _PolicyData, rows, upd: np.ndarray, i1, i3):
    B, H, V = upd.shape
    flat = upd.reshape(B * H, V)
    scatter_add_rows(policy.g1, i1.reshape(-1), flat)
    scatter_add_rows(policy.g3, i3.reshape(-1), flat)
    per_row = upd.sum(axis=1)
    fids = data.fids[rows]
    for j in range(fids.shape[1]):
        scatter_add_rows(policy.g2, fids[:, j], per_row)


def _kl_to_base(probs: np.ndarray, base: np.ndarray) -> float:
    mask = probs > 0
    ratio = np.where(mask, probs / np.maximum(base, 1e-300), 1.0)
    return float((np.where(mask, probs * np.log(ratio), 0.0)).sum(axis=2).mean())


@dataclass
class SftResult:
    policy: SuffixSoftmaxPolicy
    loss_trace: list[float]


def sft_train(
    expert_data: Sequence[Trajectory],
    base: Policy,
    config: TrainConfig,
    space: Optional[PolicySpace] = None,
    env: Optional[PlantedEnvSpec] = None,
) -> SftResult:
    """Behavior cloning: token-level cross-entropy plus a kl_weight-scaled
    analytic KL(pi || base) on the batch contexts."""
    if len(expert_data) == 0:
        raise EmptyDataset("no expert trajectories")
    if space is None:
        if env is None:
            raise ValueError("pass a PolicySpace or an env to derive one")
        space = space_for_env(env)
    policy = SuffixSoftmaxPolicy(base, space)
    prompts = [t.prompt for t in expert_data]
    actions = np.asarray([t.actions for t in expert_data], dtype=np.int64)
    data = _PolicyData(policy, prompts, actions)
    N, H = actions.shape
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    trace: list[float] = []
    for _ in range(config.iterations):
        rows = rng.choice(N, size=min(config.batch_size, N), replace=False)
        probs, f, i1, i3 = _policy_forward(policy, data, rows)
        B = len(rows)
        onehot_idx = (np.arange(B)[:, None], np.arange(H)[None, :], actions[rows])
        tok_p = np.maximum(probs[onehot_idx], 1e-300)
        ce = float(-np.log(tok_p).mean())
        grad = probs.copy()
        grad[onehot_idx] -= 1.0
        loss = ce
        if config.kl_weight > 0:
            base_probs = data.base_probs(rows, space.vocab_size)
            loss += config.kl_weight * _kl_to_base(probs, base_probs)
            grad = grad + config.kl_weight * _kl_gradient(probs, f)
        _apply_updates(policy, data, rows, -(lr / (B * H)) * grad, i1, i3)
        trace.append(loss)
    return SftResult(policy, trace)


# --------------------------------------------------------------------------
# verifier training


@dataclass
class VerifierTrainResult:
    verifier: LocationVerifier
    loss_trace: list[float]


def _dataset_tensors(data: AnnotatedDataset):
    prompts = [r.prompt for r in data.records]
    actions = np.asarray([r.actions for r in data.records], dtype=np.int64)
    H = data.horizon
    targets = np.asarray(
        [H if r.location is None else r.location - 1 for r in data.records], dtype=np.int64
    )
    return prompts, actions, targets


def verifier_train(
    data: AnnotatedDataset,
    config: TrainConfig,
    space: PolicySpace,
    verifier: Optional[LocationVerifier] = None,
) -> VerifierTrainResult:
    if not data.records:
        raise EmptyDataset("no annotated records")
    prompts, actions, targets = _dataset_tensors(data)
    if verifier is None:
        verifier = LocationVerifier(data.horizon, space)
    feats = verifier.featurize(prompts, actions)
    N = len(prompts)
    rng = np.random.default_rng(config.seed)
    trace: list[float] = []
    for _ in range(config.iterations):
        rows = rng.choice(N, size=min(config.batch_size, N), replace=False)
        sub = {
            "pair": feats["pair"][rows],
            "win": feats["win"][rows],
            "prompt": feats["prompt"][rows],
        }
        trace.append(verifier.sgd_step(sub, targets[rows], config.learning_rate))
    return VerifierTrainResult(verifier, trace)


def verifier_predict(verifier, trajectory: Trajectory):
    """(class, reward estimate, per-token 0/1 rewards) for one trajectory."""
    actions = np.asarray([trajectory.actions], dtype=np.int64)
    cls = int(verifier.predict_classes([trajectory.prompt], actions)[0])
    H = verifier.horizon
    r_hat = H - cls + 1 if cls <= H else 0
    token_rewards = np.zeros(H, dtype=np.int64)
    if cls <= H:
        token_rewards[cls - 1 :] = 1
    return cls, r_hat, token_rewards


class VerifierEnsemble:
    """Bootstrap ensemble whose reward estimate is the member minimum."""

    def __init__(self, members: list[LocationVerifier]):
        if not members:
            raise EmptyDataset("ensemble needs at least one member")
        self.members = members
        self.horizon = members[0].horizon

    def predict_rewards(self, prompts, actions) -> np.ndarray:
        est = np.stack([m.predict_rewards(prompts, actions) for m in self.members])
        return est.min(axis=0)

    def predict_classes(self, prompts, actions) -> np.ndarray:
        r = self.predict_rewards(prompts, actions)
        H = self.horizon
        return np.where(r > 0, H - r + 1, H + 1)


def pessimistic_ensemble(
    data: AnnotatedDataset, ensemble_size: int, config: TrainConfig, space: PolicySpace
) -> VerifierEnsemble:
    """Train ensemble members on bootstrap resamples; predict via member-min.

    Members also get distinct feature-hash salts, so hash-collision artifacts
    decorrelate across the ensemble and the member-min suppresses them.
    """
    from dataclasses import replace

    if ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")
    if not data.records:
        raise EmptyDataset("no annotated records")
    members = []
    n = len(data.records)
    size = max(1, int(round(config.bootstrap_fraction * n)))
    for m in range(ensemble_size):
        rng = np.random.default_rng((config.seed, 0xB007, m))
        if ensemble_size == 1 and config.bootstrap_fraction >= 1.0:
            rows = np.arange(n)
        else:
            rows = rng.choice(n, size=size, replace=True)
        sub = AnnotatedDataset([data.records[i] for i in rows], data.annotation_calls_used, data.horizon)
        member_cfg = TrainConfig(
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            kl_weight=config.kl_weight,
            iterations=config.iterations,
            seed=config.seed if m == 0 else config.seed + 7919 * m,
            bootstrap_fraction=config.bootstrap_fraction,
        )
        member_space = space if m == 0 else replace(space, hash_salt=space.hash_salt ^ (0x51D << m))
        members.append(verifier_train(sub, member_cfg, member_space).verifier)
    return VerifierEnsemble(members)


# --------------------------------------------------------------------------
# reward sources for RL


class GroundTruthRewards:
    """Token-level 0/1 rewards from the environment's own reward oracle."""

    def __init__(self, env: PlantedEnvSpec):
        self.env = env

    def token_rewards(self, prompts, actions, locations) -> np.ndarray:
        H = actions.shape[1]
        steps = np.arange(1, H + 1)[None, :]
        loc = np.asarray(locations)[:, None]
        return ((loc > 0) & (steps >= loc)).astype(float)


class VerifierRewards:
    def __init__(self, verifier):
        self.verifier = verifier

    def token_rewards(self, prompts, actions, locations) -> np.ndarray:
        cls = self.verifier.predict_classes(prompts, actions)
        H = actions.shape[1]
        steps = np.arange(1, H + 1)[None, :]
        return ((cls[:, None] <= H) & (steps >= cls[:, None])).astype(float)


class ZeroRewards:
    def token_rewards(self, prompts, actions, locations) -> np.ndarray:
        return np.zeros(actions.shape, dtype=float)


@dataclass
class ReinforceResult:
    policy: SuffixSoftmaxPolicy
    return_trace: list[float]


def reinforce_train(
    base,
    reward_source,
    env: PlantedEnvSpec,
    config: TrainConfig,
    space: Optional[PolicySpace] = None,
    split: str = "train",
    policy: Optional[SuffixSoftmaxPolicy] = None,
) -> ReinforceResult:
    """REINFORCE with reward-to-go, a constant batch-mean-return baseline, and
    an analytic KL(pi || base) penalty on visited contexts. Initialized at the
    base policy (zero residual parameters)."""
    if space is None:
        space = space_for_env(env)
    if policy is None:
        policy = SuffixSoftmaxPolicy(base, space)
    pool = env.prompts(split)
    H = env.horizon
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    trace: list[float] = []
    max_r = env.max_reward
    for _ in range(config.iterations):
        idx = rng.choice(len(pool), size=config.batch_size)
        prompts = [pool[i] for i in idx]
        st = policy.batch_start(prompts, record=True)
        for _h in range(H):
            policy.batch_step(st, rng)
        actions = np.stack([s["tokens"] for s in st.steps], axis=1)
        probs = np.stack([s["probs"] for s in st.steps], axis=1)  # (B,H,V)
        f = np.stack([s["f"] for s in st.steps], axis=1)
        i1 = np.stack([s["i1"] for s in st.steps], axis=1)
        i3 = np.stack([s["i3"] for s in st.steps], axis=1)
        locations = st.loc
        tok_r = reward_source.token_rewards(prompts, actions, locations)
        g = tok_r[:, ::-1].cumsum(axis=1)[:, ::-1]  # reward-to-go
        baseline = g[:, 0].mean()
        # advantage in normalized-return units, so one step size serves all H
        coef = (g - baseline) / max_r
        B = len(prompts)
        onehot_idx = (np.arange(B)[:, None], np.arange(H)[None, :], actions)
        pg = -probs.copy()
        pg[onehot_idx] += 1.0
        pg *= coef[:, :, None]
        if config.kl_weight > 0:
            pg -= config.kl_weight * _kl_gradient(probs, f)
        upd = (lr / B) * pg
        flat = upd.reshape(B * H, space.vocab_size)
        scatter_add_rows(policy.g1, i1.reshape(-1), flat)
        scatter_add_rows(policy.g3, i3.reshape(-1), flat)
        per_row = upd.sum(axis=1)
        fids = np.stack([space.prompt_feature_ids(p) for p in prompts])
        for j in range(fids.shape[1]):
            scatter_add_rows(policy.g2, fids[:, j], per_row)
        true_rewards = np.where(locations > 0, H - locations + 1, 0)
        trace.append(float(true_rewards.mean()) / max_r)
    return ReinforceResult(policy, trace)


def verifier_error(
    verifier, policy, env: PlantedEnvSpec, n_eval: int, rng: np.random.Generator, split: str = "test"
) -> tuple[float, float]:
    """(mean |r - r_hat|, 0/1 location error) under the policy's distribution."""
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    pool = env.prompts(split)
    H = env.horizon
    abs_errs: list[float] = []
    loc_errs: list[float] = []
    done = 0
    while done < n_eval:
        chunk = min(256, n_eval - done)
        idx = rng.choice(len(pool), size=chunk)
        prompts = [pool[i] for i in idx]
        batch = batch_rollout(policy, prompts, H, rng)
        r_true = batch.rewards.astype(float)
        cls_true = np.where(batch.locations > 0, batch.locations, H + 1)
        cls_pred = verifier.predict_classes(prompts, batch.actions)
        r_pred = np.where(cls_pred <= H, H - cls_pred + 1, 0).astype(float)
        abs_errs.extend(np.abs(r_true - r_pred))
        loc_errs.extend((cls_true != cls_pred).astype(float))
        done += chunk
    return float(np.mean(abs_errs)), float(np.mean(loc_errs))


# --------------------------------------------------------------------------
# exact-gradient utilities (oracle-scale correctness checks)


def exact_objective(policy: Policy, mdp: MdpSpec, token_reward_fn) -> float:
    """E[sum_h r_h(tau)] by enumeration; token_reward_fn(tau) gives (H,) rewards."""
    total = 0.0
    for prompt, w in zip(mdp.prompts, mdp.prompt_dist):
        for traj, p in enumerate_trajectories(mdp, prompt, policy):
            if p > 0:
                total += w * p * float(np.asarray(token_reward_fn(traj)).sum())
    return total


def exact_policy_gradient(
    policy: SuffixSoftmaxPolicy, mdp: MdpSpec, token_reward_fn, reward_to_go: bool = True
) -> dict[str, np.ndarray]:
    """Exact expectation of the REINFORCE estimator over the trajectory tree.

    With reward_to_go the per-step coefficient is sum_{t>=h} r_t, else the
    full return; both are unbiased for causal token rewards, only the full
    return is for anti-causal (verifier-style) rewards.
    """
    grads = {name: np.zeros_like(t) for name, t in policy.tables().items()}
    V = policy.space.vocab_size
    for prompt, w in zip(mdp.prompts, mdp.prompt_dist):
        fids = policy.space.prompt_feature_ids(prompt)
        for traj, p in enumerate_trajectories(mdp, prompt, policy):
            if p <= 0:
                continue
            r = np.asarray(token_reward_fn(traj), dtype=float)
            coefs = r[::-1].cumsum()[::-1] if reward_to_go else np.full(len(r), r.sum())
            prefix: tuple[int, ...] = ()
            for h, a in enumerate(traj.actions):
                probs = policy.action_probs(prompt, prefix)
                onehot = np.zeros(V)
                onehot[a] = 1.0
                gvec = w * p * coefs[h] * (onehot - probs)
                wtuple = policy._window_tuple(prefix)
                wcode = np.asarray([int(np.dot(wtuple, policy._powers))], dtype=np.int64)
                pk = np.asarray([policy.space.prompt_key(prompt)], dtype=np.uint64)
                grads["g1"][policy.g1_indices(pk, wcode)[0]] += gvec
                grads["g3"][policy.g3_indices(wcode)[0]] += gvec
                for fid in fids:
                    grads["g2"][fid] += gvec
                prefix = prefix + (a,)
    return grads
