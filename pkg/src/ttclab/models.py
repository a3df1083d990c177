"""Trainable models: the suffix-softmax policy and the bi-level-location
verifier.

The policy is a residual softmax on top of the base policy,
    pi(a | s) ∝ pi_b(a | s) * exp(f(x, w, a)),
where f sums three linear feature groups: a per-(hashed prompt, window) logit
table, shared prompt-token -> output-token association tables, and a shared
hashed window table. Zero parameters reproduce the base exactly, and the
shared groups are what transfer to prompts never seen in training.

The verifier scores each location class h in 1..H by convolving per-position
features (alignment pairs between prompt tokens and trajectory tokens, plus a
hashed window identity) with weights indexed by the offset between the
position and the candidate class; class H+1 means "no bi-level". All scoring
is linear in indicator features, trained with multiclass cross-entropy and
plain fixed-step SGD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._hash import hash_arrays, hash_ints
from .mdp import Policy, Prompt

N_OFFSET_BUCKETS = 7  # delta <= -3, -2, -1, 0, +1, +2, delta >= +3


@dataclass(frozen=True)
class PolicySpace:
    """Dimensions shared by the policy and verifier feature maps."""

    vocab_size: int
    prompt_length: int
    prompt_token_min: int
    prompt_token_max: int
    window: int = 5
    g1_buckets: int = 1 << 16
    g3_buckets: int = 1 << 16
    win_buckets: int = 1 << 16
    hash_salt: int = 0x7C15

    @property
    def n_prompt_values(self) -> int:
        return self.prompt_token_max - self.prompt_token_min + 1

    @property
    def bos(self) -> int:
        return self.vocab_size  # window symbol for "before the first token"

    def window_powers(self) -> np.ndarray:
        return (self.vocab_size + 1) ** np.arange(self.window, dtype=np.int64)

    def prompt_key(self, prompt: Prompt) -> int:
        return hash_ints(self.hash_salt ^ 0xA11CE, prompt.tokens)

    def prompt_feature_ids(self, prompt: Prompt) -> np.ndarray:
        toks = np.asarray(prompt.tokens, dtype=np.int64) - self.prompt_token_min
        return np.arange(self.prompt_length, dtype=np.int64) * self.n_prompt_values + toks


def wcode_matrix(actions: np.ndarray, space: PolicySpace) -> np.ndarray:
    """Window codes per step for an action matrix (B, H).

    Entry (b, h) encodes the last `window` tokens ending at step h (1-based),
    BOS-padded on the left.
    """
    B, H = actions.shape
    m = space.window
    padded = np.concatenate(
        [np.full((B, m - 1), space.bos, dtype=np.int64), actions.astype(np.int64)], axis=1
    )
    powers = space.window_powers()
    out = np.zeros((B, H), dtype=np.int64)
    for i in range(m):
        out += padded[:, i : i + H] * powers[i]
    return out


def prefix_wcodes(actions: np.ndarray, space: PolicySpace) -> np.ndarray:
    """Window codes of the states *before* each step: (B, H), entry (b, h)
    is the window after h emitted tokens (h = 0 is all-BOS)."""
    B, H = actions.shape
    m = space.window
    padded = np.concatenate(
        [np.full((B, m), space.bos, dtype=np.int64), actions.astype(np.int64)], axis=1
    )
    powers = space.window_powers()
    out = np.zeros((B, H), dtype=np.int64)
    for i in range(m):
        out += padded[:, i : i + H] * powers[i]
    return out


class SuffixSoftmaxPolicy(Policy):
    """Residual-on-base softmax policy over (prompt feature, token window)."""

    def __init__(self, base, space: PolicySpace):
        self.base = base
        self.space = space
        V = space.vocab_size
        self.g1 = np.zeros((space.g1_buckets, V))
        self.g2 = np.zeros((space.prompt_length * space.n_prompt_values, V))
        self.g3 = np.zeros((space.g3_buckets, V))
        self._powers = space.window_powers()

    # feature indexing -------------------------------------------------------
    def g1_indices(self, pkeys: np.ndarray, wcodes: np.ndarray) -> np.ndarray:
        h = hash_arrays(self.space.hash_salt ^ 0xB0B, pkeys, wcodes)
        return (h % np.uint64(self.space.g1_buckets)).astype(np.int64)

    def g3_indices(self, wcodes: np.ndarray) -> np.ndarray:
        h = hash_arrays(self.space.hash_salt ^ 0xC0C, wcodes)
        return (h % np.uint64(self.space.g3_buckets)).astype(np.int64)

    def g2_sum(self, prompt: Prompt) -> np.ndarray:
        return self.g2[self.space.prompt_feature_ids(prompt)].sum(axis=0)

    def _window_tuple(self, prefix: tuple[int, ...]) -> tuple[int, ...]:
        m = self.space.window
        tail = tuple(prefix[-m:]) if prefix else ()
        return (self.space.bos,) * (m - len(tail)) + tail

    def residual_logits(self, prompt: Prompt, prefix: tuple[int, ...]) -> np.ndarray:
        w = np.asarray(self._window_tuple(prefix), dtype=np.int64)
        wcode = np.asarray([int(np.dot(w, self._powers))], dtype=np.int64)
        pkey = np.asarray([self.space.prompt_key(prompt)], dtype=np.uint64)
        i1 = self.g1_indices(pkey, wcode)[0]
        i3 = self.g3_indices(wcode)[0]
        return self.g1[i1] + self.g2_sum(prompt) + self.g3[i3]

    # scalar policy interface -----------------------------------------------
    def action_probs(self, prompt, prefix):
        b = self.base.action_probs(prompt, prefix)
        f = self.residual_logits(prompt, tuple(prefix))
        z = b * np.exp(f - f.max())
        return z / z.sum()

    # batched rollout protocol ------------------------------------------------
    def batch_start(self, prompts: Sequence[Prompt], record: bool = False):
        return _SuffixBatchState(self, prompts, record)

    def compact_state(self, st):
        return st

    def batch_step(self, st: "_SuffixBatchState", rng: np.random.Generator) -> np.ndarray:
        probs, i1, i3, f = st.current_probs()
        B = probs.shape[0]
        u = rng.random((B, 1))
        tokens = (probs.cumsum(axis=1) < u).sum(axis=1)
        tokens = np.minimum(tokens, self.space.vocab_size - 1).astype(np.int64)
        if st.record:
            st.steps.append(
                {"probs": probs, "i1": i1, "i3": i3, "f": f, "tokens": tokens}
            )
        st.advance(tokens)
        return tokens

    # parameter io -------------------------------------------------------------
    def tables(self) -> dict[str, np.ndarray]:
        return {"g1": self.g1, "g2": self.g2, "g3": self.g3}

    def load_tables(self, tables: dict[str, np.ndarray]) -> None:
        for name in ("g1", "g2", "g3"):
            arr = tables[name]
            if arr.shape != getattr(self, name).shape:
                raise ValueError(f"shape mismatch for {name}")
            setattr(self, name, arr.astype(float))


class _SuffixBatchState:
    def __init__(self, policy: SuffixSoftmaxPolicy, prompts: Sequence[Prompt], record: bool):
        self.policy = policy
        self.prompts = list(prompts)
        self.record = record
        self.steps: list[dict] = []
        B = len(prompts)
        sp = policy.space
        self.base_state = policy.base.batch_start(prompts)
        self.windows = np.full((B, sp.window), sp.bos, dtype=np.int64)
        self.pkeys = np.asarray([sp.prompt_key(p) for p in prompts], dtype=np.uint64)
        self.g2s = np.stack([policy.g2_sum(p) for p in prompts])
        self.base_compact: list[tuple] = []

    @property
    def loc(self):
        return self.base_state.loc

    def current_probs(self):
        pol = self.policy
        sp = pol.space
        alpha, beta, boosted = pol.base.compact_probs(self.base_state)
        if self.record:
            self.base_compact.append((alpha, beta, boosted))
        B = len(self.prompts)
        wcodes = self.windows @ pol._powers
        i1 = pol.g1_indices(self.pkeys, wcodes)
        i3 = pol.g3_indices(wcodes)
        f = pol.g1[i1] + self.g2s + pol.g3[i3]
        base_dense = np.repeat(alpha[:, None], sp.vocab_size, axis=1)
        base_dense[np.arange(B), boosted] += beta
        z = base_dense * np.exp(f - f.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        return probs, i1, i3, f

    def advance(self, tokens: np.ndarray) -> None:
        self.policy.base.advance(self.base_state, tokens)
        self.windows[:, :-1] = self.windows[:, 1:]
        self.windows[:, -1] = tokens


class LocationVerifier:
    """Multiclass predictor of the bi-level location over H+1 classes."""

    def __init__(self, horizon: int, space: PolicySpace, class_bins: int = 8, seed: int = 0):
        self.horizon = horizon
        self.space = space
        self.class_bins = min(class_bins, horizon)
        L = space.prompt_length
        self.pair_dim = L * space.n_prompt_values * (space.vocab_size + 1)
        self.prompt_dim = L * space.n_prompt_values
        NB = N_OFFSET_BUCKETS
        self.w_pair = np.zeros((NB, self.pair_dim))
        self.w_win = np.zeros((NB, space.win_buckets))
        self.w_pair_none = np.zeros(self.pair_dim)
        self.w_win_none = np.zeros(space.win_buckets)
        self.w_prompt = np.zeros((self.class_bins, self.prompt_dim))
        self.w_prompt_none = np.zeros(self.prompt_dim)
        self.bias = np.zeros(horizon)
        self.bias_none = 0.0
        self._bin_of_class = (np.arange(horizon) * self.class_bins) // horizon

    # featurization ----------------------------------------------------------
    def featurize(self, prompts: Sequence[Prompt], actions: np.ndarray) -> dict:
        sp = self.space
        B, H = actions.shape
        L = sp.prompt_length
        npv = sp.n_prompt_values
        pad = np.concatenate(
            [np.full((B, L - 1), sp.bos, dtype=np.int64), actions.astype(np.int64)], axis=1
        )
        ptoks = np.stack([np.asarray(p.tokens, dtype=np.int64) for p in prompts]) - sp.prompt_token_min
        fpair = np.empty((B, H, L), dtype=np.int64)
        for i in range(L):
            ytok = pad[:, i : i + H]  # token at window slot i for each position
            fpair[:, :, i] = (i * npv + ptoks[:, i : i + 1]) * (sp.vocab_size + 1) + ytok
        wcodes = wcode_matrix(actions, sp)
        fwin = (
            hash_arrays(sp.hash_salt ^ 0xD0D, wcodes) % np.uint64(sp.win_buckets)
        ).astype(np.int64)
        fprompt = np.stack([sp.prompt_feature_ids(p) for p in prompts])
        return {"pair": fpair, "win": fwin, "prompt": fprompt}

    # forward ------------------------------------------------------------------
    def logits(self, feats: dict) -> np.ndarray:
        fpair, fwin, fprompt = feats["pair"], feats["win"], feats["prompt"]
        B, H, L = fpair.shape
        NB = N_OFFSET_BUCKETS
        logits = np.empty((B, H + 1))
        s = np.empty((NB, B, H))
        for o in range(NB):
            s[o] = self.w_pair[o][fpair].sum(axis=2) + self.w_win[o][fwin]
        spad = np.zeros((NB, B, H + 4))
        spad[:, :, 2:-2] = s
        # class h (1..H) receives singleton buckets from positions h-2..h+2 and
        # cumulative tails from p <= h-3 (bucket 0) and p >= h+3 (bucket 6)
        cs0 = np.concatenate([np.zeros((B, 1)), s[0].cumsum(axis=1)], axis=1)
        cs6 = np.concatenate([np.zeros((B, 1)), s[6].cumsum(axis=1)], axis=1)
        idx_lo = np.clip(np.arange(1, H + 1) - 3, 0, H)  # p <= h-3
        loc = (
            cs0[:, idx_lo]
            + spad[1][:, 0:H]      # p = h-2
            + spad[2][:, 1:H + 1]  # p = h-1
            + spad[3][:, 2:H + 2]  # p = h
            + spad[4][:, 3:H + 3]  # p = h+1
            + spad[5][:, 4:H + 4]  # p = h+2
            + (cs6[:, H:H + 1] - cs6[:, np.minimum(np.arange(1, H + 1) + 2, H)])
        )
        prompt_part = self.w_prompt[:, fprompt].sum(axis=2)  # (bins, B)
        loc += prompt_part[self._bin_of_class].T + self.bias[None, :]
        logits[:, :H] = loc
        logits[:, H] = (
            self.w_pair_none[fpair].sum(axis=(1, 2))
            + self.w_win_none[fwin].sum(axis=1)
            + self.w_prompt_none[fprompt].sum(axis=1)
            + self.bias_none
        )
        return logits

    def _softmax(self, logits: np.ndarray) -> np.ndarray:
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    # training -----------------------------------------------------------------
    def sgd_step(self, feats: dict, targets: np.ndarray, lr: float) -> float:
        """One cross-entropy SGD step; targets are classes in 0..H (H = none)."""
        fpair, fwin, fprompt = feats["pair"], feats["win"], feats["prompt"]
        B, H, L = fpair.shape
        logits = self.logits(feats)
        probs = self._softmax(logits)
        loss = float(-np.log(np.maximum(probs[np.arange(B), targets], 1e-300)).mean())
        resid = probs
        resid[np.arange(B), targets] -= 1.0
        resid /= B

        self.bias -= lr * resid[:, :H].sum(axis=0)
        self.bias_none -= lr * float(resid[:, H].sum())

        for b in range(self.class_bins):
            rb = resid[:, :H][:, self._bin_of_class == b].sum(axis=1)
            self.w_prompt[b] -= lr * np.bincount(
                fprompt.ravel(), np.repeat(rb, fprompt.shape[1]), minlength=self.prompt_dim
            )
        cn = resid[:, H]
        self.w_prompt_none -= lr * np.bincount(
            fprompt.ravel(), np.repeat(cn, fprompt.shape[1]), minlength=self.prompt_dim
        )

        coef = self._position_coefs(resid[:, :H])  # (NB, B, H)
        pair_flat = fpair.reshape(-1)
        win_flat = fwin.reshape(-1)
        for o in range(N_OFFSET_BUCKETS):
            self.w_pair[o] -= lr * np.bincount(
                pair_flat, np.repeat(coef[o].reshape(-1), L), minlength=self.pair_dim
            )
            self.w_win[o] -= lr * np.bincount(
                win_flat, coef[o].reshape(-1), minlength=self.space.win_buckets
            )
        cn_pos = np.repeat(cn, H)
        self.w_pair_none -= lr * np.bincount(
            pair_flat, np.repeat(cn_pos, L), minlength=self.pair_dim
        )
        self.w_win_none -= lr * np.bincount(win_flat, cn_pos, minlength=self.space.win_buckets)
        return loss

    def _position_coefs(self, resid_loc: np.ndarray) -> np.ndarray:
        """coef[o, b, p] = sum of residuals over classes h with bucket(p-h) = o."""
        B, H = resid_loc.shape
        NB = N_OFFSET_BUCKETS
        rpad = np.zeros((B, H + 4))
        rpad[:, 2:-2] = resid_loc
        rc = np.concatenate([np.zeros((B, 1)), resid_loc.cumsum(axis=1)], axis=1)
        coef = np.empty((NB, B, H))
        pos = np.arange(1, H + 1)
        coef[6] = rc[:, np.clip(pos - 3, 0, H)]              # h <= p-3
        coef[5] = rpad[:, 0:H]                               # h = p-2
        coef[4] = rpad[:, 1:H + 1]                           # h = p-1
        coef[3] = rpad[:, 2:H + 2]                           # h = p
        coef[2] = rpad[:, 3:H + 3]                           # h = p+1
        coef[1] = rpad[:, 4:H + 4]                           # h = p+2
        coef[0] = rc[:, H:H + 1] - rc[:, np.minimum(pos + 2, H)]  # h >= p+3
        return coef

    # prediction -----------------------------------------------------------------
    def predict_classes(self, prompts: Sequence[Prompt], actions: np.ndarray) -> np.ndarray:
        """argmax class per row: 1..H is the location, H+1 means no bi-level."""
        logits = self.logits(self.featurize(prompts, actions))
        return logits.argmax(axis=1) + 1

    def predict_rewards(self, prompts: Sequence[Prompt], actions: np.ndarray) -> np.ndarray:
        cls = self.predict_classes(prompts, actions)
        H = self.horizon
        return np.where(cls <= H, H - cls + 1, 0)

    def tables(self) -> dict[str, np.ndarray]:
        return {
            "w_pair": self.w_pair,
            "w_win": self.w_win,
            "w_pair_none": self.w_pair_none,
            "w_win_none": self.w_win_none,
            "w_prompt": self.w_prompt,
            "w_prompt_none": self.w_prompt_none,
            "bias": self.bias,
            "bias_none": np.asarray([self.bias_none]),
        }

    def load_tables(self, tables: dict[str, np.ndarray]) -> None:
        self.w_pair = tables["w_pair"].astype(float)
        self.w_win = tables["w_win"].astype(float)
        self.w_pair_none = tables["w_pair_none"].astype(float)
        self.w_win_none = tables["w_win_none"].astype(float)
        self.w_prompt = tables["w_prompt"].astype(float)
        self.w_prompt_none = tables["w_prompt_none"].astype(float)
        self.bias = tables["bias"].astype(float)
        self.bias_none = float(tables["bias_none"][0])


def scatter_add_rows(table: np.ndarray, idx: np.ndarray, delta: np.ndarray) -> None:
    """table[idx[i]] += delta[i] with duplicate indices, via per-column bincount."""
    uniq, inv = np.unique(idx, return_inverse=True)
    acc = np.empty((len(uniq), delta.shape[1]))
    for c in range(delta.shape[1]):
        acc[:, c] = np.bincount(inv, weights=delta[:, c], minlength=len(uniq))
    table[uniq] += acc


def space_for_env(env, window: int = 5, **overrides) -> PolicySpace:
    """PolicySpace matching a planted environment's dimensions."""
    from .planted import PROMPT_LENGTH, PROMPT_TOKEN_MAX, PROMPT_TOKEN_MIN

    kwargs = dict(
        vocab_size=env.vocab_size,
        prompt_length=PROMPT_LENGTH,
        prompt_token_min=PROMPT_TOKEN_MIN,
        prompt_token_max=PROMPT_TOKEN_MAX,
        window=window,
    )
    kwargs.update(overrides)
    return PolicySpace(**kwargs)
