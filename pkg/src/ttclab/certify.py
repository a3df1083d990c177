"""Enumeration-backed certificates for every construction-level claim.

Each suite draws random oracle-scale instances (vocab <= 4, H <= 10),
computes both sides of an identity or inequality exactly, and reports the
worst slack observed; a certificate passes when the worst slack is above
-tolerance. These are the checks behind `ttclab oracle verify` and the
first acceptance criterion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constructions import (
    complement_reward,
    extend_comparator,
    gilbert_varshamov_codebook,
    make_comparator_policy,
    make_packing_family,
    make_tilted_policy,
    solve_tilt_theta,
    two_branch_instance,
    verify_codebook,
)
from .errors import EmptySupport
from .mdp import (
    MdpSpec,
    Prompt,
    reward_distribution_exact,
    single_prompt_mdp,
    tree_stats_exact,
    trajectory_reward,
)
from .metrics import (
    DivergenceKind,
    density_ratio_sup,
    divergence_inequality_check,
    divergence_over_prompts,
    anti_concentration,
)
from .policies import RandomSoftmaxPolicy, TableTrajectoryPolicy, reweight_by
from .rewards import RandomPrefixReward

TOL_EXACT = 1e-9
TOL_BALL = 1e-6


@dataclass
class CertResult:
    name: str
    passed: bool
    worst_slack: float
    detail: str = ""
    reported: dict = field(default_factory=dict)


def _random_instance(rng: np.random.Generator, n_prompts: int = 1, force_half: bool = False):
    vocab = int(rng.integers(2, 4))
    horizon = int(rng.integers(3, 7))
    if force_half and horizon % 2 == 1:
        horizon += 1
    prompts = tuple(Prompt(id=i, tokens=(int(rng.integers(1, 5)),)) for i in range(n_prompts))
    dist = rng.dirichlet(np.ones(n_prompts) * 5.0) if n_prompts > 1 else np.asarray([1.0])
    reward = RandomPrefixReward(
        seed=int(rng.integers(2**31)),
        hit_prob=float(rng.uniform(0.05, 0.3)),
        force_depth=horizon // 2 if force_half else None,
    )
    mdp = MdpSpec(vocab, horizon, prompts, tuple(float(w) for w in dist), reward)
    policy = RandomSoftmaxPolicy(vocab, seed=int(rng.integers(2**31)), scale=1.0)
    return mdp, policy


def _perturbed_table_policy(base, mdp, prompt, rng, target_chi2):
    """A trajectory-table policy at exact chi^2 distance target from base."""
    r, p = reward_distribution_exact(mdp, prompt, base)
    u = rng.uniform(-1.0, 1.0, size=len(p))
    mean_u = float(np.dot(p, u))
    var_u = float(np.dot(p, (u - mean_u) ** 2))
    if var_u < 1e-12:
        return None
    root = math.sqrt(target_chi2)
    denom = math.sqrt(var_u) - root * mean_u
    if denom <= 0:
        return None
    eta = root / denom
    weights = 1.0 + eta * (u - 0.0)
    if weights.min() <= 1e-9:
        return None
    table = {}
    for (traj, bp), w in zip(_enumerated(mdp, prompt, base), weights):
        if bp > 0:
            table[traj.actions] = w * bp
    return TableTrajectoryPolicy(mdp.vocab_size, prompt, table)


def _enumerated(mdp, prompt, policy):
    from .mdp import enumerate_trajectories

    return list(enumerate_trajectories(mdp, prompt, policy))


def cert_total_variance_identity(seed: int = 0, n_instances: int = 50) -> CertResult:
    """sum_h E Var_a Q == Var r(tau), per prompt."""
    rng = np.random.default_rng((seed, 0x71))
    worst = math.inf
    for _ in range(n_instances):
        mdp, policy = _random_instance(rng, n_prompts=int(rng.integers(1, 3)))
        for prompt in mdp.prompts:
            st = tree_stats_exact(policy, mdp, prompt)
            gap = abs(st.sum_expected_q_variance - st.reward_variance)
            worst = min(worst, TOL_EXACT - gap)
    return CertResult("total_variance_identity", worst >= 0.0, worst)


def cert_variance_band(seed: int = 0, n_instances: int = 50) -> CertResult:
    """sigma_b^2 - H sigma_b sqrt(k/2) <= sigma_e^2 <= sigma_b^2 + H sigma_b sqrt(k/2) + k H^2/4."""
    rng = np.random.default_rng((seed, 0x72))
    worst = math.inf
    done = 0
    while done < n_instances:
        mdp, base = _random_instance(rng, n_prompts=int(rng.integers(1, 3)))
        tables = {}
        for prompt in mdp.prompts:
            t = _perturbed_table_policy(base, mdp, prompt, rng, float(rng.uniform(0.001, 0.3)))
            if t is None:
                break
            tables[prompt.id] = t
        if len(tables) != len(mdp.prompts):
            continue
        from .policies import ReweightedPolicy

        expert = ReweightedPolicy(base, tables)
        kappa = divergence_over_prompts(DivergenceKind.CHI_SQUARED, expert, base, mdp)
        H = mdp.horizon
        var_b = var_e = 0.0
        for prompt, w in zip(mdp.prompts, mdp.prompt_dist):
            var_b += w * tree_stats_exact(base, mdp, prompt).reward_variance
            var_e += w * tree_stats_exact(expert, mdp, prompt).reward_variance
        sig_b = math.sqrt(var_b)
        lower = var_b - H * sig_b * math.sqrt(kappa / 2.0)
        upper = var_b + H * sig_b * math.sqrt(kappa / 2.0) + kappa * H**2 / 4.0
        worst = min(worst, var_e - lower + TOL_EXACT, upper - var_e + TOL_EXACT)
        done += 1
    return CertResult("variance_band", worst >= 0.0, worst)


def _instance_with_signal(rng, min_sigma=1e-3, n_prompts=1):
    """Random instance whose prompts all have positive mean and variance."""
    while True:
        mdp, policy = _random_instance(rng, n_prompts=n_prompts)
        ok = True
        stats = []
        for prompt in mdp.prompts:
            st = tree_stats_exact(policy, mdp, prompt)
            if st.mean_reward <= 1e-9 or st.reward_variance <= min_sigma**2:
                ok = False
                break
            stats.append(st)
        if ok:
            return mdp, policy, stats


def cert_characterization(seed: int = 0, n_instances: int = 50, n_ball: int = 500) -> CertResult:
    """The tilted policy attains J_b + sigma * sqrt(eps) at chi^2 exactly eps,
    and no policy in the eps-ball does better."""
    rng = np.random.default_rng((seed, 0x73))
    worst = math.inf
    for _ in range(n_instances):
        mdp, base, (st,) = _instance_with_signal(rng)
        prompt = mdp.prompts[0]
        sigma = math.sqrt(st.reward_variance)
        jb = st.mean_reward
        eps = float(rng.uniform(0.1, 0.9)) ** 2 * sigma**2 / jb**2
        theta = solve_tilt_theta(sigma, jb, eps)
        tilted = make_tilted_policy(base, mdp.reward, theta, sigma, mdp, prompt)
        chi = divergence_over_prompts(DivergenceKind.CHI_SQUARED, tilted, base, mdp)
        jt = sum(
            w * tree_stats_exact(tilted, mdp, p).mean_reward
            for p, w in zip(mdp.prompts, mdp.prompt_dist)
        )
        target = jb + sigma * math.sqrt(eps)
        worst = min(worst, TOL_EXACT - abs(chi - eps), TOL_EXACT - abs(jt - target))
        # random in-ball policies never exceed the characterized supremum
        r, p = reward_distribution_exact(mdp, prompt, base)
        for _ in range(n_ball):
            u = rng.uniform(-1.0, 1.0, size=len(p))
            mean_u = float(np.dot(p, u))
            var_u = float(np.dot(p, (u - mean_u) ** 2))
            if var_u < 1e-12:
                continue
            t_chi = eps * float(rng.uniform(0.0, 1.0))
            denom = math.sqrt(var_u) - math.sqrt(t_chi) * mean_u
            if denom <= 1e-9:
                continue
            eta = math.sqrt(t_chi) / denom
            w_vec = 1.0 + eta * u
            if w_vec.min() <= 0:
                continue
            q = w_vec * p
            q /= q.sum()
            chi_q = float(np.dot(p, (q / np.maximum(p, 1e-300) - 1.0) ** 2))
            if chi_q > eps:
                continue
            j_q = float(np.dot(q, r))
            worst = min(worst, target + TOL_BALL - j_q)
    return CertResult("characterization", worst >= 0.0, worst)


def cert_comparator_and_extension(seed: int = 0, n_instances: int = 50) -> CertResult:
    rng = np.random.default_rng((seed, 0x74))
    worst = math.inf
    done = 0
    while done < n_instances:
        mdp, base, (st,) = _instance_with_signal(rng)
        prompt = mdp.prompts[0]
        sigma = math.sqrt(st.reward_variance)
        jb = st.mean_reward
        eps = float(rng.uniform(0.1, 0.9)) ** 2 * sigma**2 / jb**2
        conc = anti_concentration(base, mdp, {prompt.id: eps})
        c0 = conc.per_prompt[prompt.id]
        if c0 <= 0.0:
            continue
        try:
            pi_c = make_comparator_policy(base, mdp.reward, {prompt.id: eps}, mdp)
        except EmptySupport:
            continue
        # assertion 1: strictly positive (hence >= 1) reward on support
        min_r = min(
            trajectory_reward(mdp.reward, traj)
            for traj, p in _enumerated(mdp, prompt, pi_c)
            if p > 0
        )
        worst = min(worst, float(min_r) - 1.0 + TOL_EXACT)
        # assertion 2: J(pi_c) >= sup over the ball = J_b + sigma sqrt(eps), and
        # >= the tilted witness
        j_c = tree_stats_exact(pi_c, mdp, prompt).mean_reward
        target = jb + sigma * math.sqrt(eps)
        theta = solve_tilt_theta(sigma, jb, eps)
        tilted = make_tilted_policy(base, mdp.reward, theta, sigma, mdp, prompt)
        j_t = tree_stats_exact(tilted, mdp, prompt).mean_reward
        worst = min(worst, j_c - target + TOL_EXACT, j_c - j_t + TOL_EXACT)
        # assertion 3: density ratio <= 1/c0
        ratio = density_ratio_sup(pi_c, base, mdp, prompt)
        worst = min(worst, 1.0 / c0 - ratio + TOL_EXACT)
        # extension: J^{H'} = J^{h0} + (H' - h0), ratio unchanged
        h0 = mdp.horizon
        h_ext = h0 + int(rng.integers(1, 3))
        ext_mdp = MdpSpec(mdp.vocab_size, h_ext, mdp.prompts, mdp.prompt_dist, mdp.reward)
        extended = extend_comparator(pi_c, base, h0, h_ext)
        j_ext = tree_stats_exact(extended, ext_mdp, prompt).mean_reward
        worst = min(worst, TOL_EXACT - abs(j_ext - j_c - (h_ext - h0)))
        ext_base = extend_comparator(base, base, h0, h_ext)
        ratio_ext = density_ratio_sup(extended, ext_base, ext_mdp, prompt)
        worst = min(worst, TOL_EXACT - abs(ratio_ext - ratio))
        done += 1
    return CertResult("comparator_and_extension", worst >= 0.0, worst)


def cert_complement_identities(seed: int = 0, n_instances: int = 50) -> CertResult:
    """E[complement] = H - E[original], equal variances, and the complement is
    itself a valid bi-level reward."""
    from .mdp import check_bilevel_property

    rng = np.random.default_rng((seed, 0x75))
    worst = math.inf
    for i in range(n_instances):
        mdp, policy = _random_instance(rng, force_half=True)
        comp = complement_reward(mdp.reward, mdp)
        comp_mdp = MdpSpec(mdp.vocab_size, mdp.horizon, mdp.prompts, mdp.prompt_dist, comp)
        for prompt in mdp.prompts:
            st = tree_stats_exact(policy, mdp, prompt)
            st_c = tree_stats_exact(policy, comp_mdp, prompt)
            worst = min(
                worst,
                TOL_EXACT - abs(st_c.mean_reward - (mdp.horizon - st.mean_reward)),
                TOL_EXACT - abs(st_c.reward_variance - st.reward_variance),
            )
        if i % 10 == 0:
            res = check_bilevel_property(comp, comp_mdp, mode="exhaustive")
            if not res.passed:
                return CertResult(
                    "complement_identities", False, -1.0, f"complement violates bi-level: {res.counterexample}"
                )
    return CertResult("complement_identities", worst >= 0.0, worst)


def cert_packing(seed: int = 0, n_instances: int = 50) -> CertResult:
    """Packing family assertions 1-3 exactly; assertion 4 reported."""
    rng = np.random.default_rng((seed, 0x76))
    worst = math.inf
    reported: dict = {"assertion4_worst_ratio": 0.0}
    done = 0
    while done < n_instances:
        vocab = 2
        horizon = int(rng.choice([4, 6]))
        prompts = tuple(Prompt(id=i, tokens=(i + 1,)) for i in range(2))
        reward = RandomPrefixReward(
            seed=int(rng.integers(2**31)),
            hit_prob=float(rng.uniform(0.05, 0.25)),
            force_depth=horizon // 2,
        )
        mdp = MdpSpec(vocab, horizon, prompts, (0.5, 0.5), reward)
        base = RandomSoftmaxPolicy(vocab, seed=int(rng.integers(2**31)), scale=1.0)
        # expert: small exact-chi2 perturbation of the base on each prompt
        tables = {}
        eps_to_base = 0.0
        for prompt in mdp.prompts:
            t = _perturbed_table_policy(base, mdp, prompt, rng, float(rng.uniform(0.001, 0.05)))
            if t is None:
                break
            tables[prompt.id] = t
        if len(tables) != len(mdp.prompts):
            continue
        from .policies import ReweightedPolicy

        expert = ReweightedPolicy(base, tables)
        eps_to_base = divergence_over_prompts(DivergenceKind.CHI_SQUARED, expert, base, mdp)
        sig = {}
        val = {}
        feasible = True
        for prompt in mdp.prompts:
            st = tree_stats_exact(expert, mdp, prompt)
            if st.mean_reward <= 1e-9 or st.reward_variance <= 1e-6:
                feasible = False
                break
            sig[prompt.id] = math.sqrt(st.reward_variance)
            val[prompt.id] = st.mean_reward
        if not feasible:
            continue
        bound = min(sig[i] ** 2 / (4 * val[i] ** 2) for i in sig)
        xi = float(rng.uniform(0.05, 0.9)) * bound
        partition = [{0}, {1}]
        words = (0b00, 0b01, 0b10, 0b11)
        fam = make_packing_family(expert, reward, partition, xi, mdp, words=words)
        sigma_min = min(sig.values())
        # assertion 1: chi^2 between any two family members <= 8 xi, and to the expert
        for z in words:
            for z2 in words:
                chi = divergence_over_prompts(
                    DivergenceKind.CHI_SQUARED, fam.policies[z], fam.policies[z2], mdp
                )
                worst = min(worst, 8.0 * xi - chi + TOL_EXACT)
            chi_e = divergence_over_prompts(DivergenceKind.CHI_SQUARED, fam.policies[z], expert, mdp)
            worst = min(worst, 8.0 * xi - chi_e + TOL_EXACT)
        # assertion 2: value-gap closed form under r_z
        for z in words:
            r_z = fam.rewards[z]
            rz_mdp = MdpSpec(vocab, horizon, prompts, mdp.prompt_dist, r_z)
            j = {
                z3: sum(
                    w * tree_stats_exact(fam.policies[z3], rz_mdp, p).mean_reward
                    for p, w in zip(prompts, mdp.prompt_dist)
                )
                for z3 in words
            }
            for z2 in words:
                expected = math.sqrt(xi) * sum(
                    mdp.prompt_dist[i] * sig[prompts[i].id]
                    for i in range(len(partition))
                    if ((z >> i) & 1) != ((z2 >> i) & 1)
                )
                gap = j[z] - j[z2]
                worst = min(worst, TOL_EXACT - abs(gap - expected))
        # assertion 3: per-prompt variance bound for every (policy, reward) pair
        for z in words:
            for z2 in words:
                rz_mdp = MdpSpec(vocab, horizon, prompts, mdp.prompt_dist, fam.rewards[z2])
                for prompt in prompts:
                    v = tree_stats_exact(fam.policies[z], rz_mdp, prompt).reward_variance
                    s = sig[prompt.id]
                    ub = s**2 + horizon * s * math.sqrt(xi) + horizon**2 * xi
                    worst = min(worst, ub - v + TOL_EXACT)
        # assertion 4 (reported): chi^2 to the base vs the enlarged-ball radius
        eps_prime = (
            3.0
            * (1.0 + eps_to_base)
            * max(math.sqrt(xi) * horizon / sigma_min, xi * horizon**2 / sigma_min**2)
        )
        for z in words:
            chi_b = divergence_over_prompts(DivergenceKind.CHI_SQUARED, fam.policies[z], base, mdp)
            if eps_prime > 0:
                reported["assertion4_worst_ratio"] = max(
                    reported["assertion4_worst_ratio"], chi_b / eps_prime
                )
        done += 1
    detail = f"assertion4 worst chi2/eps' = {reported['assertion4_worst_ratio']:.4f} (reported, not asserted)"
    return CertResult("packing", worst >= 0.0, worst, detail, reported)


def cert_gv_codebooks(seed: int = 0) -> CertResult:
    worst = math.inf
    details = []
    for k in (8, 12, 16, 20):
        cb = gilbert_varshamov_codebook(k)
        achieved = verify_codebook(cb)
        required_size = 2 ** math.ceil(k / 4)
        worst = min(worst, float(cb.size - required_size), float(achieved - cb.min_distance_required))
        details.append(f"k={k}: size {cb.size} (>= {required_size}), min distance {achieved}")
    return CertResult("gv_codebooks", worst >= 0.0, worst, "; ".join(details))


def cert_abound(seed: int = 0, n_vars: int = 1000) -> CertResult:
    """E[theta (mu - A) / (sigma + theta A)] <= 2 theta^2 for non-negative A."""
    rng = np.random.default_rng((seed, 0x78))
    worst = math.inf
    for _ in range(n_vars):
        n = int(rng.integers(2, 9))
        vals = rng.uniform(0.0, 10.0, size=n)
        probs = rng.dirichlet(np.ones(n))
        mu = float(np.dot(probs, vals))
        sigma = math.sqrt(float(np.dot(probs, (vals - mu) ** 2)))
        if sigma < 1e-6:
            continue
        theta = float(rng.uniform(0.0, 3.0))
        lhs = float(np.dot(probs, theta * (mu - vals) / (sigma + theta * vals)))
        worst = min(worst, 2.0 * theta**2 - lhs + TOL_EXACT)
    return CertResult("abound", worst >= 0.0, worst)


def cert_divergence_chain(seed: int = 0, n_pairs: int = 200) -> CertResult:
    rng = np.random.default_rng((seed, 0x79))
    from .rewards import NeverReward

    mdp = single_prompt_mdp(3, 4, NeverReward())
    worst = math.inf
    for _ in range(n_pairs):
        p = RandomSoftmaxPolicy(3, seed=int(rng.integers(2**31)), scale=1.5)
        q = RandomSoftmaxPolicy(3, seed=int(rng.integers(2**31)), scale=1.5)
        rep = divergence_inequality_check(p, q, mdp, mdp.prompts[0])
        worst = min(worst, min(rep.slacks.values()))
    # disjoint-support boundary: TV = 1, KL and chi^2 infinite, chain vacuous
    prompt = mdp.prompts[0]
    a = TableTrajectoryPolicy(3, prompt, {(0, 0, 0, 0): 1.0})
    b = TableTrajectoryPolicy(3, prompt, {(1, 1, 1, 1): 1.0})
    rep = divergence_inequality_check(a, b, mdp, prompt)
    if not (rep.passed and rep.tv == 1.0 and math.isinf(rep.kl)):
        return CertResult("divergence_chain", False, -1.0, "disjoint-support boundary failed")
    return CertResult("divergence_chain", worst >= -TOL_EXACT, worst)


def cert_two_branch(seed: int = 0) -> CertResult:
    """Closed forms of the two-branch tightness example."""
    rng = np.random.default_rng((seed, 0x7A))
    worst = math.inf
    for _ in range(25):
        p = float(rng.uniform(0.15, 0.5))
        H = int(rng.integers(2, 6))
        mdp, base = two_branch_instance(p, H)
        st = tree_stats_exact(base, mdp, mdp.prompts[0])
        worst = min(worst, TOL_EXACT - abs(st.reward_variance - p * (1 - p) * H**2))
        worst = min(worst, TOL_EXACT - abs(st.mean_reward - p * H))
        kappa = float(rng.uniform(0.05, 0.5))
        theta = min(p, math.sqrt(kappa * p * (1 - p)))
        from .policies import FirstStepBranchPolicy

        shifted = FirstStepBranchPolicy(mdp.vocab_size, p - theta)
        chi = divergence_over_prompts(DivergenceKind.CHI_SQUARED, shifted, base, mdp)
        worst = min(worst, TOL_EXACT - abs(chi - theta**2 / (p * (1 - p))), kappa - chi + TOL_EXACT)
        st_s = tree_stats_exact(shifted, mdp, mdp.prompts[0])
        shifted_var = (p - theta) * (1 - p + theta) * H**2
        worst = min(worst, TOL_EXACT - abs(st_s.reward_variance - shifted_var))
        if theta >= 2 * p - 0.5:  # regime where the -theta H^2/2 drop holds
            drop = st_s.reward_variance - st.reward_variance
            worst = min(worst, -drop - theta * H**2 / 2.0 + TOL_EXACT)
    return CertResult("two_branch", worst >= 0.0, worst)


ALL_SUITES = {
    "total_variance_identity": cert_total_variance_identity,
    "variance_band": cert_variance_band,
    "characterization": cert_characterization,
    "comparator_and_extension": cert_comparator_and_extension,
    "complement_identities": cert_complement_identities,
    "packing": cert_packing,
    "gilbert_varshamov": cert_gv_codebooks,
    "abound": cert_abound,
    "divergence_chain": cert_divergence_chain,
    "two_branch": cert_two_branch,
}


def oracle_verify(suites="all", seed: int = 0) -> list[CertResult]:
    """Run the requested certificates; returns one result per suite."""
    if suites == "all":
        names = list(ALL_SUITES)
    else:
        names = list(suites)
        unknown = [n for n in names if n not in ALL_SUITES]
        if unknown:
            raise ValueError(f"unknown suites: {unknown}; known: {sorted(ALL_SUITES)}")
    return [ALL_SUITES[n](seed=seed) for n in names]
