"""Command-line interface.

Subcommands: env sample | metrics | train sft|verifier|rl | sweep run|gap|plot
| oracle verify. Exit codes: 0 success, 1 usage or config error,
2 certification failure. TTCLAB_MAX_WORKERS caps sweep parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, TTCLabError


def _load_cfg(args):
    from .harness import config_from_dict, load_config

    if args.config:
        return load_config(args.config)
    return config_from_dict()


def _cmd_env_sample(args) -> int:
    from .planted import MixtureBasePolicy, batch_rollout, make_planted_env, gold_subsequence

    cfg = _load_cfg(args)
    env_cfg = cfg["env"]
    H = env_cfg["horizons"][0]
    env = make_planted_env(H, n_prompts=8, seed=args.seed, n_test=4)
    weights = None if env_cfg["mixture_weights"] == "uniform" else env_cfg["mixture_weights"]
    base = MixtureBasePolicy(env, env_cfg["gammas"], weights)
    rng = np.random.default_rng(args.seed)
    batch = batch_rollout(base, list(env.train_prompts[:4]), H, rng)
    lines = []
    for row, prompt in enumerate(batch.prompts):
        rec = {
            "prompt_id": prompt.id,
            "prompt": list(prompt.tokens),
            "gold": list(gold_subsequence(prompt)),
            "actions": [int(a) for a in batch.actions[row]],
            "location": int(batch.locations[row]) or None,
            "reward": int(batch.rewards[row]),
        }
        lines.append(json.dumps(rec))
    text = "\n".join(lines)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "env_sample.jsonl").write_text(text + "\n")
    print(text)
    return 0


def _cmd_metrics(args) -> int:
    from .metrics import MonteCarlo, anti_concentration, heterogeneity
    from .planted import MixtureBasePolicy, make_planted_env

    cfg = _load_cfg(args)
    env_cfg = cfg["env"]
    H = env_cfg["horizons"][0]
    env = make_planted_env(H, n_prompts=8, seed=args.seed, n_test=4)
    weights = None if env_cfg["mixture_weights"] == "uniform" else env_cfg["mixture_weights"]
    base = MixtureBasePolicy(env, env_cfg["gammas"], weights)
    mdp = env.mdp("train")
    mc = MonteCarlo(n_samples=args.samples, rng=np.random.default_rng(args.seed))
    het = heterogeneity(base, mdp, method="reward_variance", backend=mc)
    eps = {p.id: args.epsilon for p in mdp.prompts}
    conc = anti_concentration(base, mdp, eps, backend=MonteCarlo(args.samples, np.random.default_rng(args.seed + 1)))
    lines = ["prompt_id,sigma_sq,c_eps,threshold"]
    for pid in sorted(het.per_prompt):
        lines.append(
            f"{pid},{het.per_prompt[pid]!r},{conc.per_prompt[pid]!r},{conc.thresholds[pid]!r}"
        )
    lines.append(f"# total={het.total!r} mean={het.mean!r} median={het.median!r} c_min={conc.c_min!r}")
    text = "\n".join(lines)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.csv").write_text(text + "\n")
    print(text)
    return 0


def _cmd_train(args) -> int:
    from .checkpoint import save_arrays
    from .harness import _rng, _train_cfg
    from .learners import (
        GroundTruthRewards,
        VerifierRewards,
        annotate_rollouts,
        pessimistic_ensemble,
        reinforce_train,
        sft_train,
    )
    from .models import space_for_env
    from .planted import MixtureBasePolicy, batch_rejection_sample, Exhausted, make_planted_env

    cfg = _load_cfg(args)
    env_cfg = cfg["env"]
    H = env_cfg["horizons"][0]
    n = cfg["budget"]["n_list"][0]
    seed = args.seed
    env = make_planted_env(
        H, env_cfg["n_prompts"], seed=int(_rng(seed, H, n, 0).integers(2**31)), n_test=env_cfg["n_test"]
    )
    weights = None if env_cfg["mixture_weights"] == "uniform" else env_cfg["mixture_weights"]
    base = MixtureBasePolicy(env, env_cfg["gammas"], weights)
    space = space_for_env(env)
    out = Path(args.out or cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    if args.what == "sft":
        rng = _rng(seed, H, n, 20)
        pool = env.prompts("train")
        idx = rng.choice(len(pool), size=n)
        traces = [
            t
            for t in batch_rejection_sample(
                base, env, [pool[i] for i in idx], env_cfg["rejection_max_attempts"], rng
            )
            if not isinstance(t, Exhausted)
        ]
        res = sft_train(traces, base, _train_cfg(cfg["sft"], seed), space=space)
        save_arrays(out / "sft_policy.ttck", {"kind": "suffix_softmax", "H": H}, res.policy.tables())
        trace = res.loss_trace
    elif args.what == "verifier":
        ds = annotate_rollouts(base, env, budget=n, rng=_rng(seed, H, n, 30))
        vcfg = _train_cfg(cfg["verifier"], seed, bootstrap_fraction=cfg["verifier"]["bootstrap_fraction"])
        ens = pessimistic_ensemble(ds, cfg["verifier"]["ensemble_size"], vcfg, space)
        for i, member in enumerate(ens.members):
            save_arrays(out / f"verifier_{i}.ttck", {"kind": "location_verifier", "H": H}, member.tables())
        trace = []
    else:  # rl
        ds = annotate_rollouts(base, env, budget=n, rng=_rng(seed, H, n, 30))
        vcfg = _train_cfg(cfg["verifier"], seed, bootstrap_fraction=cfg["verifier"]["bootstrap_fraction"])
        ens = pessimistic_ensemble(ds, cfg["verifier"]["ensemble_size"], vcfg, space)
        res = reinforce_train(base, VerifierRewards(ens), env, _train_cfg(cfg["rl"], seed), space=space)
        save_arrays(out / "rl_policy.ttck", {"kind": "suffix_softmax", "H": H}, res.policy.tables())
        trace = res.return_trace
    if trace:
        (out / f"{args.what}_curve.csv").write_text(
            "iteration,value\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(trace)) + "\n"
        )
    print(f"wrote {args.what} artifacts to {out}")
    return 0


def _cmd_sweep_run(args) -> int:
    from .harness import run_sweep

    cfg = _load_cfg(args)
    out = args.out or cfg["run"]["out_dir"]
    result = run_sweep(cfg, deterministic=args.deterministic, out_dir=out)
    print(f"wrote {len(result.records)} records to {out}/records.csv")
    return 0


def _cmd_sweep_gap(args) -> int:
    from .harness import gap_analysis

    pair = tuple(args.pair.split(","))
    if len(pair) != 2:
        raise ConfigError("--pair must be 'method_a,method_b'")
    rep = gap_analysis(args.records, pair, boot_seed=args.seed)
    print(f"gap {pair[0]} - {pair[1]}  (fit on H >= {rep.h_min_fit})")
    print("H,n,mean_gap,ci_lo,ci_hi,seeds")
    for row in rep.rows:
        print(f"{row.H},{row.n},{row.mean_gap:.6f},{row.ci_lo:.6f},{row.ci_hi:.6f},{row.n_seeds}")
    if rep.degenerate:
        print("slope: degenerate (no positive-gap fit window)")
    else:
        lo, hi = rep.slope_ci if rep.slope_ci else (float("nan"), float("nan"))
        print(f"log-gap slope vs log H: {rep.slope:.4f}  CI=({lo:.4f}, {hi:.4f})")
    return 0


def _cmd_sweep_plot(args) -> int:
    from .harness import emit_plots

    files = emit_plots(args.records, args.out or "plots")
    for f in files:
        print(f)
    return 0


def _cmd_oracle_verify(args) -> int:
    from .certify import oracle_verify

    suites = "all" if not args.suite else [s.strip() for s in args.suite.split(",")]
    results = oracle_verify(suites, seed=args.seed)
    width = max(len(r.name) for r in results)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  worst_slack={r.worst_slack:+.3e}  {r.detail}")
        failed = failed or not r.passed
    return 2 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttclab", description=__doc__)
    sub = p.add_subparsers(dest="group", required=True)

    env = sub.add_parser("env", help="environment utilities")
    env_sub = env.add_subparsers(dest="cmd", required=True)
    s = env_sub.add_parser("sample", help="sample base-policy rollouts")
    s.add_argument("--config", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_env_sample)

    m = sub.add_parser("metrics", help="base-policy heterogeneity / anti-concentration")
    m.add_argument("--config", default=None)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default=None)
    m.add_argument("--samples", type=int, default=2000)
    m.add_argument("--epsilon", type=float, default=0.5)
    m.set_defaults(func=_cmd_metrics)

    t = sub.add_parser("train", help="single training runs")
    t.add_argument("what", choices=("sft", "verifier", "rl"))
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default=None)
    t.set_defaults(func=_cmd_train)

    sw = sub.add_parser("sweep", help="experiment sweeps")
    sw_sub = sw.add_subparsers(dest="cmd", required=True)
    r = sw_sub.add_parser("run")
    r.add_argument("--config", default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default=None)
    r.add_argument("--deterministic", action="store_true")
    r.set_defaults(func=_cmd_sweep_run)
    g = sw_sub.add_parser("gap")
    g.add_argument("--records", required=True)
    g.add_argument("--pair", default="rl_verifier,sft")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_sweep_gap)
    pl = sw_sub.add_parser("plot")
    pl.add_argument("--records", required=True)
    pl.add_argument("--out", default=None)
    pl.set_defaults(func=_cmd_sweep_plot)

    o = sub.add_parser("oracle", help="lemma certification")
    o_sub = o.add_subparsers(dest="cmd", required=True)
    v = o_sub.add_parser("verify")
    v.add_argument("--suite", default=None, help="comma-separated suite names (default: all)")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=_cmd_oracle_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except TTCLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
