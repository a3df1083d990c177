"""Experiment orchestration: config parsing, (method, H, n, seed) sweeps,
gap analysis, and plot emission.

A sweep builds, per grid point and seed: the environment, the mixture base,
the rejection-sampled expert dataset, the binary-search-annotated dataset,
and the requested trained methods, then evaluates normalized return on the
environment's held-out test prompts. Every random stream is derived from
(seed, H, n, stage), so a config plus its seed list fully determines every
CSV value.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InsufficientSeeds
from .learners import (
    GroundTruthRewards,
    TrainConfig,
    VerifierRewards,
    annotate_rollouts,
    pessimistic_ensemble,
    reinforce_train,
    sft_train,
)
from .models import space_for_env
from .planted import (
    EXHAUSTED,
    Exhausted,
    batch_rejection_sample,
    batch_rollout,
    make_planted_env,
    normalized_return,
)

METHODS = ("base", "expert", "sft", "rl_verifier", "rl_ground_truth")

_TRAIN_KEYS = {
    "iterations": int,
    "batch_size": int,
    "learning_rate": float,
    "kl_weight": float,
}

_SCHEMA: dict[str, dict] = {
    "env": {
        "horizons": "int_list",
        "n_prompts": int,
        "n_test": int,
        "gammas": "float_list",
        "mixture_weights": "float_list_or_uniform",
        "rejection_max_attempts": int,
    },
    "budget": {
        "n_list": "int_list",
        "couple": "bool",
        "couple_c": int,
        "per_trajectory": "bool",
    },
    "methods": {"list": "str_list"},
    "sft": dict(_TRAIN_KEYS),
    "verifier": {**_TRAIN_KEYS, "ensemble_size": int, "bootstrap_fraction": float},
    "rl": dict(_TRAIN_KEYS),
    "run": {"seeds": "int_list", "eval_rollouts": int, "out_dir": str},
}

_DEFAULTS: dict[str, dict] = {
    "env": {
        "horizons": [16, 32, 64, 128],
        "n_prompts": 512,
        "n_test": 256,
        "gammas": [5.0, 10.0, 20.0, 50.0, 100.0, 500.0],
        "mixture_weights": "uniform",
        "rejection_max_attempts": 400,
    },
    "budget": {"n_list": [1024], "couple": False, "couple_c": 16, "per_trajectory": False},
    "methods": {"list": ["base", "sft", "rl_verifier"]},
    "sft": {"iterations": 1500, "batch_size": 64, "learning_rate": 0.5, "kl_weight": 0.2},
    "verifier": {
        "iterations": 1200,
        "batch_size": 64,
        "learning_rate": 1.0,
        "kl_weight": 0.2,
        "ensemble_size": 3,
        "bootstrap_fraction": 0.7,
    },
    "rl": {"iterations": 1200, "batch_size": 64, "learning_rate": 0.25, "kl_weight": 0.2},
    "run": {"seeds": [0, 1, 2, 3, 4], "eval_rollouts": 2048, "out_dir": "results"},
}


def _parse_value(kind, raw: str):
    raw = raw.strip()
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int_list":
        return [int(x) for x in raw.split(",") if x.strip()]
    if kind == "float_list":
        return [float(x) for x in raw.split(",") if x.strip()]
    if kind == "str_list":
        return [x.strip() for x in raw.split(",") if x.strip()]
    if kind == "float_list_or_uniform":
        if raw == "uniform":
            return "uniform"
        return [float(x) for x in raw.split(",") if x.strip()]
    raise ValueError(f"unknown schema kind {kind}")


@dataclass
class ExperimentConfig:
    sections: dict[str, dict]

    def __getitem__(self, key: str) -> dict:
        return self.sections[key]

    def validate(self) -> None:
        env, budget, run = self["env"], self["budget"], self["run"]
        if any(h < 5 for h in env["horizons"]):
            raise ConfigError("every horizon must be >= 5")
        if any(n < 1 for n in budget["n_list"]) or budget["couple_c"] < 1:
            raise ConfigError("budgets must be >= 1")
        if len(set(run["seeds"])) != len(run["seeds"]):
            raise ConfigError("seeds must be distinct")
        unknown = [m for m in self["methods"]["list"] if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; known: {METHODS}")
        w = env["mixture_weights"]
        if w != "uniform" and len(w) != len(env["gammas"]):
            raise ConfigError("mixture_weights length must match gammas")

    def grid(self) -> list[tuple[int, int]]:
        env, budget = self["env"], self["budget"]
        if budget["couple"]:
            return [(h, budget["couple_c"] * h) for h in env["horizons"]]
        return [(h, n) for h in env["horizons"] for n in budget["n_list"]]

    def canonical(self) -> str:
        lines = []
        for sec in sorted(self.sections):
            for key in sorted(self.sections[sec]):
                lines.append(f"{sec}.{key}={self.sections[sec][key]!r}")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def config_from_dict(overrides: Optional[dict] = None) -> ExperimentConfig:
    sections = {sec: dict(vals) for sec, vals in _DEFAULTS.items()}
    for sec, vals in (overrides or {}).items():
        if sec not in sections:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in vals.items():
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            sections[sec][key] = val
    cfg = ExperimentConfig(sections)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config {path}")
    overrides: dict[str, dict] = {}
    for sec in parser.sections():
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        overrides[sec] = {}
        for key, raw in parser.items(sec):
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            try:
                overrides[sec][key] = _parse_value(_SCHEMA[sec][key], raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {sec}.{key}: {e}") from e
    return config_from_dict(overrides)


@dataclass
class SweepRecord:
    method: str
    H: int
    n: int
    seed: int
    metric: str
    value: float
    std_error: float

    def key(self):
        return (self.metric, self.method, self.H, self.n, self.seed)


CSV_HEADER = "method,H,n,seed,metric,value,std_error"


def write_records(path, records: Sequence[SweepRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER]
    for r in sorted(records, key=SweepRecord.key):
        lines.append(f"{r.method},{r.H},{r.n},{r.seed},{r.metric},{r.value!r},{r.std_error!r}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def read_records(path) -> list[SweepRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: malformed records CSV")
    out = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        method, h, n, seed, metric, value, se = ln.split(",")
        out.append(SweepRecord(method, int(h), int(n), int(seed), metric, float(value), float(se)))
    return out


def _rng(master_seed: int, H: int, n: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, H, n, stage]))


def _train_cfg(block: dict, seed: int, **extra) -> TrainConfig:
    return TrainConfig(
        batch_size=block["batch_size"],
        learning_rate=block["learning_rate"],
        kl_weight=block["kl_weight"],
        iterations=block["iterations"],
        seed=seed,
        **extra,
    )


def evaluate_policy(policy, env, n_rollouts: int, rng: np.random.Generator) -> tuple[float, float]:
    """Normalized return on test prompts: Monte-Carlo mean and its std error."""
    pool = env.prompts("test")
    vals = np.empty(n_rollouts)
    done = 0
    while done < n_rollouts:
        chunk = min(512, n_rollouts - done)
        idx = rng.choice(len(pool), size=chunk)
        batch = batch_rollout(policy, [pool[i] for i in idx], env.horizon, rng)
        vals[done : done + chunk] = batch.rewards
        done += chunk
    vals /= env.max_reward
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_rollouts))


def _evaluate_expert(env, base, max_attempts, n_rollouts, rng) -> tuple[float, float]:
    pool = env.prompts("test")
    idx = rng.choice(len(pool), size=n_rollouts)
    traces = batch_rejection_sample(base, env, [pool[i] for i in idx], max_attempts, rng)
    vals = np.asarray(
        [
            0.0
            if isinstance(t, Exhausted)
            else (env.horizon - env.reward.location(t.prompt, t.actions) + 1)
            for t in traces
        ],
        dtype=float,
    )
    vals /= env.max_reward
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def run_grid_point(cfg_sections: dict, H: int, n: int, seed: int) -> tuple[list[SweepRecord], dict]:
    """All requested methods at one (H, n, seed); returns records + manifest info."""
    cfg = ExperimentConfig(cfg_sections)
    env_cfg, run_cfg = cfg["env"], cfg["run"]
    from .planted import MixtureBasePolicy

    env = make_planted_env(
        H, env_cfg["n_prompts"], seed=int(_rng(seed, H, n, 0).integers(2**31)), n_test=env_cfg["n_test"]
    )
    weights = None if env_cfg["mixture_weights"] == "uniform" else env_cfg["mixture_weights"]
    base = MixtureBasePolicy(env, env_cfg["gammas"], weights)
    space = space_for_env(env)
    eval_n = run_cfg["eval_rollouts"]
    records: list[SweepRecord] = []
    info: dict = {"H": H, "n": n, "seed": seed, "annotation_calls": None, "exhausted": 0}

    ensemble = None
    for method in cfg["methods"]["list"]:
        if method == "base":
            mean, se = evaluate_policy(base, env, eval_n, _rng(seed, H, n, 10))
        elif method == "expert":
            mean, se = _evaluate_expert(
                env, base, env_cfg["rejection_max_attempts"], eval_n, _rng(seed, H, n, 11)
            )
        elif method == "sft":
            rng = _rng(seed, H, n, 20)
            pool = env.prompts("train")
            idx = rng.choice(len(pool), size=n)
            traces = batch_rejection_sample(
                base, env, [pool[i] for i in idx], env_cfg["rejection_max_attempts"], rng
            )
            kept = [t for t in traces if not isinstance(t, Exhausted)]
            info["exhausted"] += len(traces) - len(kept)
            result = sft_train(kept, base, _train_cfg(cfg["sft"], seed), space=space, env=env)
            mean, se = evaluate_policy(result.policy, env, eval_n, _rng(seed, H, n, 21))
        elif method in ("rl_verifier", "rl_ground_truth"):
            if method == "rl_verifier":
                ds = annotate_rollouts(
                    base,
                    env,
                    budget=n,
                    rng=_rng(seed, H, n, 30),
                    per_trajectory=cfg["budget"]["per_trajectory"],
                )
                info["annotation_calls"] = ds.annotation_calls_used
                vcfg = _train_cfg(
                    cfg["verifier"], seed, bootstrap_fraction=cfg["verifier"]["bootstrap_fraction"]
                )
                ensemble = pessimistic_ensemble(ds, cfg["verifier"]["ensemble_size"], vcfg, space)
                source = VerifierRewards(ensemble)
            else:
                source = GroundTruthRewards(env)
            rl = reinforce_train(
                base, source, env, _train_cfg(cfg["rl"], seed), space=space, split="train"
            )
            mean, se = evaluate_policy(rl.policy, env, eval_n, _rng(seed, H, n, 31))
        else:  # pragma: no cover - validated earlier
            raise ConfigError(f"unknown method {method}")
        records.append(SweepRecord(method, H, n, seed, "normalized_return", mean, se))
        records.append(
            SweepRecord(
                method, H, n, seed, "raw_return", mean * env.max_reward, se * env.max_reward
            )
        )
    if info["annotation_calls"] is not None:
        records.append(
            SweepRecord("rl_verifier", H, n, seed, "annotation_calls", float(info["annotation_calls"]), 0.0)
        )
    return records, info


def _grid_point_star(args):
    return run_grid_point(*args)


@dataclass
class SweepResult:
    records: list[SweepRecord]
    manifest: dict


def run_sweep(
    cfg: ExperimentConfig,
    deterministic: bool = False,
    workers: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> SweepResult:
    cfg.validate()
    if workers is None:
        workers = int(os.environ.get("TTCLAB_MAX_WORKERS", "1"))
    if deterministic:
        workers = 1
    tasks = [
        (cfg.sections, H, n, seed) for (H, n) in cfg.grid() for seed in cfg["run"]["seeds"]
    ]
    records: list[SweepRecord] = []
    infos: list[dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for recs, info in pool.map(_grid_point_star, tasks):
                records.extend(recs)
                infos.append(info)
    else:
        for task in tasks:
            recs, info = _grid_point_star(task)
            records.extend(recs)
            infos.append(info)
    for r in records:
        if r.metric == "annotation_calls" and r.value > r.n:
            raise AssertionError(f"annotation calls {r.value} exceed budget {r.n}")
    manifest = {
        "config_hash": cfg.hash(),
        "seeds": cfg["run"]["seeds"],
        "grid": cfg.grid(),
        "coupled": cfg["budget"]["couple"],
        "couple_c": cfg["budget"]["couple_c"] if cfg["budget"]["couple"] else None,
        "points": sorted(infos, key=lambda d: (d["H"], d["n"], d["seed"])),
        "created_unix": time.time(),
    }
    target = Path(out_dir) if out_dir else None
    if target is not None:
        target.mkdir(parents=True, exist_ok=True)
        write_records(target / "records.csv", records)
        (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return SweepResult(sorted(records, key=SweepRecord.key), manifest)


# ---------------------------------------------------------------------------
# gap analysis


@dataclass
class GapTableRow:
    H: int
    n: int
    mean_gap: float
    ci_lo: float
    ci_hi: float
    n_seeds: int


@dataclass
class GapReport:
    pair: tuple[str, str]
    rows: list[GapTableRow]
    slope: Optional[float]
    slope_ci: Optional[tuple[float, float]]
    degenerate: bool
    h_min_fit: int


def gap_analysis(
    records,
    pair: tuple[str, str],
    metric: str = "normalized_return",
    h_min_fit: int = 32,
    n_boot: int = 2000,
    ci_level: float = 0.90,
    boot_seed: int = 0,
) -> GapReport:
    """Per-grid-point mean gap with seed-bootstrap CI plus a log-log gap slope.

    The slope is fit on seed-mean gaps over grid points with H >= h_min_fit
    (the smallest horizons sit near ceiling/floor for both methods); the CI is
    a percentile bootstrap over seed resamples at level `ci_level`.
    """
    if isinstance(records, (str, Path)):
        records = read_records(records)
    a, b = pair
    vals: dict[tuple[int, int, int], dict[str, float]] = {}
    for r in records:
        if r.metric != metric or r.method not in (a, b):
            continue
        vals.setdefault((r.H, r.n, r.seed), {})[r.method] = r.value
    points: dict[tuple[int, int], dict[int, float]] = {}
    for (H, n, seed), d in vals.items():
        if a in d and b in d:
            points.setdefault((H, n), {})[seed] = d[a] - d[b]
    if not points:
        raise InsufficientSeeds("no grid points contain both methods")
    rng = np.random.default_rng(boot_seed)
    lo_q, hi_q = 50 * (1 - ci_level), 100 - 50 * (1 - ci_level)
    rows = []
    common_seeds: Optional[set[int]] = None
    for (H, n), by_seed in sorted(points.items()):
        if len(by_seed) < 3:
            raise InsufficientSeeds(f"grid point (H={H}, n={n}) has {len(by_seed)} seeds; need >= 3")
        gaps = np.asarray([by_seed[s] for s in sorted(by_seed)])
        boots = rng.choice(gaps, size=(n_boot, len(gaps))).mean(axis=1)
        rows.append(
            GapTableRow(
                H,
                n,
                float(gaps.mean()),
                float(np.percentile(boots, lo_q)),
                float(np.percentile(boots, hi_q)),
                len(gaps),
            )
        )
        common_seeds = set(by_seed) if common_seeds is None else common_seeds & set(by_seed)
    degenerate = a == b
    slope = None
    slope_ci = None
    fit_points = [(H, n) for (H, n) in sorted(points) if H >= h_min_fit]
    if not degenerate and len(fit_points) >= 2 and common_seeds:
        seeds = sorted(common_seeds)
        gap_matrix = np.asarray(
            [[points[pt][s] for s in seeds] for pt in fit_points]
        )  # (P, S)
        log_h = np.log(np.asarray([h for h, _ in fit_points], dtype=float))
        mean_gaps = gap_matrix.mean(axis=1)
        if (mean_gaps > 0).all():
            slope = float(np.polyfit(log_h, np.log(mean_gaps), 1)[0])
            boots = []
            for _ in range(n_boot):
                pick = rng.integers(0, len(seeds), size=len(seeds))
                m = gap_matrix[:, pick].mean(axis=1)
                if (m > 0).all():
                    boots.append(np.polyfit(log_h, np.log(m), 1)[0])
            if len(boots) >= max(100, n_boot // 10):
                slope_ci = (
                    float(np.percentile(boots, lo_q)),
                    float(np.percentile(boots, hi_q)),
                )
        else:
            degenerate = True
    elif not degenerate:
        degenerate = True
    return GapReport(pair, rows, slope, slope_ci, degenerate, h_min_fit)


# ---------------------------------------------------------------------------
# plots


def emit_plots(records, out_dir, metric: str = "normalized_return", fmt: str = "svg") -> list[Path]:
    """Deterministic line plots: metric vs H, metric vs n, and first-pair gap vs H."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "ttclab"
    import matplotlib.pyplot as plt

    if isinstance(records, (str, Path)):
        records = read_records(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for r in records if r.metric == metric]
    methods = sorted({r.method for r in rows})
    files = []

    def _save(fig, name):
        path = out / f"{name}.{fmt}"
        fig.savefig(path, metadata={"Date": None} if fmt == "svg" else None)
        plt.close(fig)
        files.append(path)

    def _panel(x_of, x_label, name):
        fig, ax = plt.subplots(figsize=(6, 4))
        for method in methods:
            pts: dict[float, list[float]] = {}
            for r in rows:
                if r.method == method:
                    pts.setdefault(x_of(r), []).append(r.value)
            if not pts:
                continue
            xs = sorted(pts)
            means = [float(np.mean(pts[x])) for x in xs]
            for x in xs:
                ax.plot([x] * len(pts[x]), pts[x], ".", alpha=0.35, markersize=3)
            ax.plot(xs, means, marker="o", label=method)
        ax.set_xscale("log", base=2)
        ax.set_xlabel(x_label)
        ax.set_ylabel(metric)
        if methods:
            ax.legend()
        fig.tight_layout()
        _save(fig, name)

    _panel(lambda r: r.H, "H (token budget)", f"{metric}_vs_H")
    _panel(lambda r: r.n, "n (data budget)", f"{metric}_vs_n")

    fig, ax = plt.subplots(figsize=(6, 4))
    if len(methods) >= 2:
        a, b = methods[0], methods[1]
        by_hs: dict[int, dict[str, list[float]]] = {}
        for r in rows:
            if r.method in (a, b):
                by_hs.setdefault(r.H, {}).setdefault(r.method, []).append(r.value)
        xs = sorted(h for h, d in by_hs.items() if a in d and b in d)
        gaps = [float(np.mean(by_hs[h][a]) - np.mean(by_hs[h][b])) for h in xs]
        if xs:
            ax.plot(xs, gaps, marker="o", label=f"{a} - {b}")
            ax.set_xscale("log", base=2)
            ax.legend()
    ax.set_xlabel("H (token budget)")
    ax.set_ylabel(f"gap in {metric}")
    fig.tight_layout()
    _save(fig, f"gap_vs_H")
    return files
