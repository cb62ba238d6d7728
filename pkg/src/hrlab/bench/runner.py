"""Seeded experiment execution and trace emission."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from ..hlml import TRACE_COLUMNS, HlmlConfig, build_schedule, run_hlml
from ..oracle import JointOptimum, solve_joint_optimum
from ..oucbvi import run_oucbvi
from ..ucbvi import run_ucbvi_flat
from .config import ConfigError, ExperimentConfig
from .envs import EnvironmentBundle, get_bundle
from .overlays import OVERLAY_CONSTANTS, emit_overlays

OUCBVI_COLUMNS = ("episode", "level", "stage", "decisions", "cum_regret", "v_opt_fixed", "v_played", "d_running", "bound_overlay")
FLAT_COLUMNS = ("episode", "total_gap", "cum_regret", "v_played", "vtilde_start")


class InvariantError(RuntimeError):
    """An internal consistency check failed during a run."""


def resolve_env(name: str) -> EnvironmentBundle:
    try:
        return get_bundle(name)
    except KeyError:
        raise ConfigError("env", f"unknown environment {name!r}") from None


@lru_cache(maxsize=8)
def _joint(name: str) -> JointOptimum:
    env = resolve_env(name)
    return solve_joint_optimum(env.model, env.options, s1=env.s1)


def run_seed(cfg: ExperimentConfig, seed: int) -> list[dict[str, Any]]:
    """Trace rows of one seeded run."""
    env = resolve_env(cfg.env)
    if cfg.algorithm == "oucbvi-fixed-options":
        pis = env.optimal_inner()
        opts = env.options if pis is None else env.options.with_policies(pis)
        run = run_oucbvi(env.model, opts, cfg.K, cfg.delta, seed, s1=env.s1, reward_mode=cfg.reward_mode)
        cum = run.cum_regret
        return [
            {
                "episode": k + 1,
                "level": "H",
                "stage": 1,
                "decisions": int(run.decisions[k]),
                "cum_regret": float(cum[k]),
                "v_opt_fixed": run.v_opt_fixed,
                "v_played": float(run.v_played[k]),
                "d_running": float(run.d_running[k]),
                "bound_overlay": float(run.overlay[k]),
            }
            for k in range(cfg.K)
        ]
    if cfg.algorithm == "ucbvi-flat":
        run = run_ucbvi_flat(env.model, cfg.K, cfg.delta, seed, s1=env.s1)
        cum = run.cum_regret
        return [
            {
                "episode": k + 1,
                "total_gap": float(run.gap[k]),
                "cum_regret": float(cum[k]),
                "v_played": float(run.v_played[k]),
                "vtilde_start": float(run.vtilde_start[k]),
            }
            for k in range(cfg.K)
        ]
    joint = _joint(cfg.env)
    hcfg = HlmlConfig(reset_high=cfg.reset_high, reset_low=cfg.reset_low, draw=cfg.draw, reward_mode=cfg.reward_mode)
    res = run_hlml(env.model, env.options, cfg.K, cfg.delta, seed, s1=env.s1, joint=joint, config=hcfg)
    tr = res.trace
    if tr.decomposed:
        err = np.abs(tr.bias + tr.proper_regret - tr.total_gap)
        if np.any(err > 1e-9):
            raise InvariantError(f"decomposition identity broken by {float(err.max()):.3e} (seed {seed})")
    for label, a, b in res.frozen_digests:
        if a != b:
            raise InvariantError(f"frozen policy changed during phase {label} (seed {seed})")
    return tr.rows()


def _columns(algorithm: str) -> tuple[str, ...]:
    return {"oucbvi-fixed-options": OUCBVI_COLUMNS, "ucbvi-flat": FLAT_COLUMNS, "hlml": TRACE_COLUMNS}[algorithm]


def _fmt(v: Any) -> Any:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path: Path, rows: list[dict[str, Any]], columns: tuple[str, ...] | None = None) -> None:
    cols = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r[c]) for c in cols})


def read_csv(path: str | Path) -> list[dict[str, Any]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv: dict[str, Any] = {}
        for k, v in r.items():
            try:
                conv[k] = int(v)
            except ValueError:
                try:
                    conv[k] = float(v)
                except ValueError:
                    conv[k] = v
        out.append(conv)
    return out


def aggregate(per_seed: list[list[dict[str, Any]]], column: str = "cum_regret") -> list[dict[str, Any]]:
    """Per-episode mean and 10th/90th percentile of ``column`` across seeds."""
    if not per_seed:
        return []
    M = np.array([[float(r[column]) for r in rows] for rows in per_seed])
    mean = M.mean(axis=0)
    p10, p90 = np.percentile(M, [10, 90], axis=0)
    return [
        {"episode": k + 1, "mean": float(mean[k]), "p10": float(p10[k]), "p90": float(p90[k])}
        for k in range(M.shape[1])
    ]


def _threads() -> int:
    raw = os.environ.get("LAB_THREADS")
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError("LAB_THREADS", f"not an integer: {raw!r}") from None


def run_all(cfg: ExperimentConfig) -> list[list[dict[str, Any]]]:
    """Run every seed (in parallel up to ``LAB_THREADS``), results in seed order."""
    resolve_env(cfg.env)
    n = min(_threads(), len(cfg.seeds))
    if n <= 1:
        return [run_seed(cfg, s) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(run_seed, cfg, s) for s in cfg.seeds]
        return [f.result() for f in futures]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> dict[str, Any]:
    """Execute ``cfg`` and write traces, aggregate and manifest. Returns the manifest."""
    env = resolve_env(cfg.env)
    per_seed = run_all(cfg)
    outdir = Path(out or cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    cols = _columns(cfg.algorithm)
    files: dict[str, str] = {}
    if "csv" in cfg.emit:
        for seed, rows in zip(cfg.seeds, per_seed):
            p = outdir / f"{cfg.algorithm}_seed{seed}.csv"
            write_csv(p, rows, cols)
            files[p.name] = _sha(p)
    agg = aggregate(per_seed)
    p = outdir / f"{cfg.algorithm}_aggregate.csv"
    write_csv(p, agg, ("episode", "mean", "p10", "p90"))
    files[p.name] = _sha(p)
    if "plotdata" in cfg.emit:
        mean_rows = [{"episode": a["episode"], "cum_regret": a["mean"]} for a in agg]
        for key in ("d_running", "decisions", "C_H_running", "C_L_running"):
            if per_seed[0] and key in per_seed[0][0]:
                M = np.array([[float(r[key]) for r in rows] for rows in per_seed]).mean(axis=0)
                for r, v in zip(mean_rows, M):
                    r[key] = float(v)
        plot, _ = emit_overlays(mean_rows, env, cfg.algorithm, K=cfg.K, delta=cfg.delta)
        p = outdir / f"{cfg.algorithm}_plotdata.csv"
        write_csv(p, plot)
        files[p.name] = _sha(p)
    manifest: dict[str, Any] = {
        "config": cfg.to_dict() | {"out": None},
        "config_digest": cfg.digest(),
        "env": env.name,
        "seeds": list(cfg.seeds),
        "algorithm": cfg.algorithm,
        "modes": {"reward_mode": cfg.reward_mode, "reset_high": cfg.reset_high, "reset_low": cfg.reset_low, "draw": cfg.draw},
        "overlay_constants": OVERLAY_CONSTANTS,
        "final_cum_regret_mean": agg[-1]["mean"] if agg else None,
        "files": files,
    }
    if cfg.algorithm == "hlml":
        sched = build_schedule(cfg.K)
        if sched.total() != cfg.K:
            raise InvariantError(f"schedule sums to {sched.total()} instead of {cfg.K}")
        manifest["schedule"] = [list(p) for p in sched.phases]
    if "json" in cfg.emit:
        (outdir / f"{cfg.algorithm}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
