"""Command-line interface: ``lab validate | check | plan | run | compare | overlay | export``.

Exit codes: 0 ok, 2 usage or configuration error, 3 invariant breach or failed check.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..core import ModelError, solve_flat_optimal, validate_mdp
from ..hlml import compare_ratio
from ..options import SizeError, check_admissibility, check_assumption2
from ..oracle import plan_smdp, solve_joint_optimum
from ..options import flatten_options
from .config import ConfigError, ExperimentConfig
from .envs import REGISTRY, get_bundle, save_bundle
from .overlays import emit_overlays, fit_growth
from .runner import InvariantError, read_csv, resolve_env, run_experiment, write_csv

EXIT_OK, EXIT_USAGE, EXIT_BREACH = 0, 2, 3


def _env(ref: str):
    try:
        return get_bundle(ref)
    except KeyError:
        raise ConfigError("env", f"unknown environment {ref!r}") from None
    except (ModelError, json.JSONDecodeError) as exc:
        raise ConfigError("env", str(exc)) from exc


def cmd_validate(args) -> int:
    env = _env(args.env)
    report = validate_mdp(env.model)
    bad = check_admissibility(env.options, env.model)
    for line in report:
        print(line)
    for s, h, o in bad:
        print(f"option {env.options[o].id} may stop at (s={s}, h={h}) where no option can start")
    ok = not report and not bad
    print(f"{env.name}: {'valid' if ok else 'INVALID'} (S={env.model.S}, A={env.model.A}, H={env.model.H}, O={env.options.O})")
    return EXIT_OK if ok else EXIT_BREACH


def cmd_check(args) -> int:
    rc = cmd_validate(args)
    if rc != EXIT_OK or not args.assumptions:
        return rc
    env = _env(args.env)
    try:
        rep = check_assumption2(env.model, env.options, cap=args.cap, s1=env.s1)
    except SizeError as exc:
        print(f"assumption check skipped: {exc}")
        return EXIT_BREACH if "assumption2" in env.tags else EXIT_OK
    for oid, why in rep.violations:
        print(f"option {oid}: {why}")
    print(f"local/joint optimality: {'holds' if rep.holds else 'violated'} (exact={rep.exact}, local optima={rep.local_counts})")
    if "assumption2" in env.tags and not rep.holds:
        return EXIT_BREACH
    return EXIT_OK


def cmd_plan(args) -> int:
    env = _env(args.env)
    smdp = flatten_options(env.model, env.options)
    _, vals = plan_smdp(smdp)
    _, Vf = solve_flat_optimal(env.model)
    out = {"env": env.name, "V_fixed_options": float(vals.V[0, env.s1]), "V_flat": float(Vf[0, env.s1])}
    try:
        joint = solve_joint_optimum(env.model, env.options, cap=args.cap, s1=env.s1)
        out |= {"V_joint": joint.value, "joint_method": joint.method, "joint_exact": joint.exact, "joint_count": joint.count}
    except SizeError as exc:
        out["V_joint"] = None
        out["joint_error"] = str(exc)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=list(range(1, args.seeds + 1)))
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    resolve_env(cfg.env)
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    man = run_experiment(cfg)
    print(f"{cfg.algorithm} on {cfg.env}: {len(cfg.seeds)} seeds, mean final regret {man['final_cum_regret_mean']:.3f}")
    print(f"manifest digest {cfg.digest()}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    env = resolve_env(cfg.env)
    out = Path(cfg.out)
    hl = run_experiment(replace(cfg, algorithm="hlml"), out)
    fl = run_experiment(replace(cfg, algorithm="ucbvi-flat"), out)
    rows = read_csv(out / "hlml_seed{}.csv".format(cfg.seeds[0])) if "csv" in cfg.emit else []
    ratio = rows[-1]["ratio_eq12"] if rows else None
    H, A, O = env.model.H, env.model.A, env.options.O
    report = {
        "env": env.name,
        "hlml_final_regret": hl["final_cum_regret_mean"],
        "flat_final_regret": fl["final_cum_regret_mean"],
        "ratio_eq12": ratio,
        "ratio_flat_equivalent": compare_ratio(env.model.S, A, O, H, H, 1.0),
        "hierarchy_favored": None if ratio is None else ratio < 1,
        "hlml_below_flat": hl["final_cum_regret_mean"] < fl["final_cum_regret_mean"],
    }
    print(json.dumps(report, indent=2))
    (out / "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_overlay(args) -> int:
    env = _env(args.env)
    rows = read_csv(args.trace)
    algo = args.algorithm or ("hlml" if rows and "C_H_running" in rows[0] else "ucbvi-flat" if rows and "total_gap" in rows[0] and "bias" not in rows[0] else "oucbvi-fixed-options")
    out, flags = emit_overlays(rows, env, algo, K=args.K)
    for f in flags:
        print(f"skipped {f}")
    if out and "cum_regret" in rows[0]:
        fit = fit_growth([r["cum_regret"] for r in rows])
        print(f"growth fit: sqrt-AIC {fit.aic_sqrt:.2f}, linear-AIC {fit.aic_lin:.2f}, prefers {'sqrt' if fit.prefers_sqrt else 'linear'}")
    dest = Path(args.out) if args.out else Path(args.trace).with_suffix(".overlay.csv")
    write_csv(dest, out)
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_export(args) -> int:
    env = _env(args.name)
    save_bundle(env, args.path)
    print(f"wrote {args.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lab", description="Hierarchical RL benchmark harness")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("validate", help="validate a bundle (JSON path or registry name)")
    p.add_argument("env")
    p.set_defaults(fn=cmd_validate)
    p = sub.add_parser("check", help="run structural checkers")
    p.add_argument("env")
    p.add_argument("--assumptions", action="store_true", help="also check local/joint optimality agreement")
    p.add_argument("--cap", type=float, default=1e6)
    p.set_defaults(fn=cmd_check)
    p = sub.add_parser("plan", help="print oracle values")
    p.add_argument("env")
    p.add_argument("--cap", type=float, default=1e6)
    p.set_defaults(fn=cmd_plan)
    for name, fn in (("run", cmd_run), ("compare", cmd_compare)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seeds", type=int, help="use seeds 1..N")
        p.add_argument("--out")
        p.set_defaults(fn=fn)
    p = sub.add_parser("overlay", help="append bound overlays to a trace CSV")
    p.add_argument("trace")
    p.add_argument("--env", required=True)
    p.add_argument("--algorithm", choices=("oucbvi-fixed-options", "ucbvi-flat", "hlml"))
    p.add_argument("--K", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_overlay)
    p = sub.add_parser("export", help=f"write a shipped bundle to JSON ({', '.join(REGISTRY)})")
    p.add_argument("name")
    p.add_argument("path")
    p.set_defaults(fn=cmd_export)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, ModelError) as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_BREACH


if __name__ == "__main__":
    sys.exit(main())
