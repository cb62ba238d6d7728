"""Acceptance criteria, one test per criterion, each echoing a PASS/FAIL line.

The benchmark corridor used by criteria 5, 6, 7 and 9 is the stochastic
``walkway`` bundle: three rooms of three cells on a slipping conveyor.
"""

from __future__ import annotations

import hashlib
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES, brute_force_high, random_instance
from hrlab.bench.cli import main
from hrlab.bench.envs import REGISTRY, get_bundle
from hrlab.bench.overlays import fit_growth
from hrlab.core import solve_flat_optimal
from hrlab.hlml import build_schedule, compare_ratio, run_hlml
from hrlab.options import check_assumption2, extract_sub_mdp, flatten_options, simulate_option_batch
from hrlab.oracle import bias_inequality_check, plan_smdp, solve_joint_optimum
from hrlab.oucbvi import (
    burn_in,
    oucbvi_bonus,
    renewal_bound_d,
    run_oucbvi,
)
from hrlab.ucbvi import flat_bonus, log_term, run_ucbvi_flat, run_ucbvi_sub
from test_oucbvi import CASES as SMDP_CASES
from test_oucbvi import hand_smdp_bonus, make_est
from test_ucbvi import FLAT_CASES, hand_bonus

BENCH = "walkway"
K_LONG = 2**14
SEEDS = list(range(1, 21))


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def cell_seed(*parts) -> int:
    return int.from_bytes(hashlib.sha256("/".join(map(str, parts)).encode()).digest()[:8], "little")


@pytest.fixture(scope="module")
def bench():
    env = get_bundle(BENCH)
    joint = solve_joint_optimum(env.model, env.options, s1=env.s1)
    return env, joint


@pytest.fixture(scope="module")
def hlml_runs(bench):
    env, joint = bench
    t = time.perf_counter()
    runs = [run_hlml(env.model, env.options, K_LONG, 0.1, seed=s, s1=env.s1, joint=joint) for s in SEEDS]
    return runs, time.perf_counter() - t


@pytest.fixture(scope="module")
def flat_runs(bench):
    env, _ = bench
    return [run_ucbvi_flat(env.model, K_LONG, 0.1, seed=s, s1=env.s1) for s in SEEDS]


# --------------------------------------------------------------------------- 1


ORACLE_SIZES = [(2, 3, 2), (3, 3, 3), (2, 4, 4), (4, 4, 2), (3, 5, 2), (2, 8, 2), (5, 3, 2), (2, 2, 5)]


def test_criterion_01_oracle_equivalence():
    worst, slowest, n = 0.0, 0.0, 0
    for i, (S, H, O) in enumerate(ORACLE_SIZES):
        assert O ** (S * H) <= 10**5
        for seed in range(3):
            m, opts = random_instance(100 * i + seed, S=S, A=2, H=H, O=O)
            sm = flatten_options(m, opts, check=False)
            t = time.perf_counter()
            _, vals = plan_smdp(sm, check=False)
            ref = brute_force_high(sm)
            slowest = max(slowest, time.perf_counter() - t)
            worst = max(worst, abs(vals.V[0, 0] - ref))
            n += 1
    ok = worst <= 1e-9 and slowest < 60
    record(1, ok, f"{n} instances, max |plan - brute force| = {worst:.2e}, slowest {slowest:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 2


N_MC = 100_000


def flattening_scan():
    """Per-cell z-scores of Monte Carlo option executions against the flattened model."""
    out = {}
    for name in REGISTRY:
        env = get_bundle(name)
        m, opts = env.model, env.options
        sm = flatten_options(m, opts)
        kernel_bad, reward_bad, n_cells, n_nonzero, max_z = [], [], 0, 0, 0.0
        for o, opt in enumerate(opts):
            for h in range(1, m.H + 1):
                for s in range(m.S):
                    if not opt.init[h - 1, s]:
                        continue
                    n_cells += 1
                    st, sg, tot = simulate_option_batch(m, opt, s, h, N_MC, seed=cell_seed(name, o, h, s))
                    emp = np.zeros((m.H + 1, m.S))
                    np.add.at(emp, (sg - 1, st), 1.0)
                    emp /= N_MC
                    p = sm.kernel[h - 1, s, o]
                    sd = np.sqrt(p * (1 - p) / N_MC)
                    dev = np.abs(emp - p)
                    n_nonzero += int((p > 0).sum())
                    for hh, ss in zip(*np.nonzero(dev > 3 * sd + 1e-12)):
                        kernel_bad.append((o, h, s, hh + 1, ss, float(dev[hh, ss] / sd[hh, ss]) if sd[hh, ss] else math.inf))
                    z = np.divide(dev, sd, out=np.zeros_like(dev), where=sd > 0)
                    max_z = max(max_z, float(z.max()))
                    r_sd = tot.std() / math.sqrt(N_MC)
                    if abs(tot.mean() - sm.reward[h - 1, s, o]) > 3 * r_sd + 1e-12:
                        reward_bad.append((o, h, s))
        out[name] = dict(kernel_bad=kernel_bad, reward_bad=reward_bad, cells=n_cells, nonzero=n_nonzero, max_z=max_z)
    return out


@pytest.fixture(scope="module")
def scan():
    return flattening_scan()


def test_criterion_02_flattening_fidelity(scan):
    kb = sum(len(v["kernel_bad"]) for v in scan.values())
    rb = sum(len(v["reward_bad"]) for v in scan.values())
    cells = sum(v["cells"] for v in scan.values())
    nz = sum(v["nonzero"] for v in scan.values())
    ok = kb == 0 and rb == 0
    detail = ", ".join(f"{k}: {len(v['kernel_bad'])}" for k, v in scan.items() if v["kernel_bad"])
    record(2, ok, f"{cells} (s,o,h) cells x {N_MC} runs, {nz} non-zero kernel cells, outside 3 sigma: kernel {kb} ({detail or 'none'}), reward {rb}")
    assert ok


def test_flattening_exceedances_match_chance_level(scan):
    # companion diagnostic: with exact flattening each non-zero cell leaves 3 sigma with probability ~0.27%
    kb = sum(len(v["kernel_bad"]) for v in scan.values())
    rb = sum(len(v["reward_bad"]) for v in scan.values())
    nz = sum(v["nonzero"] for v in scan.values())
    cells = sum(v["cells"] for v in scan.values())
    p_tail = 2 * stats.norm.sf(3.0)
    assert stats.binom.sf(kb - 1, nz, p_tail) > 1e-3
    assert stats.binom.sf(rb - 1, cells, p_tail) > 1e-3
    # no cell is off by more than a family-wise bound over every non-zero cell
    bonf = stats.norm.isf(1e-3 / (2 * nz))
    assert max(v["max_z"] for v in scan.values()) < bonf


# --------------------------------------------------------------------------- 3


def test_criterion_03_flat_reduction_identity():
    env = get_bundle("flat-reduction")
    joint = solve_joint_optimum(env.model, env.options, s1=env.s1)
    _, Vf = solve_flat_optimal(env.model)
    diff = abs(joint.value - Vf[0, env.s1])
    run = run_oucbvi(env.model, env.options, 200, 0.1, seed=1, s1=env.s1)
    hl = run_hlml(env.model, env.options, 200, 0.1, seed=1, s1=env.s1, joint=joint)
    d_ok = bool(np.all(run.decisions == env.model.H) and np.all(hl.trace.decisions == env.model.H))
    ok = diff <= 1e-10 and d_ok
    record(3, ok, f"|V*_* - V*_flat| = {diff:.1e}, d = H on every episode: {d_ok}")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion_04_bonus_formula():
    worst = 0.0
    for n, probs, vals, nsums, S, A, T, K, delta in FLAT_CASES:
        L = log_term(S, A, K, T, delta)
        got = flat_bonus(n, np.array(probs), np.array(vals), np.array(nsums), S, A, T, L)
        worst = max(worst, abs(got - hand_bonus(n, probs, vals, nsums, S, A, T, L)))
    for H, S, O, K, delta, n, arrivals, visits in SMDP_CASES:
        est = make_est(H, S, O, K, delta, n, arrivals, visits)
        vt = np.random.default_rng(n).random((H + 1, S)) * H
        vt[H] = 0.0
        nsum = est.n.sum(axis=2)
        cells = [(c / n, vt[h2 - 1, s2], nsum[h2 - 1, s2] if h2 <= H else 0) for c, s2, h2 in arrivals]
        L = math.log(5 * S * O * K * H / delta)
        worst = max(worst, abs(oucbvi_bonus(est, vt, 0, 0, 1) - hand_smdp_bonus(n, cells, H, S, O, L)))
    anchor = make_est(3, 2, 2, 8, 0.1, 4, [(2, 0, 2), (2, 1, 3)])
    vt = np.zeros((4, 2))
    vt[1, 0], vt[2, 1] = 1.0, 2.0
    worst = max(worst, abs(oucbvi_bonus(anchor, vt, 0, 0, 1) - 35.96862528166519))
    ok = worst <= 1e-12
    record(4, ok, f"{len(FLAT_CASES)} flat + {len(SMDP_CASES) + 1} option configurations, max error {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------- 5


def test_criterion_05_optimism(bench):
    env, joint = bench
    delta, runs, K = 0.1, 200, 128
    opts = env.options.with_policies(joint.pis)
    v_star = float(plan_smdp(flatten_options(env.model, opts))[1].V[0, env.s1])
    hits = 0
    for seed in range(runs):
        r = run_oucbvi(env.model, opts, K, delta, seed=seed, s1=env.s1)
        hits += bool(np.all(r.vtilde_start >= v_star - 1e-9))
    sub_hits = {}
    for opt in env.options:
        sub = extract_sub_mdp(env.model, opt)
        sub_hits[opt.id] = sum(run_ucbvi_sub(sub, K, delta, seed=seed)["optimistic"] for seed in range(runs))
    need = math.ceil((1 - delta) * runs)
    ok = hits >= need and all(v >= need for v in sub_hits.values())
    record(5, ok, f"Options-UCBVI optimistic in {hits}/{runs} runs, sub-MDP UCBVI {sub_hits} (need {need})")
    assert ok


# --------------------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_06_sublinear_regret(bench):
    env, joint = bench
    opts = env.options.with_policies(joint.pis)
    smdp = flatten_options(env.model, opts)
    t = time.perf_counter()
    runs = [run_oucbvi(env.model, opts, K_LONG, 0.1, seed=s, s1=env.s1, smdp=smdp) for s in SEEDS]
    elapsed = time.perf_counter() - t
    mean_cum = np.mean([r.cum_regret for r in runs], axis=0)
    fit = fit_growth(mean_cum)
    d = float(np.mean([r.d_running[-1] for r in runs]))
    overlay = np.mean([r.overlay for r in runs], axis=0)
    k_burn = burn_in(env.model.H, env.model.S, env.options.O, d)
    past = np.arange(1, K_LONG + 1) >= k_burn
    below_past = bool(np.all(mean_cum[past] <= overlay[past]))
    below_all = bool(np.all(mean_cum <= overlay))
    ok = fit.prefers_sqrt and below_past and elapsed < 600
    record(
        6,
        ok,
        f"AIC sqrt {fit.aic_sqrt:.1f} vs linear {fit.aic_lin:.1f}; burn-in {k_burn:.3g} episodes "
        f"({int(past.sum())} past it, below overlay there: {below_past}; below at every K: {below_all}); "
        f"final mean regret {mean_cum[-1]:.1f}, d {d:.2f}, {elapsed:.0f}s",
    )
    assert ok


# --------------------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_07_hlml_convergence(bench, hlml_runs):
    env, joint = bench
    runs, elapsed = hlml_runs
    a2 = check_assumption2(env.model, env.options, s1=env.s1)
    finals = np.array([r.final_value for r in runs])
    rel = 1 - finals / joint.value
    within = rel <= 0.05
    below = [bool(np.all(r.trace.cum_regret <= r.trace.overlay)) for r in runs]
    ident = max(float(np.max(np.abs(r.trace.bias + r.trace.proper_regret - r.trace.total_gap))) for r in runs)
    ok = a2.holds and bool(within.all()) and np.mean(below) >= 0.9 and ident <= 1e-9
    record(
        7,
        ok,
        f"local optima jointly optimal: {a2.holds}; mean final value {np.mean(finals):.4f} vs V*_* {joint.value:.4f} "
        f"(seeds within 5%: {int(within.sum())}/{len(runs)}, worst {rel.max():.3f}); below overlay in "
        f"{sum(below)}/{len(runs)} seeds; identity error {ident:.1e}; {elapsed:.0f}s",
    )
    assert ok


# --------------------------------------------------------------------------- 8


def perturbed_pair(env, joint, rng):
    """Joint optimum with each entry redrawn uniformly at random at a random rate."""
    m = env.model
    rate = rng.choice([0.5, 0.2, 0.05, 0.01])
    pis = []
    for opt, p in zip(env.options, joint.pis):
        alt = rng.choice(opt.allowed_actions(m.A), size=p.shape)
        pis.append(np.where(rng.random(p.shape) < rate, alt, p))
    sm = flatten_options(m, env.options.with_policies(pis), check=False)
    mu = joint.mu.copy()
    for h in range(m.H):
        for s in range(m.S):
            allowed = np.flatnonzero(sm.init[h, s])
            if allowed.size and (mu[h, s] < 0 or rng.random() < rate):
                mu[h, s] = rng.choice(allowed)
    return mu, pis


def test_criterion_08_bias_inequality():
    need, summary, ok = 20, {}, True
    for name in REGISTRY:
        env = get_bundle(name)
        joint = solve_joint_optimum(env.model, env.options, s1=env.s1)
        rng = np.random.default_rng(cell_seed("bias", name))
        finite, worst, tries = 0, math.inf, 0
        while finite < need and tries < 2000:
            tries += 1
            mu, pis = perturbed_pair(env, joint, rng)
            rep = bias_inequality_check(env.model, env.options, mu, pis, joint.pis, joint)
            if rep.skipped or not (math.isfinite(rep.C_H) and math.isfinite(rep.C_L)):
                continue
            finite += 1
            worst = min(worst, rep.slack_high, rep.slack_low)
        summary[name] = (finite, worst)
        ok &= finite >= need and worst >= -1e-9
    detail = "; ".join(f"{k}: {f} pairs, min slack {w:.1e}" for k, (f, w) in summary.items())
    record(8, ok, detail)
    assert ok


# --------------------------------------------------------------------------- 9


@pytest.mark.slow
def test_criterion_09_hierarchy_vs_flat(bench, hlml_runs, flat_runs):
    env, _ = bench
    runs, _ = hlml_runs
    ratio = float(np.mean([r.trace.ratio[-1] for r in runs]))
    hl = np.array([r.trace.cum_regret[-1] for r in runs])
    fl = np.array([r.cum_regret[-1] for r in flat_runs])
    fr = get_bundle("flat-reduction")
    fr_ratio = compare_ratio(fr.model.S, fr.model.A, fr.options.O, fr.model.H, fr.model.H, 1.0)
    ok = ratio < 1 and hl.mean() < fl.mean()
    record(
        9,
        ok,
        f"ratio {ratio:.3f}; mean regret at K=2^14 HLML {hl.mean():.0f} vs flat {fl.mean():.0f} "
        f"(HLML lower on {int((hl < fl).sum())}/{len(hl)} paired seeds); flat-reduction ratio {fr_ratio:.2f}",
    )
    assert ok


# --------------------------------------------------------------------------- 10


def test_criterion_10_renewal_bound():
    env = get_bundle("duration")
    delta, runs = 0.05, 200
    meta = env.meta
    bound = renewal_bound_d(meta["tau_min"], meta["tau_max"], [meta["mean_duration"]] * env.options.O, env.model.H, delta)
    held = 0
    worst = 0.0
    for seed in range(runs):
        r = run_oucbvi(env.model, env.options, env.K, delta, seed=seed, s1=env.s1)
        held += r.d_running[-1] <= bound
        worst = max(worst, float(r.d_running[-1]))
    ok = held >= math.ceil(0.95 * runs)
    record(10, ok, f"d <= {bound:.2f} in {held}/{runs} runs (largest measured d {worst:.2f}, H/tau_min {env.model.H / meta['tau_min']:.0f})")
    assert ok


# --------------------------------------------------------------------------- 11


def test_criterion_11_reproducibility(tmp_path):
    cfg = {"env": BENCH, "algorithm": "hlml", "K": 62, "seeds": [1, 2], "emit": ["csv", "json", "plotdata"]}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    sums = {K: build_schedule(K).total() for K in (2, 6, 7, 62, 1000)}
    ok = same and all(K == v for K, v in sums.items())
    record(11, ok, f"{len(files)} output files byte-identical: {same}; schedule totals {sums}")
    assert ok
