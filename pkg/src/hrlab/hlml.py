"""HLML: alternate high-level and low-level learning under a doubling schedule.

Stage ``n`` runs ``2^(n-1)`` Options-UCBVI episodes with the inner policies
frozen, fixes the high-level policy, then runs ``2^(n-1)`` episodes in which
every option invocation is delegated to that option's UCBVI learner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import RngStream, TabularMdp
from .oracle import (
    JointOptimum,
    SmdpCache,
    concentrability,
    evaluate_hier_policy,
)
from .options import (
    AdmissibilityError,
    OptionSet,
    SubMdp,
    check_admissibility,
    execute_option,
    extract_sub_mdp,
    policies_digest,
)
from .oucbvi import OptionsUcbvi, smdp_log_term
from .ucbvi import UcbviLearner, invocation_transitions


@dataclass(frozen=True)
class StageSchedule:
    K: int
    phases: tuple[tuple[int, str, int], ...]  # (stage n, level "H"/"L", length)
    truncated: bool

    @property
    def N(self) -> int:
        return self.phases[-1][0] if self.phases else 0

    def total(self) -> int:
        return sum(p[2] for p in self.phases)


def build_schedule(K: int) -> StageSchedule:
    """Phases ``H:1, L:1, H:2, L:2, H:4, ...`` truncated to exactly ``K`` episodes."""
    if K < 2:
        raise ValueError(f"K={K}: the schedule needs at least one episode per level")
    phases = []
    left, n, truncated = K, 1, False
    while left > 0:
        size = 2 ** (n - 1)
        for level in ("H", "L"):
            if left == 0:
                break
            take = min(size, left)
            truncated |= take < size
            phases.append((n, level, take))
            left -= take
        n += 1
    return StageSchedule(K, tuple(phases), truncated)


def compare_ratio(S: int, A: int, O: int, H: int, d: float, alpha: float, C_H: float = 1.0, C_L: float = 1.0) -> float:
    """Hierarchical-to-flat regret ratio ``C^L sqrt(O d / (A H)) + C^H sqrt(O alpha^3)``."""
    if min(S, A, O, H, d) <= 0:
        raise ValueError("ratio inputs must be positive")
    return C_L * math.sqrt(O * d / (A * H)) + C_H * math.sqrt(O * alpha**3)


def hlml_overlay(
    k: np.ndarray | float, H: int, S: int, O: int, A: int, H_O: int, d: np.ndarray | float, L: float, C_H: float, C_L: float
) -> np.ndarray:
    """``C^L L H sqrt(S O k d) + C^H L H_O sqrt(O S A k H_O)`` with unit constants."""
    k = np.asarray(k, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return C_L * L * H * np.sqrt(S * O * k * d) + C_H * L * H_O * np.sqrt(O * S * A * k * H_O)


def flat_lower_bound(k: np.ndarray | float, S: int, A: int, H: int) -> np.ndarray:
    """``H sqrt(S A K H)``."""
    return H * np.sqrt(S * A * np.asarray(k, dtype=np.float64) * H)


@dataclass
class HlmlConfig:
    reset_high: bool = False
    reset_low: bool = False
    draw: str = "per-option"  # or "joint"
    learn_low: bool = True
    reward_mode: str = "known"
    decompose: bool = True

    def __post_init__(self) -> None:
        if self.draw not in ("per-option", "joint"):
            raise ValueError(f"draw mode {self.draw!r} must be 'per-option' or 'joint'")
        if self.reward_mode not in ("known", "estimated"):
            raise ValueError(f"reward mode {self.reward_mode!r} must be 'known' or 'estimated'")


TRACE_COLUMNS = (
    "episode",
    "stage",
    "level",
    "K_n",
    "total_gap",
    "bias",
    "proper_regret",
    "cum_regret",
    "decisions",
    "d_running",
    "C_H_running",
    "C_L_running",
    "ratio_eq12",
    "overlay_thm3",
)


@dataclass
class RegretTrace:
    """Per-episode record; numeric columns are numpy arrays of length ``K``."""

    stage: np.ndarray
    level: np.ndarray  # "H" or "L"
    K_n: np.ndarray
    total_gap: np.ndarray
    bias: np.ndarray
    proper_regret: np.ndarray
    decisions: np.ndarray
    C_H_running: np.ndarray
    C_L_running: np.ndarray
    ratio: np.ndarray
    overlay: np.ndarray
    decomposed: bool
    header: dict[str, Any] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return int(self.total_gap.shape[0])

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.total_gap)

    @property
    def d_running(self) -> np.ndarray:
        return np.cumsum(self.decisions) / np.arange(1, self.K + 1)

    def rows(self) -> list[dict[str, Any]]:
        cum = self.cum_regret
        d = self.d_running
        return [
            {
                "episode": k + 1,
                "stage": int(self.stage[k]),
                "level": str(self.level[k]),
                "K_n": int(self.K_n[k]),
                "total_gap": float(self.total_gap[k]),
                "bias": float(self.bias[k]),
                "proper_regret": float(self.proper_regret[k]),
                "cum_regret": float(cum[k]),
                "decisions": int(self.decisions[k]),
                "d_running": float(d[k]),
                "C_H_running": float(self.C_H_running[k]),
                "C_L_running": float(self.C_L_running[k]),
                "ratio_eq12": float(self.ratio[k]),
                "overlay_thm3": float(self.overlay[k]),
            }
            for k in range(self.K)
        ]


@dataclass
class Provenance:
    stage: int
    level: str
    index: int | dict[str, int]  # episode draw X, or per-option invocation draws
    seed: int


@dataclass
class HlmlResult:
    mu: np.ndarray
    pis: list[np.ndarray]
    trace: RegretTrace
    schedule: StageSchedule
    provenance: list[Provenance]
    final_value: float
    v_star: float | None
    invocations: dict[str, int]
    frozen_digests: list[tuple[str, str, str]]  # (phase, digest of the frozen side at start, at end)


class _LowLearner:
    """UCBVI learner for one option with the embedded option policy of its current plan."""

    def __init__(self, model: TabularMdp, opt_index: int, options: OptionSet, K: int, delta: float):
        self.o = opt_index
        self.opt = options[opt_index]
        self.S = model.S
        self.sub: SubMdp = extract_sub_mdp(model, self.opt)
        self.K, self.delta = K, delta
        self.reset()

    def reset(self) -> None:
        self.learner = UcbviLearner.for_sub_mdp(self.sub, self.K, self.delta)
        self._pi: np.ndarray | None = None

    def current(self) -> np.ndarray:
        if self._pi is None:
            local, _, _ = self.learner.plan()
            self._pi = self.sub.to_option_policy(local, self.opt, self.S)
        return self._pi

    def record(self, transitions: list[tuple[int, int, int, int]]) -> None:
        for st in transitions:
            self.learner.update(*st)
        self.learner.end_episode()

    def refresh(self) -> None:
        if self.learner.dirty:
            self._pi = None


def run_hlml(
    model: TabularMdp,
    options: OptionSet,
    K: int,
    delta: float,
    seed: int,
    s1: int = 0,
    joint: JointOptimum | None = None,
    config: HlmlConfig | None = None,
    pis0: Sequence[np.ndarray] | None = None,
) -> HlmlResult:
    """Run HLML for ``K`` episodes.

    ``joint`` supplies the joint optimum for the regret decomposition and the
    concentrability diagnostics; without it the rows carry NaN bias terms and
    the gap is measured against nothing (NaN as well).
    """
    cfg = config or HlmlConfig()
    bad = check_admissibility(options, model)
    if bad:
        raise AdmissibilityError(bad)
    H, S, A, O = model.H, model.S, model.A, options.O
    sched = build_schedule(K)
    cache = SmdpCache(model, options)
    init = options.init_table()
    if pis0 is None:
        pis0 = [np.full((opt.H_o, S), opt.allowed_actions(A)[0], dtype=np.int64) for opt in options]
    pis_prev = [np.asarray(p, dtype=np.int64) for p in pis0]
    decompose = cfg.decompose and joint is not None
    v_star = joint.value if joint is not None else None
    v_mu_star_cache: dict[bytes, float] = {}

    def new_high() -> OptionsUcbvi:
        return OptionsUcbvi(H, S, O, init, K, delta, reward_mode=cfg.reward_mode)

    high = new_high()
    lows = [_LowLearner(model, o, options, K, delta) for o in range(O)]
    H_O = options.H_max
    alpha = min(H_O / H, 1.0)
    L = smdp_log_term(S, O, K, H, delta)

    stage_col = np.zeros(K, dtype=np.int64)
    level_col = np.empty(K, dtype=object)
    kn_col = np.zeros(K, dtype=np.int64)
    gap = np.full(K, np.nan)
    bias = np.full(K, np.nan)
    proper = np.full(K, np.nan)
    decisions = np.zeros(K, dtype=np.int64)
    ch_col = np.full(K, np.nan)
    cl_col = np.full(K, np.nan)
    C_H_run = C_L_run = float("nan")
    provenance: list[Provenance] = []
    digests: list[tuple[str, str, str]] = []
    inv_total = {opt.id: 0 for opt in options}

    mu_n: np.ndarray | None = None
    high_ep = low_ep = 0
    k = 0
    for n, level, length in sched.phases:
        if level == "H":
            if cfg.reset_high and n > 1:
                high = new_high()
            smdp = cache.smdp(pis_prev)
            if cfg.reward_mode == "known":
                high.set_reward(smdp.reward)
            v_star_pi = float(cache.plan(pis_prev)[1].V[0, s1])
            opts_frozen = options.with_policies(pis_prev)
            dig0 = policies_digest(pis_prev).hex()
            played: list[np.ndarray] = []
            for _ in range(length):
                mu, _, _ = high.plan()
                s, h = s1, 1
                env, term = RngStream(seed, f"env/{high_ep}"), RngStream(seed, f"term/{high_ep}")
                nd = 0
                while h <= H:
                    o = int(mu[h - 1, s])
                    out = execute_option(model, opts_frozen[o], s, h, env, term)
                    high.est.update(s, o, h, out.state, out.stage, out.reward)
                    s, h = out.state, out.stage
                    nd += 1
                high.end_episode(nd)
                played.append(mu)
                v_mu = float(cache.value(mu, pis_prev)[0, s1])
                stage_col[k], level_col[k], kn_col[k], decisions[k] = n, "H", length, nd
                if v_star is not None:
                    gap[k] = v_star - v_mu
                    if decompose:
                        bias[k] = v_star - v_star_pi
                        proper[k] = v_star_pi - v_mu
                high_ep += 1
                k += 1
            X = RngStream(seed, f"draw-high/{n}").integers(len(played))
            mu_n = played[X]
            provenance.append(Provenance(n, "H", int(X), seed))
            digests.append((f"H{n}", dig0, policies_digest(opts_frozen.policies()).hex()))
            if decompose:
                conc = concentrability(model, options, mu_n, pis_prev, joint, cache)
                C_H_run = conc.C_H if math.isnan(C_H_run) else max(C_H_run, conc.C_H)
                C_L_run = conc.C_L if math.isnan(C_L_run) else max(C_L_run, conc.C_L)
            ch_col[k - length : k] = C_H_run
            cl_col[k - length : k] = C_L_run
        else:
            assert mu_n is not None
            dig0 = policies_digest([mu_n]).hex()
            if cfg.reset_low:
                for lw in lows:
                    lw.reset()
            # per-option list of policies in force at each invocation; joint list per episode
            seen: list[list[np.ndarray]] = [[] for _ in range(O)]
            joint_seen: list[list[np.ndarray]] = []
            for _ in range(length):
                if cfg.learn_low:
                    for lw in lows:
                        lw.refresh()
                    pis_k = [lw.current() for lw in lows]
                else:
                    pis_k = pis_prev
                opts_k = options.with_policies(pis_k)
                s, h = s1, 1
                env, term = RngStream(seed, f"low-env/{low_ep}"), RngStream(seed, f"low-term/{low_ep}")
                cls = RngStream(seed, f"low-cls/{low_ep}")
                nd = 0
                pending: list[tuple[int, list]] = []
                while h <= H:
                    o = int(mu_n[h - 1, s])
                    out = execute_option(model, opts_k[o], s, h, env, term)
                    if cfg.learn_low:
                        pending.append((o, invocation_transitions(lows[o].sub, opts_k[o], out, cls)))
                    seen[o].append(pis_k[o])
                    inv_total[options[o].id] += 1
                    s, h = out.state, out.stage
                    nd += 1
                for o, tr in pending:
                    lows[o].record(tr)
                joint_seen.append(pis_k)
                v_mu = float(cache.value(mu_n, pis_k)[0, s1])
                stage_col[k], level_col[k], kn_col[k], decisions[k] = n, "L", length, nd
                if v_star is not None:
                    gap[k] = v_star - v_mu
                    if decompose:
                        key = mu_n.tobytes()
                        v_ms = v_mu_star_cache.get(key)
                        if v_ms is None:
                            v_ms = float(cache.value(mu_n, joint.pis)[0, s1])
                            v_mu_star_cache[key] = v_ms
                        bias[k] = v_star - v_ms
                        proper[k] = v_ms - v_mu
                ch_col[k], cl_col[k] = C_H_run, C_L_run
                low_ep += 1
                k += 1
            digests.append((f"L{n}", dig0, policies_digest([mu_n]).hex()))
            if cfg.learn_low:
                if cfg.draw == "joint":
                    Y = RngStream(seed, f"draw-low/{n}").integers(len(joint_seen))
                    pis_prev = list(joint_seen[Y])
                    provenance.append(Provenance(n, "L", int(Y), seed))
                else:
                    idx: dict[str, int] = {}
                    new = list(pis_prev)
                    for o in range(O):
                        if seen[o]:
                            j = RngStream(seed, f"draw-low/{n}/{o}").integers(len(seen[o]))
                            new[o] = seen[o][j]
                            idx[options[o].id] = int(j)
                    pis_prev = new
                    provenance.append(Provenance(n, "L", idx, seed))

    assert mu_n is not None
    d_run = np.cumsum(decisions) / np.arange(1, K + 1)
    ratio = np.array(
        [
            compare_ratio(S, A, O, H, d_run[i], alpha, ch_col[i], cl_col[i]) if np.isfinite(ch_col[i]) and np.isfinite(cl_col[i]) else np.nan
            for i in range(K)
        ]
    )
    overlay = hlml_overlay(np.arange(1, K + 1), H, S, O, A, H_O, d_run, L, ch_col, cl_col)
    trace = RegretTrace(
        stage_col,
        level_col,
        kn_col,
        gap,
        bias,
        proper,
        decisions,
        ch_col,
        cl_col,
        ratio,
        overlay,
        decompose,
        header={"reward_mode": cfg.reward_mode, "draw": cfg.draw, "reset_high": cfg.reset_high, "reset_low": cfg.reset_low, "L": L, "alpha": alpha},
    )
    final = float(evaluate_hier_policy(model, options, mu_n, pis_prev, (s1, 1))[0, s1])
    return HlmlResult(mu_n, pis_prev, trace, sched, provenance, final, v_star, inv_total, digests)
