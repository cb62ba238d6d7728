"""Exact planning and evaluation on known models.

Value tables follow the core convention: ``V[h-1, s]`` for stages ``1..H+1``.
High-level policies are int tables ``mu[h-1, s]`` holding an option index, or
``-1`` where no option can be initiated.
"""

from __future__ import annotations

import itertools
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ModelError, TabularMdp, solve_flat_optimal
from .options import (
    InducedSmdp,
    OptionSet,
    SizeError,
    extract_sub_mdp,
    flatten_options,
    option_occupancy,
    policies_digest,
    reachable_running_pairs,
    solve_sub_mdp,
)

TIE_TOL = 1e-10


@dataclass
class SmdpValues:
    V: np.ndarray  # (H+1, S)
    Q: np.ndarray  # (H, S, O); -inf where the option cannot start


def _inflow_check(smdp: InducedSmdp, V_has_choice: np.ndarray) -> None:
    inflow = smdp.kernel.sum(axis=(0, 1, 2))[: smdp.H]  # (H, S)
    bad = np.argwhere((inflow > 0) & ~V_has_choice)
    if len(bad):
        h, s = bad[0]
        raise ModelError(f"kernel reaches (s={s}, h={h + 1}) where no option can start")


def plan_smdp(smdp: InducedSmdp, check: bool = True) -> tuple[np.ndarray, SmdpValues]:
    """Backward induction over the induced SMDP; lowest option index wins ties."""
    H, S, O = smdp.H, smdp.S, smdp.O
    init = smdp.init
    has = init.any(axis=-1)
    if check:
        _inflow_check(smdp, has)
    V = np.zeros((H + 1, S))
    Q = np.full((H, S, O), -np.inf)
    mu = np.full((H, S), -1, dtype=np.int64)
    for h in range(H - 1, -1, -1):
        q = smdp.reward[h] + np.tensordot(smdp.kernel[h], V, axes=([2, 3], [0, 1]))
        q = np.where(init[h], q, -np.inf)
        Q[h] = q
        best = np.argmax(q, axis=1)
        mu[h] = np.where(has[h], best, -1)
        v = np.where(has[h], q[np.arange(S), best], 0.0)
        V[h] = np.minimum(v, H - h)
    return mu, SmdpValues(V, Q)


def evaluate_smdp_policy(smdp: InducedSmdp, mu: np.ndarray) -> np.ndarray:
    """Exact ``V^mu`` on the induced SMDP. Entries with ``mu = -1`` evaluate to zero."""
    H, S = smdp.H, smdp.S
    V = np.zeros((H + 1, S))
    idx = np.arange(S)
    for h in range(H - 1, -1, -1):
        m = mu[h]
        ok = m >= 0
        mm = np.where(ok, m, 0)
        val = smdp.reward[h, idx, mm] + np.tensordot(smdp.kernel[h, idx, mm], V, axes=([1, 2], [0, 1]))
        V[h] = np.where(ok, val, 0.0)
    return V


def occupancy_high(smdp: InducedSmdp, mu: np.ndarray, start: tuple[int, int] = (0, 1)) -> np.ndarray:
    """``d[h-1, s]``: probability that ``(s, h)`` is a decision point under ``mu``."""
    H, S = smdp.H, smdp.S
    s1, h1 = start
    d = np.zeros((H, S))
    d[h1 - 1, s1] = 1.0
    idx = np.arange(S)
    for h in range(h1 - 1, H):
        row = d[h]
        if not row.any():
            continue
        m = mu[h]
        live = row > 0
        if np.any(live & (m < 0)):
            s = int(np.flatnonzero(live & (m < 0))[0])
            raise ModelError(f"decision point (s={s}, h={h + 1}) has no option under mu")
        mm = np.where(m >= 0, m, 0)
        K = smdp.kernel[h, idx, mm]  # (S, H+1, S)
        flow = np.tensordot(row, K, axes=(0, 0))  # (H+1, S)
        d[h + 1 :] += flow[h + 1 : H]
    return d


class SmdpCache:
    """Memoized flattening keyed by the inner-policy tables."""

    def __init__(self, model: TabularMdp, options: OptionSet, maxsize: int = 4096):
        self.model = model
        self.options = options
        self.maxsize = maxsize
        self._smdp: OrderedDict[bytes, InducedSmdp] = OrderedDict()
        self._plan: dict[bytes, tuple[np.ndarray, SmdpValues]] = {}
        self._eval: dict[tuple[bytes, bytes], np.ndarray] = {}
        flatten_options(model, options)  # admissibility of the declared structure

    def smdp(self, pis: Sequence[np.ndarray]) -> InducedSmdp:
        key = policies_digest(pis)
        hit = self._smdp.get(key)
        if hit is not None:
            self._smdp.move_to_end(key)
            return hit
        sm = flatten_options(self.model, self.options.with_policies(pis), check=False)
        self._smdp[key] = sm
        if len(self._smdp) > self.maxsize:
            old, _ = self._smdp.popitem(last=False)
            self._plan.pop(old, None)
        return sm

    def plan(self, pis: Sequence[np.ndarray]) -> tuple[np.ndarray, SmdpValues]:
        key = policies_digest(pis)
        hit = self._plan.get(key)
        if hit is None:
            hit = plan_smdp(self.smdp(pis))
            self._plan[key] = hit
        return hit

    def value(self, mu: np.ndarray, pis: Sequence[np.ndarray]) -> np.ndarray:
        key = (policies_digest(pis), np.ascontiguousarray(mu).tobytes())
        hit = self._eval.get(key)
        if hit is None:
            hit = evaluate_smdp_policy(self.smdp(pis), mu)
            if len(self._eval) > 20 * self.maxsize:
                self._eval.clear()
            self._eval[key] = hit
        return hit


def evaluate_hier_policy(
    model: TabularMdp, options: OptionSet, mu: np.ndarray, pis: Sequence[np.ndarray], start: tuple[int, int] = (0, 1)
) -> np.ndarray:
    """Exact ``V^mu_pi`` for a high-level policy and a vector of inner policies."""
    opts = options.with_policies(pis)
    smdp = flatten_options(model, opts, check=False)
    mu = np.asarray(mu, dtype=np.int64)
    init = smdp.init
    for h, s in zip(*np.nonzero(mu >= 0)):
        if not init[h, s, mu[h, s]]:
            raise ModelError(f"mu picks option {mu[h, s]} at (s={s}, h={h + 1}) outside its initiation set")
    occupancy_high(smdp, mu, start)  # raises on reachable decision points without an option
    return evaluate_smdp_policy(smdp, mu)


# ---------------------------------------------------------------------------
# joint optimum


@dataclass
class JointOptimum:
    value: float
    mu: np.ndarray
    pis: list[np.ndarray]
    V: np.ndarray
    exact: bool
    method: str
    count: int
    masks: list[np.ndarray]
    defaults: list[int]
    inner_argmax: list[list[np.ndarray]] = field(default_factory=list)
    mu_argmax: list[np.ndarray] = field(default_factory=list)
    s1: int = 0
    model: TabularMdp | None = None
    options: OptionSet | None = None
    approximate_mu_set: bool = False

    def canonicalize(self, o: int, pi: np.ndarray) -> np.ndarray:
        out = np.where(self.masks[o], pi, self.defaults[o]).astype(np.int64)
        return out

    def options_used(self) -> set[int]:
        assert self.model is not None and self.options is not None
        used: set[int] = set()
        for k, mu in enumerate(self.mu_argmax):
            pis = self._pis_for_mu(k)
            smdp = flatten_options(self.model, self.options.with_policies(pis), check=False)
            d = occupancy_high(smdp, mu, (self.s1, 1))
            used |= set(int(x) for x in np.unique(mu[d > 0]))
        return used

    def _pis_for_mu(self, k: int) -> list[np.ndarray]:
        return self._mu_pis[k] if hasattr(self, "_mu_pis") else self.pis

    def is_jointly_optimal_with(self, o: int, pi: np.ndarray, tol: float = 1e-9) -> bool:
        assert self.model is not None and self.options is not None
        pis = list(self.pis)
        pis[o] = pi
        _, vals = plan_smdp(flatten_options(self.model, self.options.with_policies(pis), check=False))
        return bool(vals.V[0, self.s1] >= self.value - tol)

    def to_golden(self, instance_id: str) -> dict:
        return {
            "instance": instance_id,
            "V_star": self.value,
            "mu_star_digest": policies_digest([self.mu]).hex(),
            "pi_star_digest": policies_digest(self.pis).hex(),
            "enumeration_count": self.count,
            "method": self.method,
        }


def _optimal_mu_set(smdp: InducedSmdp, vals: SmdpValues, s1: int, limit: int = 512) -> tuple[list[np.ndarray], bool]:
    """All greedy policies that differ on reachable ties (up to ``limit``)."""
    base, _ = plan_smdp(smdp, check=False)
    Q = vals.Q
    qmax = Q.max(axis=2, keepdims=True)
    ties = (Q >= qmax - TIE_TOL) & np.isfinite(Q)
    # decision points reachable under some greedy choice
    H, S = smdp.H, smdp.S
    reach = np.zeros((H, S), dtype=bool)
    reach[0, s1] = True
    for h in range(H):
        for s in np.flatnonzero(reach[h]):
            for o in np.flatnonzero(ties[h, s]):
                nxt = smdp.kernel[h, s, o, : H] > 0
                reach |= nxt
    slots = [(h, s, list(np.flatnonzero(ties[h, s]))) for h, s in zip(*np.nonzero(reach)) if ties[h, s].sum() > 1]
    total = int(np.prod([len(c) for _, _, c in slots])) if slots else 1
    if total > limit:
        return [base], True
    out = []
    for combo in itertools.product(*[c for _, _, c in slots]):
        mu = base.copy()
        for (h, s, _), o in zip(slots, combo):
            mu[h, s] = o
        out.append(mu)
    return out, False


def solve_joint_optimum(
    model: TabularMdp,
    options: OptionSet,
    cap: float = 1e6,
    s1: int = 0,
    keep_argmax: bool = True,
    tol: float = TIE_TOL,
) -> JointOptimum:
    """Best (high-level, inner) pair by exhaustive search over canonical inner policies.

    Inner policies are enumerated only on elapsed-step/state pairs reachable
    inside each option; other entries are fixed to the option's lowest action.
    Above ``cap`` the search is replaced by a certificate: the locally optimal
    inner policies are accepted if they attain the flat optimum, which bounds
    every hierarchical value from above. Otherwise :class:`SizeError`.
    """
    masks = [reachable_running_pairs(model, opt) for opt in options]
    defaults = [opt.allowed_actions(model.A)[0] for opt in options]
    per_option: list[list[np.ndarray]] = []
    count = 1.0
    for opt, m, d in zip(options, masks, defaults):
        n_pairs = int(m.sum())
        count *= float(len(opt.allowed_actions(model.A))) ** n_pairs
    flatten_options(model, options)  # admissibility of the declared structure
    if count > cap:
        return _certified_joint(model, options, masks, defaults, s1, count, cap, tol)

    for opt, m, d in zip(options, masks, defaults):
        cells = list(zip(*np.nonzero(m)))
        acts = opt.allowed_actions(model.A)
        pols = []
        for combo in itertools.product(acts, repeat=len(cells)):
            pi = np.full((opt.H_o, model.S), d, dtype=np.int64)
            for (t, s), a in zip(cells, combo):
                pi[t, s] = a
            pols.append(pi)
        per_option.append(pols)

    # flatten each option once per inner policy, then assemble
    H, S, O = model.H, model.S, options.O
    pieces = []
    for o, pols in enumerate(per_option):
        rows = []
        for pi in pols:
            sm = flatten_options(model, OptionSet((options[o].with_policy(pi),)), check=False)
            rows.append((sm.kernel[:, :, 0], sm.reward[:, :, 0], sm.duration[:, :, 0]))
        pieces.append(rows)
    init = options.init_table()
    kernel = np.zeros((H, S, O, H + 1, S))
    reward = np.zeros((H, S, O))
    dur = np.zeros((H, S, O))
    results: list[tuple[float, tuple[int, ...]]] = []
    best_val, best_combo = -np.inf, None
    for combo in itertools.product(*[range(len(p)) for p in per_option]):
        for o, j in enumerate(combo):
            k, r, du = pieces[o][j]
            kernel[:, :, o], reward[:, :, o], dur[:, :, o] = k, r, du
        _, vals = plan_smdp(InducedSmdp(kernel, reward, dur, init), check=False)
        v = float(vals.V[0, s1])
        results.append((v, combo))
        if v > best_val + tol:
            best_val, best_combo = v, combo
    assert best_combo is not None
    pis = [per_option[o][j] for o, j in enumerate(best_combo)]
    smdp = flatten_options(model, options.with_policies(pis), check=False)
    mu, vals = plan_smdp(smdp, check=False)
    jo = JointOptimum(
        value=best_val, mu=mu, pis=pis, V=vals.V, exact=True, method="enumeration", count=int(count),
        masks=masks, defaults=defaults, s1=s1, model=model, options=options,
    )
    if keep_argmax:
        opt_combos = [c for v, c in results if v >= best_val - tol]
        inner = []
        for o in range(O):
            seen = sorted({c[o] for c in opt_combos})
            inner.append([per_option[o][j] for j in seen])
        jo.inner_argmax = inner
        mus: list[np.ndarray] = []
        mu_pis: list[list[np.ndarray]] = []
        seen_mu: set[bytes] = set()
        approx = False
        for c in opt_combos[:64]:
            cp = [per_option[o][j] for o, j in enumerate(c)]
            sm = flatten_options(model, options.with_policies(cp), check=False)
            _, vv = plan_smdp(sm, check=False)
            ms, ap = _optimal_mu_set(sm, vv, s1)
            approx |= ap
            for m_ in ms:
                if m_.tobytes() not in seen_mu:
                    seen_mu.add(m_.tobytes())
                    mus.append(m_)
                    mu_pis.append(cp)
        jo.mu_argmax = mus
        jo._mu_pis = mu_pis  # type: ignore[attr-defined]
        jo.approximate_mu_set = approx or len(opt_combos) > 64
    else:
        jo.inner_argmax = [[p] for p in pis]
        jo.mu_argmax = [mu]
    return jo


def _certified_joint(model, options, masks, defaults, s1, count, cap, tol) -> JointOptimum:
    pis = []
    for opt, m, d in zip(options, masks, defaults):
        sub = extract_sub_mdp(model, opt)
        loc, _, _ = solve_sub_mdp(sub)
        pi = sub.to_option_policy(loc, opt, model.S)
        pis.append(np.where(m, pi, d).astype(np.int64))
    smdp = flatten_options(model, options.with_policies(pis), check=False)
    mu, vals = plan_smdp(smdp, check=False)
    value = float(vals.V[0, s1])
    _, Vflat = solve_flat_optimal(model)
    if value < Vflat[0, s1] - tol:
        raise SizeError("joint optimum (no certificate available)", count, cap)
    return JointOptimum(
        value=value, mu=mu, pis=pis, V=vals.V, exact=False, method="flat-bound certificate", count=int(min(count, 2**62)),
        masks=masks, defaults=defaults, inner_argmax=[[p] for p in pis], mu_argmax=[mu], s1=s1,
        model=model, options=options, approximate_mu_set=True,
    )


# ---------------------------------------------------------------------------
# concentrability and the bias inequality


def _max_ratio(num: np.ndarray, den: np.ndarray) -> float:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    pos = num > 0
    if np.any(pos & (den <= 0)):
        return float("inf")
    if not pos.any():
        return 1.0 if not np.any(den > 0) else 0.0
    return float(np.max(num[pos] / den[pos]))


@dataclass
class Concentrability:
    C_H: float
    C_L: float
    per_option: list[float]
    approximate: bool

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.C_H) and np.isfinite(self.C_L))


def concentrability_high(smdp: InducedSmdp, mu_n: np.ndarray, mu_stars: Sequence[np.ndarray], s1: int = 0) -> float:
    d_n = occupancy_high(smdp, mu_n, (s1, 1))
    best = float("inf")
    for m in mu_stars:
        best = min(best, _max_ratio(occupancy_high(smdp, m, (s1, 1)), d_n))
    return best


def concentrability_low(model: TabularMdp, options: OptionSet, pis_prev: Sequence[np.ndarray], inner_stars: Sequence[Sequence[np.ndarray]]) -> list[float]:
    out = []
    for o, opt in enumerate(options):
        occ_prev = option_occupancy(model, opt.with_policy(pis_prev[o]))
        mask = opt.init[:, :, None, None]
        best = float("inf")
        for pi_star in inner_stars[o]:
            occ_star = option_occupancy(model, opt.with_policy(pi_star))
            best = min(best, _max_ratio(occ_star * mask, occ_prev * mask))
        out.append(best)
    return out


def concentrability(
    model: TabularMdp,
    options: OptionSet,
    mu_n: np.ndarray,
    pis_prev: Sequence[np.ndarray],
    joint: JointOptimum,
    cache: SmdpCache | None = None,
) -> Concentrability:
    """Stage contribution ``(C^H_n, C^L_n)``.

    Occupancies of high-level policies are taken in the SMDP induced by the
    frozen inner policies ``pis_prev``. Ratios ``0/0`` are ignored and ``x/0``
    gives ``inf``.
    """
    smdp = cache.smdp(pis_prev) if cache is not None else flatten_options(model, options.with_policies(pis_prev), check=False)
    c_h = concentrability_high(smdp, mu_n, joint.mu_argmax, joint.s1)
    per = concentrability_low(model, options, pis_prev, joint.inner_argmax)
    return Concentrability(c_h, max(per), per, joint.approximate_mu_set or not joint.exact)


@dataclass
class BiasReport:
    v_star: float
    v_star_pi: float  # best high-level value with frozen inner policies
    v_mu_star: float  # mu_n with optimal inner policies
    v_mu_pi: float  # mu_n with frozen inner policies
    C_H: float
    C_L: float
    slack_high: float
    slack_low: float
    skipped: bool

    @property
    def ok(self) -> bool:
        return self.skipped or (self.slack_high >= -1e-9 and self.slack_low >= -1e-9)


def bias_inequality_check(
    model: TabularMdp,
    options: OptionSet,
    mu_n: np.ndarray,
    pis: Sequence[np.ndarray],
    pis_star: Sequence[np.ndarray],
    joint: JointOptimum,
    conc: Concentrability | None = None,
) -> BiasReport:
    """Slack of both bias bounds for the pair ``(mu_n, pis)``.

    ``slack_high = C^H (V^mu_* - V^mu_pi) - (V*_* - V*_pi)`` and
    ``slack_low = C^L (V*_pi - V^mu_pi) - (V*_* - V^mu_*)``; negative slack is
    a violation. Infinite coefficients skip the check.
    """
    s1 = joint.s1
    if conc is None:
        conc = concentrability(model, options, mu_n, pis, joint)
    sm_pi = flatten_options(model, options.with_policies(pis), check=False)
    sm_star = flatten_options(model, options.with_policies(pis_star), check=False)
    _, vals = plan_smdp(sm_pi, check=False)
    v_star_pi = float(vals.V[0, s1])
    v_mu_pi = float(evaluate_smdp_policy(sm_pi, mu_n)[0, s1])
    v_mu_star = float(evaluate_smdp_policy(sm_star, mu_n)[0, s1])
    v_star = joint.value
    if not conc.finite:
        return BiasReport(v_star, v_star_pi, v_mu_star, v_mu_pi, conc.C_H, conc.C_L, float("nan"), float("nan"), True)
    slack_h = conc.C_H * (v_mu_star - v_mu_pi) - (v_star - v_star_pi)
    slack_l = conc.C_L * (v_star_pi - v_mu_pi) - (v_star - v_mu_star)
    return BiasReport(v_star, v_star_pi, v_mu_star, v_mu_pi, conc.C_H, conc.C_L, slack_h, slack_l, False)


# ---------------------------------------------------------------------------
# golden values


def write_golden(path: str | Path, instance_id: str, joint: JointOptimum) -> None:
    Path(path).write_text(json.dumps(joint.to_golden(instance_id), indent=2, sort_keys=True) + "\n")


def read_golden(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
