"""Options-UCBVI: optimistic learning of a high-level policy over fixed options.

The learner keeps counts ``n[h-1, s, o]`` and ``m[h-1, s, o, h'-1, s']`` of
observed option transitions and plans with a backward sweep in which each
stage projects onto every later arrival pair ``(s', h')``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import RngStream, Segment, TabularMdp
from .oracle import SmdpCache, evaluate_smdp_policy, plan_smdp
from .options import InducedSmdp, OptionSet, execute_option

BONUS_TERMS = ("variance", "linear", "lower_order")
BPRIME_CONST = 100.0**2


def smdp_log_term(S: int, O: int, K: int, H: int, delta: float) -> float:
    """``log(5 S O K H / delta)``."""
    return math.log(5.0 * S * O * K * H / delta)


@dataclass
class EmpiricalSmdpModel:
    n: np.ndarray  # (H, S, O)
    m: np.ndarray  # (H, S, O, H+1, S)
    delta: float
    L: float
    k: int = 0
    reward_sum: np.ndarray | None = None  # (H, S, O) for the estimated-reward mode
    dataset: list[tuple[int, int, int, int, int]] = field(default_factory=list)
    keep_dataset: bool = False

    @classmethod
    def empty(cls, H: int, S: int, O: int, K: int, delta: float, keep_dataset: bool = False) -> "EmpiricalSmdpModel":
        return cls(
            n=np.zeros((H, S, O), dtype=np.int64),
            m=np.zeros((H, S, O, H + 1, S), dtype=np.int64),
            delta=delta,
            L=smdp_log_term(S, O, K, H, delta),
            reward_sum=np.zeros((H, S, O)),
            keep_dataset=keep_dataset,
        )

    @property
    def H(self) -> int:
        return self.n.shape[0]

    @property
    def S(self) -> int:
        return self.n.shape[1]

    @property
    def O(self) -> int:
        return self.n.shape[2]

    def phat(self) -> np.ndarray:
        return self.m / np.maximum(self.n, 1)[..., None, None]

    def update(self, s: int, o: int, h: int, s2: int, h2: int, reward: float = 0.0) -> None:
        if not h < h2 <= self.H + 1:
            raise ValueError(f"arrival stage {h2} must lie in ({h}, {self.H + 1}]")
        self.n[h - 1, s, o] += 1
        self.m[h - 1, s, o, h2 - 1, s2] += 1
        self.reward_sum[h - 1, s, o] += reward
        if self.keep_dataset:
            self.dataset.append((s, o, h, s2, h2))


def _w_table(est: EmpiricalSmdpModel) -> np.ndarray:
    """``min{b'(s', h'), H^2}`` for every arrival pair; index ``H`` is stage ``H + 1``."""
    H, S, O, L = est.H, est.S, est.O, est.L
    nsum = est.n.sum(axis=2)  # (H, S)
    W = np.full((H + 1, S), float(H * H))
    with np.errstate(divide="ignore"):
        bp = BPRIME_CONST * H**5 * S**2 * O * L**2 / nsum
    W[:H] = np.where(nsum > 0, np.minimum(bp, H * H), H * H)
    return W


def oucbvi_bonus(est: EmpiricalSmdpModel, vtil: np.ndarray, s: int, o: int, h: int) -> float:
    """Bonus of ``(s, o, h)`` given optimistic values ``vtil[h'-1, s']`` (``H + 1`` rows)."""
    n = int(est.n[h - 1, s, o])
    if n < 1:
        raise ValueError("bonus needs n >= 1; unvisited cells are planned with full optimism")
    H, L = est.H, est.L
    P = est.m[h - 1, s, o] / n  # (H+1, S)
    ev = float((P * vtil).sum())
    var = max(float((P * vtil**2).sum()) - ev * ev, 0.0)
    W = _w_table(est)
    third = float((P * W).sum())
    return math.sqrt(8 * L * var / n) + 14 * H * L / (3 * n) + math.sqrt(8 * third / n)


def oucbvi_plan(
    est: EmpiricalSmdpModel,
    reward: np.ndarray,
    init: np.ndarray,
    terms: Sequence[str] = BONUS_TERMS,
    zero_bonus: bool = False,
    phat: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Optimistic backward-forward induction.

    Returns ``(mu[h-1, s], Q[h-1, s, o], Vtilde[h'-1, s])`` with ``Vtilde`` capped
    at ``H - h' + 1``. Unvisited initiable cells get ``Q = H - h + 1``;
    non-initiable cells get ``-inf``. ``phat`` overrides the empirical kernel
    (with ``zero_bonus`` this plans on a given model).
    """
    H, S, O = est.H, est.S, est.O
    L = est.L
    n = est.n
    nn = np.maximum(n, 1).astype(np.float64)
    P = est.phat() if phat is None else phat
    visited = n > 0 if phat is None else np.ones_like(n, dtype=bool)
    W = _w_table(est)
    Vt = np.zeros((H + 1, S))
    Q = np.full((H, S, O), -np.inf)
    mu = np.full((H, S), -1, dtype=np.int64)
    has = init.any(axis=2)
    use_var, use_lin, use_low = ("variance" in terms), ("linear" in terms), ("lower_order" in terms)
    idx = np.arange(S)
    for h in range(H - 1, -1, -1):
        # later rows of Vt are final here, so one projection per stage suffices
        stack = np.stack([Vt.ravel(), (Vt * Vt).ravel(), W.ravel()], axis=1)
        E = P[h].reshape(S * O, (H + 1) * S) @ stack
        ev = E[:, 0].reshape(S, O)
        q = reward[h] + ev
        if not zero_bonus:
            b = np.zeros((S, O))
            if use_var:
                var = np.maximum(E[:, 1].reshape(S, O) - ev * ev, 0.0)
                b += np.sqrt(8 * L * var / nn[h])
            if use_lin:
                b += 14 * H * L / (3 * nn[h])
            if use_low:
                b += np.sqrt(8 * E[:, 2].reshape(S, O) / nn[h])
            q = q + b
        q = np.where(visited[h], q, float(H - h))
        q = np.where(init[h], q, -np.inf)
        Q[h] = q
        best = np.argmax(q, axis=1)
        mu[h] = np.where(has[h], best, -1)
        Vt[h] = np.where(has[h], np.minimum(float(H - h), q[idx, best]), 0.0)
    return mu, Q, Vt


@dataclass
class DecisionCounter:
    per_episode: list[int] = field(default_factory=list)
    total: int = 0

    def record(self, n: int) -> None:
        self.per_episode.append(n)
        self.total += n

    @property
    def k(self) -> int:
        return len(self.per_episode)

    @property
    def d(self) -> float:
        return self.total / self.k if self.per_episode else 0.0


class OptionsUcbvi:
    """Options-UCBVI learner state (counts, reward table, decision counter)."""

    def __init__(
        self,
        H: int,
        S: int,
        O: int,
        init: np.ndarray,
        K: int,
        delta: float,
        reward: np.ndarray | None = None,
        reward_mode: str = "known",
        keep_dataset: bool = False,
    ):
        if reward_mode not in ("known", "estimated"):
            raise ValueError(f"unknown reward mode {reward_mode!r}")
        self.est = EmpiricalSmdpModel.empty(H, S, O, K, delta, keep_dataset=keep_dataset)
        self.init = np.asarray(init, dtype=bool)
        self.reward_mode = reward_mode
        self.reward = None if reward is None else np.asarray(reward, dtype=np.float64)
        self.counter = DecisionCounter()

    def set_reward(self, reward: np.ndarray) -> None:
        self.reward = np.asarray(reward, dtype=np.float64)

    def reward_table(self) -> np.ndarray:
        if self.reward_mode == "estimated":
            return self.est.reward_sum / np.maximum(self.est.n, 1)
        assert self.reward is not None, "known-reward mode needs a reward table"
        return self.reward

    def plan(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return oucbvi_plan(self.est, self.reward_table(), self.init)

    def end_episode(self, decisions: int) -> None:
        self.counter.record(decisions)
        self.est.k += 1


@dataclass
class EpisodeResult:
    mu: np.ndarray
    vtilde_start: float
    segments: list[Segment]
    decisions: int


def oucbvi_episode(
    model: TabularMdp,
    options: OptionSet,
    learner: OptionsUcbvi,
    s1: int,
    env_rng: RngStream,
    term_rng: RngStream,
    plan: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> EpisodeResult:
    """Plan, then roll the greedy high-level policy from ``(s1, 1)`` with fixed inner policies."""
    mu, _, Vt = learner.plan() if plan is None else plan
    H = model.H
    s, h = s1, 1
    segs: list[Segment] = []
    while h <= H:
        o = int(mu[h - 1, s])
        out = execute_option(model, options[o], s, h, env_rng, term_rng)
        learner.est.update(s, o, h, out.state, out.stage, out.reward)
        segs.append(Segment(s, o, h, out.state, out.stage, out.reward))
        s, h = out.state, out.stage
    learner.end_episode(len(segs))
    return EpisodeResult(mu, float(Vt[0, s1]), segs, len(segs))


def renewal_bound_d(tau_min: float, tau_max: float, mean_durations: Sequence[float] | float, H: int, delta: float) -> float:
    """High-probability bound on the decisions per episode from renewal arguments."""
    if tau_min < 1:
        raise ValueError("tau_min must be at least 1")
    m = float(np.min(np.atleast_1d(mean_durations)))
    if m < tau_min:
        raise ValueError("mean durations cannot be below tau_min")
    return math.sqrt(32.0 * H * (tau_max - tau_min) * math.log(2.0 / delta) / m**3) + H / m


def oucbvi_overlay(k: np.ndarray | float, H: int, S: int, O: int, d: np.ndarray | float, L: float) -> np.ndarray:
    """Regret bound with unit constants and explicit logs:
    ``L H sqrt(S O k d) + H^3 S^2 L^2 O d + H sqrt(d k L)``."""
    k = np.asarray(k, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return L * H * np.sqrt(S * O * k * d) + H**3 * S**2 * L**2 * O * d + H * np.sqrt(d * k * L)


def burn_in(H: int, S: int, O: int, d: float) -> float:
    """Episode count ``H^4 S^3 O d`` after which the leading term dominates."""
    return float(H**4 * S**3 * O * d)


# ---------------------------------------------------------------------------
# full runs


@dataclass
class OucbviRun:
    decisions: np.ndarray
    gap: np.ndarray
    v_opt_fixed: float
    v_played: np.ndarray
    d_running: np.ndarray
    vtilde_start: np.ndarray
    overlay: np.ndarray
    L: float

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.gap)


def run_oucbvi(
    model: TabularMdp,
    options: OptionSet,
    K: int,
    delta: float,
    seed: int,
    s1: int = 0,
    reward_mode: str = "known",
    smdp: InducedSmdp | None = None,
    budget: int | None = None,
) -> OucbviRun:
    """Options-UCBVI for ``K`` episodes with the inner policies stored in ``options``.

    ``budget`` sets the episode count inside the log term (defaults to ``K``).
    """
    if smdp is None:
        smdp = SmdpCache(model, options).smdp(options.policies())
    _, vals = plan_smdp(smdp)
    v_opt = float(vals.V[0, s1])
    H, S, O = model.H, model.S, options.O
    learner = OptionsUcbvi(H, S, O, smdp.init, K if budget is None else budget, delta, reward=smdp.reward, reward_mode=reward_mode)
    decisions = np.zeros(K, dtype=np.int64)
    v_played = np.zeros(K)
    vtil = np.zeros(K)
    eval_cache: dict[bytes, float] = {}
    for k in range(K):
        res = oucbvi_episode(
            model, options, learner, s1, RngStream(seed, f"env/{k}"), RngStream(seed, f"term/{k}")
        )
        key = res.mu.tobytes()
        v = eval_cache.get(key)
        if v is None:
            v = float(evaluate_smdp_policy(smdp, res.mu)[0, s1])
            eval_cache[key] = v
        v_played[k] = v
        decisions[k] = res.decisions
        vtil[k] = res.vtilde_start
    d_run = np.cumsum(decisions) / np.arange(1, K + 1)
    ks = np.arange(1, K + 1)
    overlay = oucbvi_overlay(ks, H, S, O, d_run, learner.est.L)
    return OucbviRun(decisions, v_opt - v_played, v_opt, v_played, d_run, vtil, overlay, learner.est.L)
