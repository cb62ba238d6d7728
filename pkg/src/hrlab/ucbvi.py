"""UCBVI with the three-term Bernstein-style bonus, for flat MDPs and option sub-MDPs.

A learner works on local stages ``0..T-1`` (stage ``t+1``), ``N`` local states
and ``A`` local actions with known rewards. An optional absorbing terminal
state has known value zero and never acts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import RngStream, TabularMdp, sample_index
from .options import OptionOutcome, OptionSpec, SubMdp, solve_sub_mdp

BONUS_TERMS = ("variance", "linear", "lower_order")
BPRIME_CONST = 100.0**2


def log_term(S: int, A: int, K: int, T: int, delta: float) -> float:
    """``log(5 S A K T / delta)``."""
    return math.log(5.0 * S * A * K * T / delta)


@dataclass
class EmpiricalMdpModel:
    n: np.ndarray  # (T, N, A) visits
    m: np.ndarray  # (T, N, A, N) transition counts
    k: int
    delta: float
    L: float
    S_count: int  # number of non-terminal states used in the bonus

    @classmethod
    def empty(cls, T: int, N: int, A: int, K: int, delta: float, S_count: int | None = None) -> "EmpiricalMdpModel":
        S_count = N if S_count is None else S_count
        return cls(
            n=np.zeros((T, N, A), dtype=np.int64),
            m=np.zeros((T, N, A, N), dtype=np.int64),
            k=0,
            delta=delta,
            L=log_term(S_count, A, K, T, delta),
            S_count=S_count,
        )

    @property
    def T(self) -> int:
        return self.n.shape[0]

    @property
    def N(self) -> int:
        return self.n.shape[1]

    @property
    def A(self) -> int:
        return self.n.shape[2]

    def phat(self) -> np.ndarray:
        return self.m / np.maximum(self.n, 1)[..., None]

    def update(self, t: int, x: int, a: int, y: int) -> None:
        self.n[t, x, a] += 1
        self.m[t, x, a, y] += 1


def flat_bonus(n: int, phat_row: np.ndarray, v_next: np.ndarray, nsum_next: np.ndarray, S: int, A: int, T: int, L: float) -> float:
    """Bonus of one ``(t, x, a)`` cell with ``n >= 1`` visits.

    ``phat_row``: next-state distribution; ``v_next``: optimistic next values;
    ``nsum_next[y]``: visits of ``y`` at the next stage summed over actions.
    """
    if n < 1:
        raise ValueError("bonus needs at least one visit")
    ev = float(phat_row @ v_next)
    var = max(float(phat_row @ (v_next**2)) - ev * ev, 0.0)
    with np.errstate(divide="ignore"):
        bp = np.where(nsum_next > 0, BPRIME_CONST * T**5 * S**2 * L**2 * A / np.maximum(nsum_next, 1), np.inf)
    w = np.minimum(bp, float(T * T))
    return math.sqrt(8 * L * var / n) + 14 * T * L / (3 * n) + math.sqrt(8 * float(phat_row @ w) / n)


def ucbvi_plan(
    est: EmpiricalMdpModel,
    r: np.ndarray,
    terminal: int | None = None,
    terms: Sequence[str] = BONUS_TERMS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Optimistic backward induction. Returns ``(pi[t, x], Q[t, x, a], Vtilde[t, x])``.

    ``Vtilde`` has ``T + 1`` rows with the last one zero; unvisited cells get
    the remaining-horizon cap ``T - t``; ties go to the lowest action.
    """
    T, N, A = est.n.shape
    L, S = est.L, est.S_count
    n = est.n
    nn = np.maximum(n, 1)
    P = est.phat()
    nsum = n.sum(axis=2)  # (T, N)
    W = np.full((T + 1, N), float(T * T))
    with np.errstate(divide="ignore"):
        bp = BPRIME_CONST * T**5 * S**2 * L**2 * A / nsum[1:]
    W[1:T] = np.where(nsum[1:] > 0, np.minimum(bp, T * T), T * T)
    if terminal is not None:
        W[:, terminal] = T * T
    Vt = np.zeros((T + 1, N))
    Q = np.zeros((T, N, A))
    use_var, use_lin, use_low = ("variance" in terms), ("linear" in terms), ("lower_order" in terms)
    for t in range(T - 1, -1, -1):
        v = Vt[t + 1]
        Pt = P[t]
        ev = Pt @ v
        b = np.zeros((N, A))
        if use_var:
            var = np.maximum(Pt @ (v * v) - ev * ev, 0.0)
            b += np.sqrt(8 * L * var / nn[t])
        if use_lin:
            b += 14 * T * L / (3 * nn[t])
        if use_low:
            b += np.sqrt(8 * (Pt @ W[t + 1]) / nn[t])
        q = r[t] + ev + b
        q = np.where(n[t] > 0, q, float(T - t))
        Q[t] = q
        Vt[t] = np.minimum(float(T - t), q.max(axis=1))
        if terminal is not None:
            Vt[t, terminal] = 0.0
    pi = np.argmax(Q, axis=2)
    return pi, Q, Vt


class UcbviLearner:
    """Stateful UCBVI on one local MDP with known rewards."""

    def __init__(
        self,
        r: np.ndarray,
        K: int,
        delta: float,
        terminal: int | None = None,
        terms: Sequence[str] = BONUS_TERMS,
    ):
        T, N, A = r.shape
        self.r = np.asarray(r, dtype=np.float64)
        self.terminal = terminal
        self.terms = tuple(terms)
        s_count = N - (1 if terminal is not None else 0)
        self.est = EmpiricalMdpModel.empty(T, N, A, K, delta, S_count=s_count)
        self._plan: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
        self.steps = 0

    @classmethod
    def for_sub_mdp(cls, sub: SubMdp, K: int, delta: float, **kw) -> "UcbviLearner":
        return cls(sub.r, K, delta, terminal=sub.terminal, **kw)

    @classmethod
    def for_mdp(cls, model: TabularMdp, K: int, delta: float, **kw) -> "UcbviLearner":
        return cls(model.r, K, delta, **kw)

    @property
    def dirty(self) -> bool:
        return self._plan is None

    def plan(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._plan is None:
            self._plan = ucbvi_plan(self.est, self.r, self.terminal, self.terms)
        return self._plan

    def update(self, t: int, x: int, a: int, y: int) -> None:
        self.est.update(t, x, a, y)
        self.steps += 1
        self._plan = None

    def end_episode(self) -> None:
        self.est.k += 1


@dataclass
class SubEpisode:
    start: int
    steps: list[tuple[int, int, int, int]]  # (t, x, a, y) local
    reward: float
    vtilde_start: float


def ucbvi_episode(sub: SubMdp, learner: UcbviLearner, x0: int, rng: RngStream) -> SubEpisode:
    """One episode inside a sub-MDP (local dynamics); updates the learner."""
    pi, _, Vt = learner.plan()
    cdf = np.cumsum(sub.p, axis=-1)
    x = x0
    steps = []
    total = 0.0
    for t in range(sub.horizon):
        if x == sub.terminal:
            break
        a = int(pi[t, x])
        y = sample_index(cdf[t, x, a], rng.uniform())
        total += float(sub.r[t, x, a])
        steps.append((t, x, a, y))
        x = y
    for st in steps:
        learner.update(*st)
    learner.end_episode()
    return SubEpisode(x0, steps, total, float(Vt[0, x0]))


def invocation_transitions(
    sub: SubMdp, opt: OptionSpec, out: OptionOutcome, rng: RngStream | None = None
) -> list[tuple[int, int, int, int]]:
    """Map an option execution in the full model to local sub-MDP transitions."""
    pos = {a: i for i, a in enumerate(sub.actions)}
    res = []
    last = len(out.steps) - 1
    for t, st in enumerate(out.steps):
        x = int(sub.local_index[st.s])
        y = int(sub.local_index[st.s_next])
        if t == last:
            if out.cause in ("beta", "duration"):
                y = sub.terminal
            elif out.cause == "horizon" and t + 1 < opt.H_o:
                b = float(opt.beta[min(st.h, opt.beta.shape[0] - 1), st.s_next])
                if b >= 1.0 or (0.0 < b and rng is not None and rng.uniform() < b):
                    y = sub.terminal
        res.append((t, x, pos[st.a], y))
    return res


def sub_policy_values(sub: SubMdp, local_pi: np.ndarray) -> np.ndarray:
    """Exact value ``V[t, x]`` of a local policy on the sub-MDP."""
    T, N = sub.horizon, sub.n_states + 1
    V = np.zeros((T + 1, N))
    idx = np.arange(N)
    for t in range(T - 1, -1, -1):
        a = local_pi[t]
        V[t] = sub.r[t, idx, a] + sub.p[t, idx, a] @ V[t + 1]
    return V


def run_ucbvi_sub(sub: SubMdp, K: int, delta: float, seed: int, check_optimism: bool = True) -> dict[str, np.ndarray | bool]:
    """Standalone UCBVI run on a sub-MDP; starts drawn uniformly from the initiation states."""
    learner = UcbviLearner.for_sub_mdp(sub, K, delta)
    _, Vstar, _ = solve_sub_mdp(sub)
    start_rng = RngStream(seed, "sub-start")
    regret = np.zeros(K)
    optimistic = True
    for k in range(K):
        x0 = int(sub.starts[start_rng.integers(len(sub.starts))])
        pi, _, Vt = learner.plan()
        if check_optimism and np.any(Vt[: sub.horizon] < Vstar[: sub.horizon] - 1e-9):
            optimistic = False
        regret[k] = Vstar[0, x0] - sub_policy_values(sub, pi)[0, x0]
        ucbvi_episode(sub, learner, x0, RngStream(seed, f"sub-env/{k}"))
    return {"regret": regret, "cum_regret": np.cumsum(regret), "optimistic": optimistic}


@dataclass
class FlatRun:
    gap: np.ndarray
    v_played: np.ndarray
    v_star: float
    vtilde_start: np.ndarray
    L: float

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.gap)


def run_ucbvi_flat(model: TabularMdp, K: int, delta: float, seed: int, s1: int = 0) -> FlatRun:
    """Flat UCBVI on the full model; per-episode gap against the flat optimum."""
    from .core import evaluate_flat_policy, solve_flat_optimal

    learner = UcbviLearner.for_mdp(model, K, delta)
    _, Vs = solve_flat_optimal(model)
    v_star = float(Vs[0, s1])
    cdf = model.cdf
    v_played = np.zeros(K)
    vtil = np.zeros(K)
    cache: dict[bytes, float] = {}
    for k in range(K):
        pi, _, Vt = learner.plan()
        key = pi.tobytes()
        v = cache.get(key)
        if v is None:
            v = float(evaluate_flat_policy(model, pi)[0, s1])
            cache[key] = v
        v_played[k] = v
        vtil[k] = Vt[0, s1]
        rng = RngStream(seed, f"env/{k}")
        s = s1
        for t in range(model.H):
            a = int(pi[t, s])
            s2 = sample_index(cdf[t, s, a], rng.uniform())
            learner.update(t, s, a, s2)
            s = s2
        learner.end_episode()
    return FlatRun(v_star - v_played, v_played, v_star, vtil, learner.est.L)
