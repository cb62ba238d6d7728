"""Options over a tabular MDP: execution, exact flattening, sub-MDPs, checkers.

An option carries an initiation table ``init[h-1, s]``, a termination table
``beta[h-1, s]`` (probability of stopping on arrival at ``(s, h)``), a declared
maximum duration ``H_o`` and an inner policy ``pi[t, s]`` indexed by the number
of steps ``t`` already taken inside the option (0-based), so an inner policy is
a policy of the option's own sub-MDP with local stages ``1..H_o``.

Execution moves first and tests termination at the arrival pair. Reaching
stage ``H + 1`` or exhausting ``H_o`` steps stops the option unconditionally.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Any, NamedTuple, Sequence

import numpy as np

from .core import ModelError, RngStream, Step, TabularMdp, sample_index


class AdmissibilityError(ModelError):
    def __init__(self, violations: list[tuple[int, int, int]]):
        self.violations = violations
        head = ", ".join(f"(s={s}, h={h}, o={o})" for s, h, o in violations[:5])
        super().__init__(f"{len(violations)} termination pairs with no initiable option: {head}")


class SizeError(RuntimeError):
    def __init__(self, what: str, count: float, cap: float):
        self.count, self.cap = count, cap
        super().__init__(f"{what}: enumeration size {count:.4g} exceeds cap {cap:.4g}")


@dataclass(frozen=True, eq=False)
class OptionSpec:
    id: str
    init: np.ndarray  # bool (H, S)
    beta: np.ndarray  # float (H, S)
    pi: np.ndarray  # int (H_o, S), indexed by elapsed steps
    H_o: int
    actions: tuple[int, ...] | None = None  # allowed actions A_o; None means all
    reward: np.ndarray | None = None  # optional local reward (H_o, S, A) for the sub-MDP

    def __post_init__(self) -> None:
        init = np.array(self.init, dtype=bool)
        beta = np.array(self.beta, dtype=np.float64)
        pi = np.array(self.pi, dtype=np.int64)
        if init.shape != beta.shape or init.ndim != 2:
            raise ModelError(f"option {self.id}: init {init.shape} and beta {beta.shape} must share shape (H, S)")
        if self.H_o < 1 or self.H_o > init.shape[0]:
            raise ModelError(f"option {self.id}: H_o={self.H_o} outside [1, H]")
        if pi.shape != (self.H_o, init.shape[1]):
            raise ModelError(f"option {self.id}: pi shape {pi.shape} != {(self.H_o, init.shape[1])}")
        if np.any(beta < 0) or np.any(beta > 1):
            raise ModelError(f"option {self.id}: beta outside [0,1]")
        if not init.any():
            raise ModelError(f"option {self.id}: empty initiation set")
        for arr in (init, beta, pi):
            arr.setflags(write=False)
        object.__setattr__(self, "init", init)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "pi", pi)
        if self.actions is not None:
            acts = tuple(sorted(int(a) for a in self.actions))
            object.__setattr__(self, "actions", acts)
            if not set(np.unique(pi).tolist()) <= set(acts):
                raise ModelError(f"option {self.id}: inner policy uses actions outside {acts}")
        if self.reward is not None:
            rew = np.array(self.reward, dtype=np.float64)
            if rew.shape[:2] != (self.H_o, init.shape[1]):
                raise ModelError(f"option {self.id}: local reward shape {rew.shape}")
            rew.setflags(write=False)
            object.__setattr__(self, "reward", rew)

    def allowed_actions(self, A: int) -> tuple[int, ...]:
        return tuple(range(A)) if self.actions is None else self.actions

    def with_policy(self, pi: np.ndarray) -> "OptionSpec":
        return replace(self, pi=np.asarray(pi, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class OptionSet:
    options: tuple[OptionSpec, ...]

    def __post_init__(self) -> None:
        opts = tuple(self.options)
        object.__setattr__(self, "options", opts)
        ids = [o.id for o in opts]
        if len(set(ids)) != len(ids):
            raise ModelError(f"duplicate option ids: {ids}")
        if not opts:
            raise ModelError("empty option set")
        shapes = {o.init.shape for o in opts}
        if len(shapes) != 1:
            raise ModelError(f"options disagree on (H, S): {shapes}")

    def __len__(self) -> int:
        return len(self.options)

    def __getitem__(self, i: int) -> OptionSpec:
        return self.options[i]

    def __iter__(self):
        return iter(self.options)

    @property
    def O(self) -> int:
        return len(self.options)

    @property
    def H_max(self) -> int:
        return max(o.H_o for o in self.options)

    def init_table(self) -> np.ndarray:
        """Bool ``(H, S, O)`` initiation table."""
        return np.stack([o.init for o in self.options], axis=-1)

    def policies(self) -> list[np.ndarray]:
        return [o.pi for o in self.options]

    def with_policies(self, pis: Sequence[np.ndarray]) -> "OptionSet":
        if len(pis) != len(self.options):
            raise ModelError("one inner policy per option required")
        return OptionSet(tuple(o.with_policy(p) for o, p in zip(self.options, pis)))


def policies_digest(pis: Sequence[np.ndarray]) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for p in pis:
        h.update(np.ascontiguousarray(p, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.digest()


@dataclass(frozen=True, eq=False)
class InducedSmdp:
    """Exact multi-step kernel ``kernel[h-1, s, o, h'-1, s']`` and reward ``reward[h-1, s, o]``.

    The ``h'`` axis has ``H + 1`` entries; index ``H`` stands for stage ``H + 1``.
    Rows of options that are not initiable at ``(s, h)`` are zero.
    """

    kernel: np.ndarray
    reward: np.ndarray
    duration: np.ndarray
    init: np.ndarray

    @property
    def H(self) -> int:
        return self.kernel.shape[0]

    @property
    def S(self) -> int:
        return self.kernel.shape[1]

    @property
    def O(self) -> int:
        return self.kernel.shape[2]


# ---------------------------------------------------------------------------
# execution


class OptionOutcome(NamedTuple):
    state: int
    stage: int
    reward: float
    steps: list[Step]
    cause: str  # "beta", "duration" or "horizon"


def execute_option(
    model: TabularMdp,
    opt: OptionSpec,
    s: int,
    h: int,
    rng: RngStream,
    term_rng: RngStream | None = None,
) -> OptionOutcome:
    """Run ``opt`` from ``(s, h)`` until it stops.

    One draw from ``rng`` per primitive step and one draw from ``term_rng``
    (defaults to ``rng``) per termination test.
    """
    if not 1 <= h <= model.H:
        raise IndexError(f"stage {h} outside [1, {model.H}]")
    if not opt.init[h - 1, s]:
        raise ModelError(f"option {opt.id} is not initiable at (s={s}, h={h})")
    trng = rng if term_rng is None else term_rng
    H, pi, beta, cdf, r = model.H, opt.pi, opt.beta, model.cdf, model.r
    steps: list[Step] = []
    total = 0.0
    t = 0
    while True:
        a = int(pi[t, s])
        s2 = sample_index(cdf[h - 1, s, a], rng.uniform())
        rew = float(r[h - 1, s, a])
        steps.append(Step(s, a, rew, s2, h))
        total += rew
        t += 1
        h += 1
        s = s2
        if h == H + 1:
            return OptionOutcome(s, h, total, steps, "horizon")
        if t >= opt.H_o:
            return OptionOutcome(s, h, total, steps, "duration")
        if trng.uniform() < beta[h - 1, s]:
            return OptionOutcome(s, h, total, steps, "beta")


def simulate_option_batch(
    model: TabularMdp, opt: OptionSpec, s: int, h: int, n: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized Monte Carlo of ``n`` executions from ``(s, h)``.

    Returns arrays ``(next_state, next_stage, cumulative_reward)``. Shares the
    semantics of :func:`execute_option` but not its random sequence.
    """
    gen = np.random.default_rng(seed)
    H = model.H
    state = np.full(n, s, dtype=np.int64)
    stage = np.full(n, h, dtype=np.int64)
    total = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for t in range(opt.H_o):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        x, g = state[idx], stage[idx]
        a = opt.pi[t, x]
        total[idx] += model.r[g - 1, x, a]
        cdf = model.cdf[g - 1, x, a]
        u = gen.random(idx.size)
        nxt = np.minimum((cdf <= u[:, None]).sum(axis=1), model.S - 1)
        state[idx] = nxt
        stage[idx] = g + 1
        stop = (g + 1 == H + 1) | (t + 1 >= opt.H_o)
        cont = ~stop
        u2 = gen.random(idx.size)
        b = np.ones(idx.size)
        b[cont] = opt.beta[g[cont], nxt[cont]]
        stop |= u2 < b
        alive[idx[stop]] = False
    return state, stage, total


# ---------------------------------------------------------------------------
# exact flattening


def _propagate(
    p: np.ndarray,
    r: np.ndarray,
    opt: OptionSpec,
    beta: np.ndarray,
    keep_occupancy: bool = False,
    clip: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    """Forward propagation of the running mass from every start pair at once.

    Returns ``kernel[h0, s0, h'-1, s']``, ``reward[h0, s0]``, expected
    ``duration[h0, s0]`` and optionally ``occ[h0, s0, t, s]``, the probability
    that the option is still running in state ``s`` after ``t`` steps.
    """
    H, S = p.shape[0], p.shape[1]
    idx = np.arange(S)
    kernel = np.zeros((H, S, H + 1, S))
    reward = np.zeros((H, S))
    duration = np.zeros((H, S))
    occ = np.zeros((H, S, opt.H_o, S)) if keep_occupancy else None
    D = np.broadcast_to(np.eye(S), (H, S, S)).copy()
    for t in range(opt.H_o):
        n_act = H - t
        if n_act <= 0:
            break
        Dt = D[:n_act]
        if occ is not None:
            occ[:n_act, :, t, :] = Dt
        a = opt.pi[t]
        P_t = p[t:H, idx, a]  # (n_act, S, S)
        reward[:n_act] += np.einsum("ixs,is->ix", Dt, r[t:H, idx, a])
        N = np.einsum("ixs,isy->ixy", Dt, P_t)
        term = np.ones((n_act, S))
        if t + 1 < opt.H_o and n_act > 1:
            term[: n_act - 1] = beta[t + 1 : H]
        rows = np.arange(n_act)
        mass = N * term[:, None, :]
        kernel[rows, :, rows + t + 1, :] += mass
        duration[:n_act] += (t + 1) * mass.sum(axis=-1)
        D_next = N * (1.0 - term[:, None, :])
        if clip:
            np.minimum(D_next, 1.0, out=D_next)
        D = np.zeros((H, S, S))
        D[:n_act] = D_next
    return kernel, reward, duration, occ


def flatten_options(model: TabularMdp, options: OptionSet, check: bool = True) -> InducedSmdp:
    """Exact induced SMDP of ``options`` (with their current inner policies)."""
    if check:
        bad = check_admissibility(options, model)
        if bad:
            raise AdmissibilityError(bad)
    H, S, O = model.H, model.S, options.O
    kernel = np.zeros((H, S, O, H + 1, S))
    reward = np.zeros((H, S, O))
    duration = np.zeros((H, S, O))
    init = options.init_table()
    for o, opt in enumerate(options):
        k, rw, du, _ = _propagate(model.p, model.r, opt, opt.beta)
        m = opt.init
        kernel[:, :, o] = k * m[:, :, None, None]
        reward[:, :, o] = rw * m
        duration[:, :, o] = du * m
    for arr in (kernel, reward, duration):
        arr.setflags(write=False)
    return InducedSmdp(kernel, reward, duration, init)


def option_occupancy(model: TabularMdp, opt: OptionSpec) -> np.ndarray:
    """``occ[h0, s0, t, s]``: probability the option started at ``(s0, h0+1)`` is running in ``s`` after ``t`` steps."""
    return _propagate(model.p, model.r, opt, opt.beta, keep_occupancy=True)[3]


def _support_kernel(model: TabularMdp, opt: OptionSpec, any_action: bool) -> tuple[np.ndarray, np.ndarray]:
    """Reachability version of :func:`_propagate` (entries > 0 mark reachable pairs)."""
    sup = (model.p > 0).astype(np.float64)
    if any_action:
        acts = list(opt.allowed_actions(model.A))
        sup = np.repeat(sup[:, :, acts].max(axis=2, keepdims=True), model.A, axis=2)
    beta_sup = np.where(opt.beta >= 1.0, 1.0, np.where(opt.beta > 0, 0.5, 0.0))
    # 0.5 marks "may stop and may continue": both branches keep positive mass
    k, _, _, occ = _propagate(sup, np.zeros_like(model.r), opt, beta_sup, keep_occupancy=True, clip=True)
    return k, occ  # type: ignore[return-value]


def check_admissibility(options: OptionSet, model: TabularMdp) -> list[tuple[int, int, int]]:
    """Termination pairs ``(s, h, o)`` reachable from ``I^o`` where no option can start."""
    init_any = options.init_table().any(axis=-1)  # (H, S)
    H = model.H
    out = []
    for o, opt in enumerate(options):
        k, _ = _support_kernel(model, opt, any_action=False)
        reach = (k * opt.init[:, :, None, None]).sum(axis=(0, 1)) > 0  # (H+1, S)
        for hcol, s in zip(*np.nonzero(reach[:H])):
            if not init_any[hcol, s]:
                out.append((int(s), int(hcol + 1), o))
    return sorted(set(out), key=lambda x: (x[2], x[1], x[0]))


def reachable_running_pairs(model: TabularMdp, opt: OptionSpec) -> np.ndarray:
    """Bool ``(H_o, S)``: elapsed-step/state pairs where the inner policy can be queried.

    Reachability uses every action in ``A_o`` from every initiation pair.
    """
    _, occ = _support_kernel(model, opt, any_action=True)
    return (occ * opt.init[:, :, None, None]).sum(axis=(0, 1)) > 0


# ---------------------------------------------------------------------------
# sub-MDPs


@dataclass(frozen=True, eq=False)
class SubMdp:
    """Local MDP of one option: states ``states`` plus an absorbing terminal index.

    ``p[t, x, a, y]`` and ``r[t, x, a]`` use local stage ``t+1`` (0-based index),
    local state ``x`` (the terminal is index ``n_states``) and local action
    ``a`` (position in ``actions``). Dynamics are read at ``ref_stage + t``,
    which is exact whenever the model and termination are stage-independent.
    """

    option_id: str
    states: np.ndarray
    actions: tuple[int, ...]
    horizon: int
    p: np.ndarray
    r: np.ndarray
    starts: np.ndarray
    ref_stage: int
    local_index: np.ndarray  # global state -> local index, -1 if absent

    @property
    def n_states(self) -> int:
        return int(self.states.shape[0])

    @property
    def terminal(self) -> int:
        return self.n_states

    @property
    def A_o(self) -> int:
        return len(self.actions)

    def to_option_policy(self, local_pi: np.ndarray, opt: OptionSpec, S: int) -> np.ndarray:
        """Embed a local policy ``(horizon, n_states+1)`` into the option's ``(H_o, S)`` table."""
        acts = np.asarray(self.actions)
        out = np.full((opt.H_o, S), acts[0], dtype=np.int64)
        out[: self.horizon, self.states] = acts[np.asarray(local_pi)[:, : self.n_states]]
        return out

    def from_option_policy(self, pi: np.ndarray) -> np.ndarray:
        pos = {a: i for i, a in enumerate(self.actions)}
        loc = np.zeros((self.horizon, self.n_states + 1), dtype=np.int64)
        for t in range(self.horizon):
            for x, s in enumerate(self.states):
                loc[t, x] = pos[int(pi[t, s])]
        return loc


def extract_sub_mdp(model: TabularMdp, opt: OptionSpec) -> SubMdp:
    H, S = model.H, model.S
    acts = opt.allowed_actions(model.A)
    _, occ = _support_kernel(model, opt, any_action=True)
    running = (occ * opt.init[:, :, None, None]).sum(axis=(0, 1)) > 0  # (H_o, S)
    k, _ = _support_kernel(model, opt, any_action=True)
    arrivals = ((k * opt.init[:, :, None, None]).sum(axis=(0, 1)) > 0).any(axis=0)
    steps_alive = np.flatnonzero(running.any(axis=1))
    horizon = int(steps_alive.max()) + 1
    members = np.flatnonzero(running.any(axis=0) | arrivals)
    n = members.size
    local = np.full(S, -1, dtype=np.int64)
    local[members] = np.arange(n)
    ref = int(np.flatnonzero(opt.init.any(axis=1)).min()) + 1
    p = np.zeros((horizon, n + 1, len(acts), n + 1))
    r = np.zeros((horizon, n + 1, len(acts)))
    for t in range(horizon):
        g = min(ref + t, H)  # stage of the action
        arr = min(g + 1, H)
        stop = np.ones(S) if t + 1 >= opt.H_o else opt.beta[arr - 1]
        for j, a in enumerate(acts):
            row = model.p[g - 1][np.ix_(members, [a])][:, 0, :]  # (n, S)
            p[t, :n, j, :n] = row[:, members] * (1.0 - stop[members])
            p[t, :n, j, n] = (row * stop).sum(axis=1)
            if opt.reward is not None:
                r[t, :n, j] = opt.reward[t, members, a]
            else:
                r[t, :n, j] = model.r[g - 1, members, a]
        p[t, n, :, n] = 1.0
    starts = local[np.flatnonzero(opt.init.any(axis=0))]
    return SubMdp(opt.id, members, tuple(acts), horizon, p, r, starts, ref, local)


def solve_sub_mdp(sub: SubMdp) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Optimal local policy, value ``V[t, x]`` (row ``horizon`` is zero) and ``Q[t, x, a]``."""
    T, n1 = sub.horizon, sub.n_states + 1
    V = np.zeros((T + 1, n1))
    Q = np.zeros((T, n1, sub.A_o))
    for t in range(T - 1, -1, -1):
        Q[t] = sub.r[t] + sub.p[t] @ V[t + 1]
        V[t] = Q[t].max(axis=1)
    V[:, sub.terminal] = 0.0
    return np.argmax(Q, axis=2), V, Q


# ---------------------------------------------------------------------------
# Assumption on local/global optimality


@dataclass
class Assumption2Report:
    violations: list[tuple[str, str]]  # (option id, reason)
    exact: bool
    local_counts: dict[str, int]

    @property
    def holds(self) -> bool:
        return not self.violations


def local_optimal_policy_set(model: TabularMdp, opt: OptionSpec, cap: float = 1e6, tol: float = 1e-10) -> list[np.ndarray]:
    """Every canonical inner policy optimal for the option's sub-MDP at all reachable pairs."""
    sub = extract_sub_mdp(model, opt)
    _, _, Q = solve_sub_mdp(sub)
    mask = reachable_running_pairs(model, opt)
    choices: list[tuple[int, int, list[int]]] = []
    total = 1.0
    for t in range(opt.H_o):
        for s in np.flatnonzero(mask[t]):
            if t >= sub.horizon:
                continue
            x = sub.local_index[s]
            q = Q[t, x]
            best = [sub.actions[j] for j in np.flatnonzero(q >= q.max() - tol)]
            choices.append((t, int(s), best))
            total *= len(best)
    if total > cap:
        raise SizeError(f"local optimal set of option {opt.id}", total, cap)
    base = np.full((opt.H_o, model.S), opt.allowed_actions(model.A)[0], dtype=np.int64)
    out = []
    for combo in _product([c[2] for c in choices]):
        pi = base.copy()
        for (t, s, _), a in zip(choices, combo):
            pi[t, s] = a
        out.append(pi)
    return out


def _product(lists: list[list[int]]):
    import itertools

    return itertools.product(*lists)


def check_assumption2(model: TabularMdp, options: OptionSet, cap: float = 1e6, s1: int = 0) -> Assumption2Report:
    """Every locally optimal inner policy of an option used by an optimal high-level policy is jointly optimal."""
    from .oracle import solve_joint_optimum

    joint = solve_joint_optimum(model, options, cap=cap, s1=s1, keep_argmax=True)
    violations: list[tuple[str, str]] = []
    counts: dict[str, int] = {}
    used = joint.options_used()
    for o, opt in enumerate(options):
        if o not in used:
            continue
        local = local_optimal_policy_set(model, opt, cap=cap)
        counts[opt.id] = len(local)
        star = {p.tobytes() for p in joint.inner_argmax[o]}
        for pi in local:
            canon = joint.canonicalize(o, pi)
            if canon.tobytes() in star:
                continue
            if not joint.exact and joint.is_jointly_optimal_with(o, canon):
                continue
            violations.append((opt.id, "locally optimal inner policy is not jointly optimal"))
            break
    return Assumption2Report(violations, joint.exact, counts)


# ---------------------------------------------------------------------------
# JSON


def option_to_dict(opt: OptionSpec) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "id": opt.id,
        "init": [[int(s), int(h) + 1] for h, s in zip(*np.nonzero(opt.init))],
        "beta": opt.beta.tolist(),
        "pi": opt.pi.tolist(),
        "H_o": opt.H_o,
    }
    if opt.actions is not None:
        doc["actions"] = list(opt.actions)
    if opt.reward is not None:
        doc["reward"] = opt.reward.tolist()
    return doc


def option_from_dict(doc: dict[str, Any], H: int, S: int) -> OptionSpec:
    for key in ("id", "init", "beta", "pi", "H_o"):
        if key not in doc:
            raise ModelError(f"option: missing field '{key}'")
    init = np.zeros((H, S), dtype=bool)
    for pair in doc["init"]:
        s, h = int(pair[0]), int(pair[1])
        if not (0 <= s < S and 1 <= h <= H):
            raise ModelError(f"option {doc['id']}: initiation pair {pair} out of range")
        init[h - 1, s] = True
    return OptionSpec(
        id=str(doc["id"]),
        init=init,
        beta=np.asarray(doc["beta"], dtype=np.float64),
        pi=np.asarray(doc["pi"], dtype=np.int64),
        H_o=int(doc["H_o"]),
        actions=tuple(doc["actions"]) if "actions" in doc else None,
        reward=np.asarray(doc["reward"]) if "reward" in doc else None,
    )
