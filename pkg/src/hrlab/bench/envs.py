"""Shipped environment bundles.

* ``make_corridor_env``: grid rooms joined by doorways, one traverse option per room.
* ``make_walkway_env``: rooms on a conveyor. Motion ignores the action, so every
  policy visits the same state-stage pairs; actions only choose rewards. A walk
  option (two gaits) crosses each room and service options act at room ends.
* ``make_duration_env``: a loop whose lap takes a random number of steps.
* ``make_flat_reduction_env``: one single-step option per primitive action.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..core import ModelError, TabularMdp, model_from_dict, model_to_dict
from ..options import OptionSet, OptionSpec, option_from_dict, option_to_dict


@dataclass(frozen=True, eq=False)
class EnvironmentBundle:
    name: str
    model: TabularMdp
    options: OptionSet
    s1: int = 0
    tags: tuple[str, ...] = ()
    K: int = 1024
    delta: float = 0.1
    meta: dict[str, Any] = field(default_factory=dict)
    golden: dict[str, Any] | None = None

    def optimal_inner(self) -> list[np.ndarray] | None:
        pis = self.meta.get("optimal_inner")
        return None if pis is None else [np.asarray(p, dtype=np.int64) for p in pis]

    def to_dict(self) -> dict[str, Any]:
        meta = {k: _plain(v) for k, v in self.meta.items()}
        return {
            "name": self.name,
            "model": model_to_dict(self.model),
            "options": [option_to_dict(o) for o in self.options],
            "s1": self.s1,
            "tags": list(self.tags),
            "K": self.K,
            "delta": self.delta,
            "meta": meta,
            "golden": self.golden,
        }


def _plain(v: Any) -> Any:
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def bundle_from_dict(doc: dict[str, Any]) -> EnvironmentBundle:
    if "model" not in doc or "options" not in doc:
        raise ModelError("bundle: needs 'model' and 'options'")
    model = model_from_dict(doc["model"])
    opts = OptionSet(tuple(option_from_dict(o, model.H, model.S) for o in doc["options"]))
    return EnvironmentBundle(
        name=str(doc.get("name", "bundle")),
        model=model,
        options=opts,
        s1=int(doc.get("s1", 0)),
        tags=tuple(doc.get("tags", ())),
        K=int(doc.get("K", 1024)),
        delta=float(doc.get("delta", 0.1)),
        meta=dict(doc.get("meta", {})),
        golden=doc.get("golden"),
    )


def save_bundle(bundle: EnvironmentBundle, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bundle.to_dict()) + "\n")


def load_bundle(path: str | Path) -> EnvironmentBundle:
    return bundle_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# grid corridor

_MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0))  # right, left, up, down


def make_corridor_env(
    rooms: int, room_size: int, H: int, slip: float, room_height: int | None = None
) -> EnvironmentBundle:
    """Rooms of ``room_height x room_size`` cells in a row; doorways on the middle row.

    Reward 1 for every stage spent at the goal (middle row, last column).
    With probability ``slip`` the move direction is replaced by a uniform one.
    """
    if rooms < 2 or room_size < 2:
        raise ModelError("corridor needs rooms >= 2 and room_size >= 2")
    if not 0.0 <= slip <= 0.3:
        raise ModelError(f"slip {slip} outside [0, 0.3]")
    height = room_size if room_height is None else int(room_height)
    if height < 1:
        raise ModelError("room_height must be positive")
    W = rooms * room_size
    S, A = height * W, 4
    mid = height // 2
    cell = lambda r, c: r * W + c  # noqa: E731
    room_of = lambda c: c // room_size  # noqa: E731
    goal = cell(mid, W - 1)
    start = cell(mid, 0)
    if H < W - 1:
        raise ModelError(f"horizon {H} shorter than the shortest path {W - 1}")

    def move(r: int, c: int, d: int) -> int:
        if cell(r, c) == goal:
            return goal
        dr, dc = _MOVES[d]
        r2, c2 = r + dr, c + dc
        if not (0 <= r2 < height and 0 <= c2 < W):
            return cell(r, c)
        if room_of(c2) != room_of(c) and r != mid:
            return cell(r, c)
        return cell(r2, c2)

    p = np.zeros((S, A, S))
    for r in range(height):
        for c in range(W):
            s = cell(r, c)
            for a in range(A):
                p[s, a, move(r, c, a)] += 1.0 - slip
                for d in range(A):
                    p[s, a, move(r, c, d)] += slip / A
    rew = np.zeros((S, A))
    rew[goal] = 1.0
    model = TabularMdp.stationary(p, rew, H)

    H_o = min(H, room_size + (height + 1) // 2)
    options = []
    optimal = []
    for i in range(rooms):
        cols = range(i * room_size, (i + 1) * room_size)
        members = [cell(r, c) for r in range(height) for c in cols]
        target = goal if i == rooms - 1 else cell(mid, (i + 1) * room_size)
        init = np.zeros((H, S), dtype=bool)
        init[:, members] = True
        beta = np.zeros((H, S))
        outside = np.setdiff1d(np.arange(S), members)
        beta[:, outside] = 1.0
        beta[:, goal] = 1.0
        # deterministic shortest path to the room's exit, lowest action on ties
        dist = {target: 0}
        frontier = [target]
        while frontier:
            nxt = []
            for s in frontier:
                for u in members:
                    if u in dist:
                        continue
                    if any(move(u // W, u % W, a) == s for a in range(A)):
                        dist[u] = dist[s] + 1
                        nxt.append(u)
            frontier = nxt
        pi_row = np.zeros(S, dtype=np.int64)
        for u in members:
            if u == target:
                continue
            best = min(range(A), key=lambda a: (dist.get(move(u // W, u % W, a), 10**6), a))
            pi_row[u] = best
        pi = np.tile(pi_row, (H_o, 1))
        local = np.zeros((H_o, S, A))
        for t in range(H_o):
            local[t, :, :] = p[:, :, target] * (H_o - t) / H_o
        local[:, target, :] = 0.0
        options.append(OptionSpec(f"room{i}", init, beta, pi, H_o, reward=local))
        optimal.append(pi)
    opts = OptionSet(tuple(options))
    golden = None
    if slip == 0.0:
        golden = {"V_star": float(H - (W - 1)), "shortest_path": W - 1}
    return EnvironmentBundle(
        name=f"corridor-{rooms}x{room_size}" + (f"h{height}" if room_height is not None else "") + f"-H{H}-slip{slip:g}",
        model=model,
        options=opts,
        s1=start,
        tags=("admissible",),
        K=4096,
        delta=0.1,
        meta={"optimal_inner": optimal, "goal": goal, "layout": "grid", "rooms": rooms, "room_size": room_size},
        golden=golden,
    )


# ---------------------------------------------------------------------------
# walkway corridor


def make_walkway_env(
    rooms: int = 2,
    room_size: int = 4,
    H: int | None = None,
    slip: float = 0.0,
    n_services: int = 2,
    n_distractors: int = 2,
    key_reward: float = 1.0,
    off_reward: float = 0.3,
    service_best: float = 0.9,
    service_other: float = 0.3,
) -> EnvironmentBundle:
    """Rooms on a conveyor: ``room_size - 1`` walk cells then a service cell.

    The conveyor advances one cell per step (or stays with probability
    ``slip``) whatever the action. Actions: two gaits, ``n_services`` service
    actions, ``n_distractors`` actions that never pay. Each walk cell pays
    ``key_reward`` for its key gait and ``off_reward`` for the other gait; the
    service cell of room ``i`` pays ``service_best`` for service ``i mod
    n_services`` and ``service_other`` for the rest.
    """
    if rooms < 1 or room_size < 2:
        raise ModelError("walkway needs rooms >= 1 and room_size >= 2")
    if not 0.0 <= slip <= 0.3:
        raise ModelError(f"slip {slip} outside [0, 0.3]")
    S = rooms * room_size
    H = S if H is None else int(H)
    A = 2 + n_services + n_distractors
    p = np.zeros((S, A, S))
    for c in range(S):
        nxt = min(c + 1, S - 1)
        p[c, :, nxt] += 1.0 - slip
        p[c, :, c] += slip
    rew = np.zeros((S, A))
    walk_cells, service_cells, key = [], [], {}
    for i in range(rooms):
        for j in range(room_size - 1):
            c = i * room_size + j
            walk_cells.append(c)
            key[c] = (i + j) % 2
            rew[c, key[c]] = key_reward
            rew[c, 1 - key[c]] = off_reward
        c = i * room_size + room_size - 1
        service_cells.append(c)
        for k in range(n_services):
            rew[c, 2 + k] = service_best if k == i % n_services else service_other
    model = TabularMdp.stationary(p, rew, H)

    H_walk = room_size - 1
    init = np.zeros((H, S), dtype=bool)
    init[:, walk_cells] = True
    beta = np.zeros((H, S))
    beta[:, service_cells] = 1.0
    walk_pi = np.zeros((H_walk, S), dtype=np.int64)
    walk_opt = np.zeros((H_walk, S), dtype=np.int64)
    for c in walk_cells:
        walk_opt[:, c] = key[c]
    opts = [OptionSpec("walk", init, beta, walk_pi, H_walk, actions=(0, 1))]
    for k in range(n_services):
        init_k = np.zeros((H, S), dtype=bool)
        init_k[:, service_cells] = True
        pi_k = np.full((1, S), 2 + k, dtype=np.int64)
        opts.append(OptionSpec(f"service{k}", init_k, np.ones((H, S)), pi_k, 1, actions=(2 + k,)))
    optimal = [walk_opt] + [o.pi for o in opts[1:]]
    return EnvironmentBundle(
        name=f"walkway-{rooms}x{room_size}-H{H}-slip{slip:g}",
        model=model,
        options=OptionSet(tuple(opts)),
        s1=0,
        tags=("admissible", "assumption2", "policy-independent-occupancy"),
        K=2**14,
        delta=0.1,
        meta={"optimal_inner": optimal, "layout": "walkway", "rooms": rooms, "room_size": room_size},
    )


# ---------------------------------------------------------------------------
# stochastic durations


def make_duration_env(H: int = 48, tau_min: int = 2, detours: int = 2, q: float = 0.5) -> EnvironmentBundle:
    """A loop of ``tau_min`` main cells; the first ``detours`` cells branch into a
    one-step detour with probability ``q``. A lap lasts between ``tau_min`` and
    ``tau_min + detours`` steps; options start and stop at the hub (cell 0).
    """
    if tau_min < 1 or not 0 <= detours <= tau_min or not 0.0 <= q <= 1.0:
        raise ModelError("invalid duration-loop parameters")
    S, A = tau_min + detours, 2
    p = np.zeros((S, A, S))
    for j in range(tau_min):
        nxt = (j + 1) % tau_min
        if j < detours:
            p[j, :, nxt] += 1.0 - q
            p[j, :, tau_min + j] += q
            p[tau_min + j, :, nxt] = 1.0
        else:
            p[j, :, nxt] = 1.0
    rew = np.zeros((S, A))
    rew[:, 0] = 0.5
    rew[:, 1] = 0.6
    model = TabularMdp.stationary(p, rew, H)
    tau_max = tau_min + detours
    init = np.zeros((H, S), dtype=bool)
    init[:, 0] = True
    beta = np.zeros((H, S))
    beta[:, 0] = 1.0
    opts = []
    for a, nm in ((0, "lane0"), (1, "lane1")):
        opts.append(OptionSpec(nm, init, beta, np.full((tau_max, S), a, dtype=np.int64), tau_max, actions=(a,)))
    return EnvironmentBundle(
        name=f"duration-H{H}-tau{tau_min}-{tau_max}",
        model=model,
        options=OptionSet(tuple(opts)),
        s1=0,
        tags=("admissible", "assumption2", "stochastic-duration"),
        K=64,
        delta=0.05,
        meta={
            "tau_min": tau_min,
            "tau_max": tau_max,
            "mean_duration": tau_min + detours * q,
            "optimal_inner": [o.pi for o in opts],
        },
    )


# ---------------------------------------------------------------------------
# flat reduction


def random_model(S: int, A: int, H: int, seed: int, sparsity: float = 0.0) -> TabularMdp:
    gen = np.random.default_rng(seed)
    p = gen.dirichlet(np.ones(S), size=(H, S, A))
    if sparsity > 0:
        p = np.where(gen.random(p.shape) < sparsity, 0.0, p)
        p[..., 0] += (p.sum(-1) == 0)
        p /= p.sum(-1, keepdims=True)
    r = gen.random((H, S, A))
    return TabularMdp(p, r)


def make_flat_reduction_env(model: TabularMdp, name: str = "flat-reduction", s1: int = 0) -> EnvironmentBundle:
    H, S, A = model.H, model.S, model.A
    opts = []
    for a in range(A):
        opts.append(
            OptionSpec(
                f"a{a}",
                np.ones((H, S), dtype=bool),
                np.ones((H, S)),
                np.full((1, S), a, dtype=np.int64),
                1,
                actions=(a,),
            )
        )
    return EnvironmentBundle(
        name=name,
        model=model,
        options=OptionSet(tuple(opts)),
        s1=s1,
        tags=("admissible", "assumption2", "flat-reduction"),
        K=2048,
        delta=0.1,
        meta={"optimal_inner": [o.pi for o in opts]},
    )


# ---------------------------------------------------------------------------
# registry

REGISTRY: dict[str, Callable[[], EnvironmentBundle]] = {
    "corridor": lambda: make_corridor_env(2, 3, H=8, slip=0.0),
    "corridor-line": lambda: make_corridor_env(2, 3, H=6, slip=0.0, room_height=1),
    "walkway": lambda: make_walkway_env(rooms=3, room_size=3, slip=0.1, service_other=0.0),
    "walkway-det": lambda: make_walkway_env(),
    "duration": lambda: make_duration_env(),
    "flat-reduction": lambda: make_flat_reduction_env(random_model(3, 2, 4, seed=7)),
}


def get_bundle(name: str) -> EnvironmentBundle:
    if name in REGISTRY:
        return REGISTRY[name]()
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        return load_bundle(path)
    raise KeyError(name)
