"""Tabular finite-horizon MDPs, deterministic policies, seeded simulation.

Stages are 1-indexed in the public API (h in [1, H]). Arrays are stored
0-based: ``p[h - 1]`` holds the kernel used at stage ``h``. Value tables have
shape ``(H + 1, S)`` and their last row (stage H + 1) is identically zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

ROW_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a model or policy violates its structural constraints."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Non-stationary tabular MDP with kernel ``p[h, s, a, s']`` and reward ``r[h, s, a]``."""

    p: np.ndarray
    r: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.p, dtype=np.float64)
        r = np.array(self.r, dtype=np.float64)
        if p.ndim != 4 or r.ndim != 3:
            raise ModelError(f"expected p of rank 4 and r of rank 3, got {p.ndim} and {r.ndim}")
        if p.shape[:3] != r.shape or p.shape[1] != p.shape[3]:
            raise ModelError(f"shape mismatch: p{p.shape} vs r{r.shape}")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "r", r)
        cdf = np.cumsum(p, axis=-1)
        cdf.setflags(write=False)
        object.__setattr__(self, "_cdf", cdf)

    @property
    def H(self) -> int:
        return self.p.shape[0]

    @property
    def S(self) -> int:
        return self.p.shape[1]

    @property
    def A(self) -> int:
        return self.p.shape[2]

    @property
    def cdf(self) -> np.ndarray:
        return self._cdf  # type: ignore[attr-defined]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.p.shape, dtype=np.int64).tobytes())
        h.update(self.p.tobytes())
        h.update(self.r.tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def stationary(cls, p: np.ndarray, r: np.ndarray, H: int) -> "TabularMdp":
        """Replicate a stage-independent ``p[s, a, s']`` / ``r[s, a]`` across ``H`` stages."""
        p = np.asarray(p, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        return cls(np.broadcast_to(p, (H,) + p.shape), np.broadcast_to(r, (H,) + r.shape))


def validate_mdp(model: TabularMdp) -> list[str]:
    """Return human-readable violations (simplex rows, reward range). Empty means valid."""
    out: list[str] = []
    p, r = model.p, model.r
    if not np.all(np.isfinite(p)) or not np.all(np.isfinite(r)):
        out.append("non-finite entries in p or r")
    for h, s, a, s2 in zip(*np.nonzero(p < 0)):
        out.append(f"negative probability {p[h, s, a, s2]:g} at (h={h + 1}, s={s}, a={a}, s'={s2})")
    sums = p.sum(axis=-1)
    for h, s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_TOL)):
        out.append(f"row sum {sums[h, s, a]:.6g} != 1 at (h={h + 1}, s={s}, a={a})")
    for h, s, a in zip(*np.nonzero((r < 0) | (r > 1))):
        out.append(f"reward {r[h, s, a]:g} out of [0,1] at (h={h + 1}, s={s}, a={a})")
    return out


# ---------------------------------------------------------------------------
# randomness


def _name_words(name: str) -> list[int]:
    d = hashlib.blake2b(name.encode(), digest_size=16).digest()
    return [int.from_bytes(d[i : i + 4], "little") for i in range(0, 16, 4)]


class RngStream:
    """Named, seeded uniform stream with a draw counter.

    The underlying generator is PCG64 keyed by ``(seed, hash(name))``, so two
    streams with the same seed and name produce the same sequence bit for bit.
    Draws are buffered in blocks; buffering does not change the sequence.
    """

    __slots__ = ("seed", "name", "draws", "_gen", "_buf", "_pos")
    _BLOCK = 256

    def __init__(self, seed: int, name: str = "root") -> None:
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        self.seed = int(seed)
        self.name = name
        self.draws = 0
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_name_words(name))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self._buf: list[float] = []
        self._pos = 0

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{name}")

    def uniform(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._gen.random(self._BLOCK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        self.draws += 1
        return u

    def integers(self, n: int) -> int:
        """Uniform index in ``[0, n)`` from exactly one draw."""
        return min(int(self.uniform() * n), n - 1)


def sample_index(cdf_row: np.ndarray, u: float) -> int:
    i = int(np.searchsorted(cdf_row, u, side="right"))
    return min(i, cdf_row.shape[0] - 1)


# ---------------------------------------------------------------------------
# trajectories


class Step(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    h: int


class Segment(NamedTuple):
    s: int
    o: int
    h: int
    s_next: int
    h_next: int
    reward: float


@dataclass
class Trajectory:
    seed: int
    steps: list[Step] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)

    def check(self, H: int) -> list[str]:
        """Structural invariants: segments tile the step list in order."""
        errs = []
        i = 0
        for seg in self.segments:
            if not seg.h_next > seg.h:
                errs.append(f"segment {seg} does not advance")
            n = seg.h_next - seg.h
            chunk = self.steps[i : i + n]
            if len(chunk) != n or (chunk and (chunk[0].h != seg.h or chunk[0].s != seg.s)):
                errs.append(f"segment {seg} does not match its steps")
            elif abs(sum(st.r for st in chunk) - seg.reward) > 1e-12:
                errs.append(f"segment {seg} reward mismatch")
            i += n
        if self.segments and i != len(self.steps):
            errs.append("segments do not cover all steps")
        if self.segments and self.segments[-1].h_next > H + 1:
            errs.append("final stage beyond H+1")
        return errs

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "steps": [list(s) for s in self.steps], "segments": [list(s) for s in self.segments]},
            separators=(",", ":"),
        )


# ---------------------------------------------------------------------------
# simulation and exact evaluation


def step(model: TabularMdp, s: int, a: int, h: int, rng: RngStream) -> tuple[int, float]:
    """Sample ``s' ~ p(.|s, a, h)``; consumes exactly one draw."""
    if not 1 <= h <= model.H:
        raise IndexError(f"stage {h} outside [1, {model.H}]")
    if not 0 <= s < model.S or not 0 <= a < model.A:
        raise IndexError(f"state {s} or action {a} out of range")
    s2 = sample_index(model.cdf[h - 1, s, a], rng.uniform())
    return s2, float(model.r[h - 1, s, a])


def _check_policy(model: TabularMdp, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi)
    if pi.shape != (model.H, model.S):
        raise ModelError(f"policy shape {pi.shape} != {(model.H, model.S)}")
    if pi.min() < 0 or pi.max() >= model.A:
        raise ModelError("policy contains an invalid action index")
    return pi.astype(np.int64)


def evaluate_flat_policy(model: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """Exact value table ``V[h-1, s]`` of a deterministic Markov policy."""
    pi = _check_policy(model, pi)
    H, S = model.H, model.S
    V = np.zeros((H + 1, S))
    idx = np.arange(S)
    for h in range(H - 1, -1, -1):
        a = pi[h]
        V[h] = model.r[h, idx, a] + model.p[h, idx, a] @ V[h + 1]
    return V


def solve_flat_optimal(model: TabularMdp) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction; ties resolved to the lowest action index."""
    H, S = model.H, model.S
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        Q = model.r[h] + model.p[h] @ V[h + 1]
        pi[h] = np.argmax(Q, axis=1)
        V[h] = Q.max(axis=1)
    return pi, V


def rollout_flat(model: TabularMdp, pi: np.ndarray, s1: int, rng: RngStream) -> Trajectory:
    traj = Trajectory(seed=rng.seed)
    s = s1
    for h in range(1, model.H + 1):
        a = int(pi[h - 1, s])
        s2, r = step(model, s, a, h, rng)
        traj.steps.append(Step(s, a, r, s2, h))
        s = s2
    return traj


# ---------------------------------------------------------------------------
# JSON


def model_to_dict(model: TabularMdp) -> dict[str, Any]:
    return {"S": model.S, "A": model.A, "H": model.H, "p": model.p.tolist(), "r": model.r.tolist()}


def model_from_dict(doc: dict[str, Any]) -> TabularMdp:
    """Build and validate a model; errors name the offending path."""
    for key in ("S", "A", "H", "p", "r"):
        if key not in doc:
            raise ModelError(f"model: missing field '{key}'")
    S, A, H = int(doc["S"]), int(doc["A"]), int(doc["H"])
    try:
        p = np.asarray(doc["p"], dtype=np.float64)
        r = np.asarray(doc["r"], dtype=np.float64)
    except ValueError as exc:
        raise ModelError(f"model: ragged or non-numeric arrays ({exc})") from None
    if p.shape != (H, S, A, S):
        raise ModelError(f"model.p: shape {p.shape} != {(H, S, A, S)}")
    if r.shape != (H, S, A):
        raise ModelError(f"model.r: shape {r.shape} != {(H, S, A)}")
    sums = p.sum(axis=-1)
    bad = np.argwhere((np.abs(sums - 1.0) > ROW_TOL) | (p < 0).any(axis=-1))
    if len(bad):
        h, s, a = (int(x) for x in bad[0])
        raise ModelError(f"model.p[{h}][{s}][{a}]: not a probability row (sum {sums[h, s, a]:.6g})")
    bad = np.argwhere((r < 0) | (r > 1))
    if len(bad):
        h, s, a = (int(x) for x in bad[0])
        raise ModelError(f"model.r[{h}][{s}][{a}]: reward {r[h, s, a]:g} out of [0,1]")
    return TabularMdp(p, r)


def load_model(path: str | Path) -> TabularMdp:
    return model_from_dict(json.loads(Path(path).read_text()))
