from __future__ import annotations

import itertools

import numpy as np
import pytest

from hrlab.core import TabularMdp
from hrlab.options import InducedSmdp, OptionSet, OptionSpec


def random_mdp(S: int, A: int, H: int, seed: int) -> TabularMdp:
    rng = np.random.default_rng(seed)
    p = rng.random((H, S, A, S)) + 0.05
    p /= p.sum(axis=-1, keepdims=True)
    r = rng.random((H, S, A))
    return TabularMdp(p, r)


def brute_force_flat(model: TabularMdp, s1: int = 0) -> float:
    """Best start value over every deterministic Markov policy, by explicit enumeration."""
    H, S, A = model.H, model.S, model.A
    best = -np.inf
    for flat in itertools.product(range(A), repeat=H * S):
        pi = np.array(flat).reshape(H, S)
        # forward distribution, independent of the backward evaluator under test
        dist = np.zeros(S)
        dist[s1] = 1.0
        total = 0.0
        for h in range(H):
            a = pi[h]
            total += float(dist @ model.r[h, np.arange(S), a])
            dist = dist @ model.p[h, np.arange(S), a]
        best = max(best, total)
    return best


def random_instance(seed: int, S: int = 2, A: int = 2, H: int = 3, O: int = 2) -> tuple[TabularMdp, OptionSet]:
    rng = np.random.default_rng(seed)
    m = random_mdp(S, A, H, seed)
    opts = []
    for o in range(O):
        init = rng.random((H, S)) < 0.7
        init |= o == 0  # option 0 is always available
        beta = rng.choice([0.0, 0.5, 1.0], size=(H, S))
        H_o = int(rng.integers(1, H + 1))
        opts.append(OptionSpec(f"o{o}", init, beta, rng.integers(0, A, size=(H_o, S)), H_o))
    return m, OptionSet(tuple(opts))


def forward_value(smdp: InducedSmdp, mu: np.ndarray, s1: int = 0) -> float:
    """Value of ``mu`` from ``(s1, 1)`` by pushing decision-point mass forward."""
    H, S = smdp.H, smdp.S
    mass = np.zeros((H + 1, S))
    mass[0, s1] = 1.0
    total = 0.0
    for h in range(H):
        for s in range(S):
            w = mass[h, s]
            if w == 0:
                continue
            o = mu[h, s]
            total += w * smdp.reward[h, s, o]
            mass += w * smdp.kernel[h, s, o]
    return total


def brute_force_high(smdp: InducedSmdp, s1: int = 0) -> float:
    H, S, O = smdp.H, smdp.S, smdp.O
    choices = [[o for o in range(O) if smdp.init[h, s, o]] or [0] for h in range(H) for s in range(S)]
    best = -np.inf
    for combo in itertools.product(*choices):
        best = max(best, forward_value(smdp, np.array(combo).reshape(H, S), s1))
    return best


@pytest.fixture
def small_mdp() -> TabularMdp:
    return random_mdp(3, 2, 3, seed=11)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
