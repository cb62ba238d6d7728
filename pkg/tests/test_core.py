from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_flat, random_mdp
from hrlab.core import (
    ModelError,
    RngStream,
    Segment,
    Step,
    TabularMdp,
    Trajectory,
    evaluate_flat_policy,
    load_model,
    model_from_dict,
    model_to_dict,
    rollout_flat,
    solve_flat_optimal,
    step,
    validate_mdp,
)


def test_validate_uniform_two_state_is_clean():
    p = np.full((2, 2, 1, 2), 0.5)
    assert validate_mdp(TabularMdp(p, np.zeros((2, 2, 1)))) == []


def test_validate_reports_row_sum():
    p = np.full((1, 2, 1, 2), 0.5)
    p[0, 1, 0] = [0.6, 0.6]
    rep = validate_mdp(TabularMdp(p, np.zeros((1, 2, 1))))
    assert len(rep) == 1
    assert "row sum 1.2" in rep[0] and "(h=1, s=1, a=0)" in rep[0]


def test_validate_reports_reward_range():
    p = np.full((1, 2, 1, 2), 0.5)
    r = np.zeros((1, 2, 1))
    r[0, 0, 0] = 1.5
    rep = validate_mdp(TabularMdp(p, r))
    assert any("out of [0,1]" in x for x in rep)


def test_validate_reports_negative_entry():
    p = np.full((1, 2, 1, 2), 0.5)
    p[0, 0, 0] = [1.5, -0.5]
    rep = validate_mdp(TabularMdp(p, np.zeros((1, 2, 1))))
    assert any("negative probability" in x for x in rep)


def test_shape_mismatch_rejected():
    with pytest.raises(ModelError):
        TabularMdp(np.ones((2, 2, 1, 2)) / 2, np.zeros((2, 3, 1)))


def test_step_point_mass():
    p = np.zeros((2, 2, 1, 2))
    p[:, :, 0, 1] = 1.0
    m = TabularMdp(p, np.full((2, 2, 1), 0.25))
    rng = RngStream(3, "t")
    for _ in range(50):
        s2, r = step(m, 0, 0, 1, rng)
        assert s2 == 1 and r == 0.25
    assert rng.draws == 50


def test_step_frequency_within_binomial_band():
    m = TabularMdp(np.full((1, 2, 1, 2), 0.5), np.zeros((1, 2, 1)))
    rng = RngStream(5, "freq")
    n = 100_000
    hits = sum(step(m, 0, 0, 1, rng)[0] == 0 for _ in range(n))
    assert abs(hits / n - 0.5) <= 3 * np.sqrt(0.25 / n)


@pytest.mark.parametrize("h", [0, 3])
def test_step_stage_out_of_range(h):
    m = TabularMdp(np.full((2, 2, 1, 2), 0.5), np.zeros((2, 2, 1)))
    with pytest.raises(IndexError):
        step(m, 0, 0, h, RngStream(1))


def test_evaluate_single_step():
    p = np.full((1, 2, 2, 2), 0.5)
    r = np.zeros((1, 2, 2))
    r[0, :, 1] = 0.3
    V = evaluate_flat_policy(TabularMdp(p, r), np.ones((1, 2), dtype=int))
    assert V[0, 0] == pytest.approx(0.3)
    assert np.all(V[1] == 0)


def test_evaluate_reward_ceiling(small_mdp):
    m = TabularMdp(small_mdp.p, np.ones_like(small_mdp.r))
    V = evaluate_flat_policy(m, np.zeros((m.H, m.S), dtype=int))
    assert np.allclose(V[0], m.H)


def test_evaluate_matches_monte_carlo():
    m = random_mdp(3, 2, 3, seed=2)
    pi = np.array([[0, 1, 0], [1, 1, 0], [0, 0, 1]])
    V = evaluate_flat_policy(m, pi)
    # vectorized rollouts of 10^6 episodes
    n = 1_000_000
    gen = np.random.default_rng(99)
    s = np.zeros(n, dtype=int)
    ret = np.zeros(n)
    for h in range(m.H):
        a = pi[h, s]
        ret += m.r[h, s, a]
        cdf = m.cdf[h, s, a]
        s = np.minimum((gen.random(n)[:, None] > cdf).sum(axis=1), m.S - 1)
    assert abs(ret.mean() - V[0, 0]) <= 3 * ret.std() / np.sqrt(n)


def test_solve_single_action_equals_evaluation(small_mdp):
    m = TabularMdp(small_mdp.p[:, :, :1], small_mdp.r[:, :, :1])
    _, V = solve_flat_optimal(m)
    assert np.allclose(V, evaluate_flat_policy(m, np.zeros((m.H, m.S), dtype=int)))


def test_solve_one_step_bandit():
    p = np.full((1, 2, 2, 2), 0.5)
    r = np.zeros((1, 2, 2))
    r[0, :, 0], r[0, :, 1] = 0.2, 0.9
    pi, V = solve_flat_optimal(TabularMdp(p, r))
    assert pi[0, 0] == 1 and V[0, 0] == pytest.approx(0.9)


def test_solve_ties_lowest_action():
    p = np.full((1, 1, 3, 1), 1.0)
    pi, _ = solve_flat_optimal(TabularMdp(p, np.full((1, 1, 3), 0.5)))
    assert pi[0, 0] == 0


def test_solve_matches_brute_force_enumeration():
    m = random_mdp(3, 2, 3, seed=4)
    _, V = solve_flat_optimal(m)
    assert V[0, 0] == pytest.approx(brute_force_flat(m, 0), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), S=st.integers(1, 4), A=st.integers(1, 3), H=st.integers(1, 4))
def test_optimal_dominates_any_policy(seed, S, A, H):
    m = random_mdp(S, A, H, seed)
    _, Vs = solve_flat_optimal(m)
    pi = np.random.default_rng(seed).integers(0, A, size=(H, S))
    assert np.all(Vs >= evaluate_flat_policy(m, pi) - 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), S=st.integers(1, 5), A=st.integers(1, 3), H=st.integers(1, 5))
def test_random_models_pass_validation(seed, S, A, H):
    assert validate_mdp(random_mdp(S, A, H, seed)) == []


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**63), name=st.text(max_size=12))
def test_rng_stream_reproducible(seed, name):
    a, b = RngStream(seed, name), RngStream(seed, name)
    xs = [a.uniform() for _ in range(300)]
    ys = [b.uniform() for _ in range(300)]
    assert xs == ys and a.draws == 300


def test_rng_streams_differ_by_name():
    assert RngStream(1, "a").uniform() != RngStream(1, "b").uniform()


def test_rollout_reproducible_byte_for_byte(small_mdp):
    pi = np.zeros((small_mdp.H, small_mdp.S), dtype=int)
    t1 = rollout_flat(small_mdp, pi, 0, RngStream(7, "env"))
    t2 = rollout_flat(small_mdp, pi, 0, RngStream(7, "env"))
    assert t1.to_json() == t2.to_json()
    assert len(t1.steps) == small_mdp.H


def test_trajectory_check_detects_bad_partition():
    steps = [Step(0, 0, 0.5, 1, 1), Step(1, 0, 0.25, 0, 2)]
    good = Trajectory(1, steps, [Segment(0, 0, 1, 0, 3, 0.75)])
    assert good.check(2) == []
    bad = Trajectory(1, steps, [Segment(0, 0, 1, 1, 2, 0.9), Segment(1, 0, 2, 0, 3, 0.25)])
    assert any("reward mismatch" in e for e in bad.check(2))


def test_model_json_roundtrip(tmp_path, small_mdp):
    path = tmp_path / "m.json"
    path.write_text(json.dumps(model_to_dict(small_mdp)))
    m2 = load_model(path)
    assert m2.digest() == small_mdp.digest()


def test_model_from_dict_names_path():
    doc = model_to_dict(random_mdp(2, 1, 1, 0))
    doc["p"][0][1][0] = [0.9, 0.9]
    with pytest.raises(ModelError, match=r"model\.p\[0\]\[1\]\[0\]"):
        model_from_dict(doc)
    doc = model_to_dict(random_mdp(2, 1, 1, 0))
    doc["r"][0][0][0] = 2.0
    with pytest.raises(ModelError, match="out of"):
        model_from_dict(doc)
