import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calpref.errors import DegenerateSet, EmptyReference, NonPositiveScore, ShapeMismatch, UnknownPrompt
from calpref.reward import (BT, AnalyticReward, CandidateSet, RewardKind, calibrate, calibrate_column,
                            expected_winrate_mc, pairwise_winrate, synth_rewards, win_matrix)
from calpref.toy import conflicting_rewards

import oracles

PR1 = RewardKind("power_ratio", 1.0)

finite = st.floats(-50, 50, allow_nan=False)
score_cols = arrays(np.float64, st.integers(2, 40), elements=finite)


def cset(scores, kinds=None, prompt="p"):
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    l = scores.shape[1]
    return CandidateSet(prompt, list(range(len(scores))), scores, [f"r{j}" for j in range(l)], kinds or [BT] * l)


def test_pairwise_examples():
    assert pairwise_winrate(0.7, 0.7) == 0.5
    assert pairwise_winrate(3.0, 1.0, PR1) == pytest.approx(0.75, abs=1e-15)
    assert pairwise_winrate(2.0, 0.0) == pytest.approx(0.8807970779778823, abs=1e-15)
    assert pairwise_winrate(2.0, 0.0) == pytest.approx(oracles.sigmoid(2.0), abs=1e-15)


def test_power_ratio_temperature():
    assert pairwise_winrate(3.0, 1.0, RewardKind("power_ratio", 2.0)) == pytest.approx(0.9, abs=1e-15)


def test_power_ratio_rejects_nonpositive():
    with pytest.raises(NonPositiveScore):
        pairwise_winrate(1.0, 0.0, PR1)
    with pytest.raises(NonPositiveScore):
        calibrate(cset([1.0, -2.0, 3.0], [PR1]))


def test_bounded_score_treated_as_logit():
    assert pairwise_winrate(7.0, 5.0, "bounded_score") == pairwise_winrate(7.0, 5.0, BT)


@given(finite, finite)
def test_pairwise_complement_exact(a, b):
    assert pairwise_winrate(a, b) + pairwise_winrate(b, a) == 1.0


@given(score_cols)
def test_win_matrix_antisymmetric(col):
    w = win_matrix(col)
    off = ~np.eye(len(col), dtype=bool)
    assert np.all((w + w.T)[off] == 1.0)


def test_calibrate_examples():
    c = calibrate(cset([0.3, 0.3]))
    assert np.all(c.calibrated == 0.5)
    c = calibrate(cset([0.0, 0.0, 0.0]))
    assert np.all(c.calibrated == 0.5)
    col = [1.0, 0.5, 0.0, -1.0]
    np.testing.assert_allclose(calibrate_column(col), oracles.brute_calibrate(col), atol=1e-12, rtol=0)


def test_calibrate_degenerate():
    with pytest.raises(DegenerateSet) as exc:
        calibrate(cset([1.0], prompt="lonely"))
    assert exc.value.prompt_id == "lonely"
    assert "lonely" in str(exc.value)


def test_candidate_set_validation():
    with pytest.raises(ShapeMismatch):
        CandidateSet("p", [0, 1], np.zeros((3, 1)), ["a"], [BT])
    with pytest.raises(ShapeMismatch):
        CandidateSet("p", [0, 1], np.zeros((2, 2)), ["a"], [BT])
    with pytest.raises(ValueError):
        CandidateSet("p", [0, 1], np.array([[0.0], [np.inf]]), ["a"], [BT])


@settings(max_examples=150)
@given(score_cols)
def test_column_mean_and_bruteforce(col):
    cal = calibrate_column(col)
    assert abs(cal.mean() - 0.5) <= 1e-12
    np.testing.assert_allclose(cal, oracles.brute_calibrate(list(col)), atol=1e-12, rtol=0)


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0.01, 100)), st.floats(0.2, 4))
def test_power_ratio_matches_bruteforce(col, alpha):
    cal = calibrate_column(col, RewardKind("power_ratio", alpha))
    np.testing.assert_allclose(cal, oracles.brute_calibrate(list(col), "power_ratio", alpha), atol=1e-12, rtol=0)


@given(score_cols)
def test_order_preserved_ties_kept(col):
    # strictness can be lost to float saturation for huge or tiny gaps; it is
    # checked on well-separated scores below
    cal = calibrate_column(col)
    order = np.argsort(col, kind="stable")
    assert np.all(np.diff(cal[order]) >= 0)
    for i in range(len(col)):
        assert np.all(cal[col == col[i]] == cal[i])


def test_strict_monotone_moderate_gaps():
    rng = np.random.default_rng(3)
    for _ in range(50):
        col = rng.normal(size=20)
        cal = calibrate_column(col)
        assert np.all(np.diff(cal[np.argsort(col)]) > 0)


@given(score_cols, st.floats(-100, 100))
def test_shift_invariance(col, c):
    np.testing.assert_allclose(calibrate_column(col + c), calibrate_column(col), atol=1e-12, rtol=0)


def test_ensemble_uniform_and_weighted():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(12, 3))
    c = calibrate(cset(s))
    np.testing.assert_allclose(c.ensemble, c.calibrated.mean(axis=1), atol=1e-15)
    cw = calibrate(cset(s), weights=[2.0, 1.0, 1.0])
    np.testing.assert_allclose(cw.ensemble, c.calibrated @ np.array([0.5, 0.25, 0.25]), atol=1e-15)
    with pytest.raises(ValueError):
        calibrate(cset(s), weights=[1.0, -1.0, 1.0])


def test_calibration_is_per_prompt():
    rng = np.random.default_rng(1)
    sets = [cset(rng.normal(size=(8, 2)), prompt=f"p{i}") for i in range(5)]
    a = [calibrate(s).calibrated for s in sets]
    b = [calibrate(s).calibrated for s in reversed(sets)][::-1]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_expected_winrate_mc_examples():
    assert expected_winrate_mc(2.0, [2.0, 2.0, 2.0]) == 0.5
    assert expected_winrate_mc(1.3, [0.2]) == pairwise_winrate(1.3, 0.2)
    with pytest.raises(EmptyReference):
        expected_winrate_mc(1.0, [])
    z = np.random.default_rng(0).standard_normal(100000)
    assert abs(expected_winrate_mc(1.0, z) - oracles.quad_expected_bt_winrate(1.0)) < 0.02


def test_synthetic_rewards_examples():
    bench = conflicting_rewards()
    p = bench.prompts[0]
    target = bench.rewards.targets[p]
    assert synth_rewards(bench.rewards, target, p)[0] == 0.0
    d = AnalyticReward("d", "direction", direction=(1.0, 0.0))
    assert d(np.zeros(2), None)[0] == 0.0
    with pytest.raises(UnknownPrompt):
        bench.rewards.score(np.zeros((1, 2)), "nope")


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_rewards_conflict_at_probe():
    bench = conflicting_rewards()
    for p in bench.prompts:
        x = bench.conflict_probe(p)
        tgt = bench.rewards.targets[p]
        g = [_fd_grad(lambda v, r=r: float(r(v[None], tgt)[0]), x) for r in bench.rewards.rewards]
        assert np.dot(g[0], g[1]) < 0


@pytest.mark.parametrize("form", ["mode_distance", "direction", "norm_penalty", "mode_likelihood"])
def test_analytic_grad(form):
    r = AnalyticReward("r", form, scale=1.7, direction=(0.6, -0.8) if form == "direction" else None)
    tgt = np.array([0.4, -1.1])
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.normal(size=2)
        np.testing.assert_allclose(r.grad(x, tgt), _fd_grad(lambda v: float(r(v[None], tgt)[0]), x), rtol=1e-6, atol=1e-9)


def test_rewards_deterministic_finite():
    bench = conflicting_rewards()
    x = np.random.default_rng(0).normal(size=(50, 2)) * 3
    s1 = bench.rewards.score(x, "p03")
    s2 = bench.rewards.score(x, "p03")
    assert np.array_equal(s1, s2) and np.all(np.isfinite(s1))
