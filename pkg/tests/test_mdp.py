import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gbetd.environments import build_two_state
from gbetd.errors import ConditionError, StructureError
from gbetd.mdp import (FeatureMap, TabularMdp, behavior_stationary_dist, importance_ratio,
                       is_irreducible, load_mdp, rollout_value_estimate, save_mdp,
                       spectral_radius, spectral_radius_nonneg, validate, value_function)
from gbetd.traces import sample_states


def random_mdp(rng, n, gamma=0.9):
    po = rng.random((n, n)) + 0.05
    po /= po.sum(axis=1, keepdims=True)
    p = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
    p[np.arange(n), rng.integers(0, n, n)] += 0.1
    p /= p.sum(axis=1, keepdims=True)
    return TabularMdp(p, po, rng.standard_normal((n, n)), np.full(n, gamma))


def test_toy_validates(toy):
    rep = validate(toy[0])
    assert rep.passed, rep.messages
    assert toy[0].n_states == 21


def test_zero_discount_on_policy_passes():
    p = np.array([[0.5, 0.5], [0.3, 0.7]])
    rep = validate(TabularMdp(p, p, np.zeros((2, 2)), np.zeros(2)))
    assert rep.row_stochastic and rep.absolutely_continuous and rep.discounted
    assert rep.spectral_radius == 0.0


def test_absolute_continuity_failure():
    p = np.array([[0.5, 0.5], [0.5, 0.5]])
    po = np.array([[1.0, 0.0], [0.5, 0.5]])
    mdp = TabularMdp(p, po, np.zeros((2, 2)), np.full(2, 0.9))
    assert not validate(mdp).absolutely_continuous
    with pytest.raises(ConditionError):
        importance_ratio(mdp, 0, 1)


def test_row_sum_and_reducibility_failures():
    p = np.array([[0.5, 0.4], [0.5, 0.5]])
    assert not validate(TabularMdp(p, p, np.zeros((2, 2)), np.full(2, 0.5))).row_stochastic
    eye = np.eye(2)
    rep = validate(TabularMdp(eye, eye, np.zeros((2, 2)), np.full(2, 0.5)))
    assert not rep.irreducible
    with pytest.raises(ConditionError):
        behavior_stationary_dist(TabularMdp(eye, eye, np.zeros((2, 2)), np.full(2, 0.5)))


def test_undiscounted_recurrent_chain_fails_spectral_check():
    p = np.array([[0.0, 1.0], [1.0, 0.0]])
    rep = validate(TabularMdp(p, p, np.zeros((2, 2)), np.ones(2)))
    assert not rep.discounted
    assert rep.spectral_radius == pytest.approx(1.0)


def test_dimension_mismatch_is_structural():
    with pytest.raises(StructureError):
        TabularMdp(np.eye(2), np.eye(3), np.zeros((2, 2)), np.ones(2))


def test_importance_ratio_examples(toy):
    mdp = toy[0]
    assert importance_ratio(mdp, 2, 3) == pytest.approx(1.6)
    assert importance_ratio(mdp, 3, 2) == pytest.approx(0.4)
    p = np.array([[0.5, 0.5], [1.0, 0.0]])
    on = TabularMdp(p, p, np.zeros((2, 2)), np.full(2, 0.9))
    assert importance_ratio(on, 0, 1) == 1.0
    assert importance_ratio(on, 1, 1) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_change_of_measure_identity(n, seed):
    mdp = random_mdp(np.random.default_rng(seed), n)
    rho = mdp.ratio_matrix()
    np.testing.assert_allclose((mdp.p_behavior * rho).sum(axis=1), 1.0, atol=1e-12)


def test_value_function_examples(toy):
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    r = np.array([[1.0, 2.0], [3.0, -1.0]])
    myopic = TabularMdp(p, p, r, np.zeros(2))
    np.testing.assert_allclose(value_function(myopic), myopic.expected_reward)
    np.testing.assert_array_equal(value_function(build_two_state()), 0.0)
    mdp = toy[0]
    v = value_function(mdp)
    assert np.max(np.abs(v - mdp.expected_reward - mdp.p_gamma @ v)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10_000), st.floats(0.0, 0.99))
def test_value_function_residual(n, seed, gamma):
    mdp = random_mdp(np.random.default_rng(seed), n, gamma)
    v = value_function(mdp)
    assert np.max(np.abs(v - mdp.expected_reward - mdp.p_gamma @ v)) < 1e-10


def test_value_function_matches_rollouts(toy):
    mdp = toy[0]
    v = value_function(mdp)
    # 0.9**300 ~ 2e-14: truncation bias is negligible
    mean, se = rollout_value_estimate(mdp, 20_000, 300, seed=3)
    assert np.all(np.abs(mean - v) <= 3.5 * se + 1e-12)


def test_stationary_examples(toy):
    p = np.array([[0.2, 0.3, 0.5], [0.5, 0.2, 0.3], [0.3, 0.5, 0.2]])
    mdp = TabularMdp(p, p, np.zeros((3, 3)), np.full(3, 0.9))
    np.testing.assert_allclose(behavior_stationary_dist(mdp), 1 / 3, atol=1e-12)
    np.testing.assert_allclose(behavior_stationary_dist(build_two_state()), [0.5, 0.5])
    zeta = behavior_stationary_dist(toy[0])
    states = sample_states(toy[0], 1_000_000, seed=11)
    freq = np.bincount(states, minlength=21) / states.size
    assert 0.5 * np.abs(freq - zeta).sum() < 1e-2


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_stationary_fixed_point(n, seed):
    mdp = random_mdp(np.random.default_rng(seed), n)
    zeta = behavior_stationary_dist(mdp)
    assert np.all(zeta > 0)
    assert abs(zeta.sum() - 1) < 1e-12
    np.testing.assert_allclose(zeta @ mdp.p_behavior, zeta, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
def test_power_iteration_matches_eigensolver(a):
    assert spectral_radius_nonneg(a) == pytest.approx(spectral_radius(a), rel=1e-6, abs=1e-9)


def test_irreducibility():
    assert is_irreducible(np.array([[0, 1], [1, 0]]))
    assert not is_irreducible(np.array([[1, 0], [1, 0]]))


def test_features():
    f = FeatureMap(np.array([[3.0, 1.0], [1.0, 1.0]]))
    assert f.full_column_rank and f.n_features == 2
    assert not FeatureMap(np.array([[1.0, 2.0], [2.0, 4.0]])).full_column_rank
    with pytest.raises(StructureError):
        FeatureMap(np.array([[np.nan]]))


def test_mdp_file_roundtrip(tmp_path, toy):
    mdp, feats = toy
    path = tmp_path / "toy.mdp"
    save_mdp(path, mdp, feats)
    m2, f2 = load_mdp(path)
    for key in ("p_target", "p_behavior", "reward", "discount"):
        np.testing.assert_array_equal(getattr(m2, key), getattr(mdp, key))
    np.testing.assert_array_equal(f2.phi, feats.phi)


def test_bundled_files_match_fixtures(toy):
    from importlib.resources import files
    m, f = load_mdp(files("gbetd") / "data" / "toy.mdp")
    np.testing.assert_array_equal(m.p_behavior, toy[0].p_behavior)
    np.testing.assert_array_equal(f.phi, toy[1].phi)
    m2, f2 = load_mdp(files("gbetd") / "data" / "two_state.mdp")
    np.testing.assert_array_equal(m2.p_target, build_two_state().p_target)
    assert f2.n_features == 2


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.mdp"
    path.write_text("n_states 2\np_target\n1 0\n")
    with pytest.raises(StructureError):
        load_mdp(path)
