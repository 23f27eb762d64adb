import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gbetd.errors import ConfigError, StructureError
from gbetd.schemes import (CompositeScheme, check_condition3, constant_lambda, custom_scheme,
                           lambda_kernel, retrace_scheme, scaling_scheme,
                           truncated_retrace_scheme)
from gbetd.traces import compute_traces, sample_states

vectors = arrays(np.float64, 3, elements=st.floats(-1e3, 1e3))
ratios = st.floats(0.0, 10.0)
discounts = st.floats(0.0, 1.0)


def test_constant_lambda_traces(toy):
    mdp, feats = toy
    states = sample_states(mdp, 300, seed=1)
    tr, _, _ = compute_traces(mdp, feats, constant_lambda(0.0), states)
    np.testing.assert_array_equal(tr[0], 0.0)
    np.testing.assert_array_equal(tr[1:], feats.phi[states[1:]])
    rho = mdp.ratio_matrix()
    tr1, _, _ = compute_traces(mdp, feats, constant_lambda(1.0), states)
    for t in range(1, states.size):
        want = 0.9 * rho[states[t - 1], states[t]] * tr1[t - 1] + feats.phi[states[t]]
        np.testing.assert_allclose(tr1[t], want, rtol=1e-12, atol=1e-12)


def test_constant_half_matches_straight_line_reference(toy, backend):
    mdp, feats = toy
    states = sample_states(mdp, 2000, seed=5)
    got, lams, _ = compute_traces(mdp, feats, constant_lambda(0.5), states)
    e = np.zeros(5)
    for t in range(1, states.size):
        s, s2 = states[t - 1], states[t]
        r = mdp.p_target[s, s2] / mdp.p_behavior[s, s2]
        e = 0.5 * 0.9 * r * e + feats.phi[s2]
        np.testing.assert_allclose(got[t], e, rtol=1e-12, atol=1e-12)
    assert np.all(lams[1:] == 0.5)


def test_constant_range():
    with pytest.raises(ConfigError):
        constant_lambda(1.5)
    with pytest.raises(ConfigError):
        constant_lambda(-0.1)


def test_scaling_examples():
    sch = scaling_scheme(5.0)
    e = np.array([4.0, 3.0])
    lam = sch.lambda_value(0, e, 0.9, 1.6)
    assert lam == pytest.approx(5.0 / 7.2)
    np.testing.assert_allclose(lam * 0.9 * 1.6 * e, [4.0, 3.0], rtol=1e-14)
    assert sch.lambda_value(0, e * 0.1, 0.9, 1.6) == 1.0
    assert scaling_scheme(5.0, beta=0.7).lambda_value(0, e * 0.1, 0.9, 1.6) == 0.7
    with pytest.raises(ConfigError):
        scaling_scheme(-1.0)


def test_scaling_zero_equals_td0(toy, backend):
    mdp, feats = toy
    states = sample_states(mdp, 3000, seed=2)
    a, _, _ = compute_traces(mdp, feats, scaling_scheme(0.0), states)
    b, _, _ = compute_traces(mdp, feats, constant_lambda(0.0), states)
    np.testing.assert_array_equal(a, b)


def test_scaling_per_pair_thresholds(toy):
    mdp, _ = toy
    n = mdp.n_states
    thr = np.full((n, n), 50.0)
    thr[2, 3] = 1.0
    sch = scaling_scheme(thr)
    e = np.ones(5) * 10
    assert sch.lambda_value(2 * n + 3, e, 0.9, 1.6, n) < 1.0
    assert sch.lambda_value(3 * n + 4, e, 0.9, 1.6, n) == 1.0
    with pytest.raises(StructureError):
        scaling_scheme(np.ones((3, 3))).threshold_matrix(n)


@settings(max_examples=200, deadline=None)
@given(vectors, discounts, ratios, st.floats(0.0, 100.0), st.floats(0.0, 1.0))
def test_scaling_caps_pre_trace(e, g, r, c, beta):
    lam = scaling_scheme(c, beta).lambda_value(0, e, g, r)
    pre = np.linalg.norm(g * r * lam * e)
    assert 0.0 <= lam <= 1.0
    assert pre <= beta * c * (1 + 1e-12) + 1e-12
    if g * r * np.linalg.norm(e) > c and beta == 1.0:
        assert pre == pytest.approx(c, rel=1e-12, abs=1e-12)


def test_retrace_examples():
    sch = retrace_scheme()
    assert sch.lambda_value(0, np.ones(2), 0.9, 1.6) == pytest.approx(0.625)
    assert retrace_scheme(0.8).lambda_value(0, np.ones(2), 0.9, 0.4) == pytest.approx(0.8)
    assert sch.lambda_value(0, np.ones(2), 0.9, 0.0) == 0.0
    with pytest.raises(ConfigError):
        retrace_scheme(0.0)


@settings(max_examples=200, deadline=None)
@given(ratios, st.floats(0.01, 1.0))
def test_retrace_conservative(r, beta):
    lam = retrace_scheme(beta).lambda_value(0, np.ones(2), 0.9, r)
    assert 0.0 <= lam <= 1.0
    assert lam * r <= beta * (1 + 1e-12)


def test_retrace_matches_truncated_ratio_recursion(toy, backend):
    mdp, feats = toy
    states = sample_states(mdp, 2000, seed=8)
    got, _, _ = compute_traces(mdp, feats, retrace_scheme(0.9), states)
    rho = mdp.ratio_matrix()
    e = np.zeros(5)
    for t in range(1, states.size):
        e = 0.9 * 0.9 * min(1.0, rho[states[t - 1], states[t]]) * e + feats.phi[states[t]]
        np.testing.assert_allclose(got[t], e, rtol=1e-12, atol=1e-12)


def test_truncated_retrace_examples():
    e = np.array([0.1, 0.0])
    assert truncated_retrace_scheme(1.0, 100.0, 0.9).lambda_value(0, e, 0.9, 1.6) == \
        pytest.approx(retrace_scheme(0.9).lambda_value(0, e, 0.9, 1.6))
    sch = truncated_retrace_scheme(2.0, 100.0, 0.8)
    lam = sch.lambda_value(0, e, 0.9, 3.0)
    assert lam * 0.9 * 3.0 == pytest.approx(0.8 * 0.9 * 2.0)
    for bad in ((0.5, 1.0), (2.0, 0.0)):
        with pytest.raises(ConfigError):
            truncated_retrace_scheme(*bad)


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, discounts, ratios, st.floats(0.1, 1.0))
def test_truncated_retrace_lipschitz(e1, e2, g, r, beta):
    sch = truncated_retrace_scheme(2.0, 10.0, beta)
    l1 = sch.lambda_value(0, e1, g, r)
    l2 = sch.lambda_value(0, e2, g, r)
    assert np.linalg.norm(l1 * e1 - l2 * e2) <= beta * np.linalg.norm(e1 - e2) * (1 + 1e-9) \
        + 1e-9


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 3), st.floats(0, 1), st.floats(0.01, 1), st.floats(1, 5),
       st.floats(0, 100), discounts, ratios, st.floats(0, 1e6))
def test_kernel_range(kind, lam, beta, k, c, g, r, norm):
    assert 0.0 <= lambda_kernel(kind, lam, beta, k, c, g, r, norm) <= 1.0


def test_memory_replay(toy):
    mdp, _ = toy
    n = mdp.n_states
    states = sample_states(mdp, 500, seed=4)
    sch = scaling_scheme(5.0)
    ys = sch.memory_path(states, n)
    y = sch.memory_init(int(states[0]), n)
    assert ys[0] == y
    for t in range(1, states.size):
        y = sch.memory_step(y, int(states[t]), n)
        assert ys[t] == y == states[t - 1] * n + states[t]
    np.testing.assert_array_equal(constant_lambda(0.3).memory_path(states, n), 0)


def test_condition3_scaling_passes(toy):
    mdp, feats = toy
    for c in (0.5, 5.0, 50.0):
        rep = check_condition3(scaling_scheme(c), mdp, samples=2000, seed=1, features=feats)
        assert rep.passed, rep.notes
        assert rep.max_lipschitz_ratio <= 1 + 1e-9


def test_condition3_td1_fails_bounded_product(toy):
    mdp, feats = toy
    rep = check_condition3(constant_lambda(1.0), mdp, samples=500, seed=1, features=feats)
    assert rep.lipschitz_ok
    assert not rep.bound_ok and not rep.passed
    # two consecutive forward moves: (gamma * rho)^2 = (0.9 * 1.6)^2 > 1
    assert rep.max_gain ** 2 == pytest.approx((0.9 * 1.6) ** 2)
    assert rep.max_gain ** 2 > 1


def test_condition3_small_constant_passes(toy):
    mdp, feats = toy
    rep = check_condition3(constant_lambda(0.5), mdp, samples=500, seed=1, features=feats)
    assert rep.passed, rep.notes


def test_condition3_flags_out_of_range():
    from gbetd.environments import build_two_state
    sch = custom_scheme(lambda y, e, g, r: 2.0, bound=lambda y: 1.0)
    rep = check_condition3(sch, build_two_state(), samples=50)
    assert not rep.lambda_in_range and not rep.passed


def test_condition3_sample_count():
    from gbetd.environments import build_two_state
    with pytest.raises(ConfigError):
        check_condition3(constant_lambda(0.5), build_two_state(), samples=0)


def test_composite_validation():
    sch = CompositeScheme([constant_lambda(0.0), constant_lambda(1.0)], [0, 1, 1])
    assert sch.n_blocks == 2
    assert [m.tolist() for m in sch.block_masks()] == [[True, False, False], [False, True, True]]
    with pytest.raises(StructureError):
        CompositeScheme([constant_lambda(0.0)], [0, 1])


def test_describe():
    assert scaling_scheme(50.0).describe() == "scaling(C=50, beta=1)"
    assert "retrace" in retrace_scheme().describe()
    assert math.isinf(retrace_scheme().trace_bound(0, 3))
    assert scaling_scheme(5.0, 0.5).trace_bound(0, 3) == 2.5
