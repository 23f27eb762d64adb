import numpy as np
import pytest

from gbetd.bellman import (BellmanOperator, composite_operator, counterexample_suite,
                           default_horizon, exact_operator_state_dependent, kappa_bound,
                           kappa_tightness, mc_operator_history_dependent, one_step_operator,
                           projected_coefficients, projected_solution, td_lambda_solution,
                           verify_theorem2, verify_theorem3, weighted_norm,
                           weighted_projection)
from gbetd.environments import build_two_state
from gbetd.errors import ConditionError, ConfigError, StructureError
from gbetd.mdp import FeatureMap, TabularMdp, behavior_stationary_dist, value_function
from gbetd.schemes import (CompositeScheme, constant_lambda, custom_scheme, retrace_scheme,
                           scaling_scheme)

GRID = [k / 10 for k in range(11)]


def two_state_fixture():
    return build_two_state(), FeatureMap(np.array([[3.0, 1.0], [1.0, 1.0]]))


def test_exact_operator_limits(toy):
    mdp, _ = toy
    op0 = exact_operator_state_dependent(mdp, 0.0)
    np.testing.assert_allclose(op0.p_tilde, mdp.p_gamma, atol=1e-15)
    np.testing.assert_allclose(op0.r_tilde, mdp.expected_reward, atol=1e-15)
    op1 = exact_operator_state_dependent(mdp, 1.0)
    np.testing.assert_array_equal(op1.p_tilde, 0.0)
    np.testing.assert_allclose(op1.r_tilde, value_function(mdp), atol=1e-12)
    two = exact_operator_state_dependent(build_two_state(0.95), [0.0, 1.0])
    np.testing.assert_allclose(two.p_tilde, [[0.9025, 0.0], [0.95, 0.0]], atol=1e-15)
    with pytest.raises(ConfigError):
        exact_operator_state_dependent(mdp, 1.2)


@pytest.mark.parametrize("name", ["toy", "two_state"])
def test_theorem3_suite(toy, name):
    mdp = toy[0] if name == "toy" else build_two_state()
    v = value_function(mdp)
    rng = np.random.default_rng(0)
    lams = [np.full(mdp.n_states, g) for g in GRID]
    lams += [rng.choice(GRID, mdp.n_states) for _ in range(20)]
    for lam in lams:
        rep = verify_theorem3(exact_operator_state_dependent(mdp, lam), mdp, v)
        assert rep.spectral_radius < 1
        assert rep.max_row_sum <= 1 + 1e-9
        assert rep.fixed_point_residual < 1e-9
        assert rep.passed, rep.rows()


def test_theorem3_reports(toy):
    mdp, _ = toy
    assert verify_theorem3(one_step_operator(mdp), mdp).passed
    two = build_two_state()
    rep = verify_theorem3(exact_operator_state_dependent(two, [0.0, 1.0]), two)
    assert rep.spectral_radius == pytest.approx(0.9025)
    assert np.all(rep.weight_vector > 0)
    bad = BellmanOperator(np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros(2))
    rep = verify_theorem3(bad, two)
    assert not rep.contraction and not rep.passed


def test_exact_operator_continuous_in_lambda(toy):
    mdp, _ = toy
    rng = np.random.default_rng(1)
    lam = rng.random(mdp.n_states)
    a = exact_operator_state_dependent(mdp, lam)
    b = exact_operator_state_dependent(mdp, lam + 1e-8 * rng.random(mdp.n_states))
    assert np.abs(a.p_tilde - b.p_tilde).max() < 1e-6
    assert np.abs(a.r_tilde - b.r_tilde).max() < 1e-6


def mc_close(op, ref, k=4.0):
    """Entrywise agreement within ``k`` standard errors (exact zeros must match)."""
    ok_p = np.abs(op.p_tilde - ref.p_tilde) <= k * op.se_p + 1e-12
    ok_r = np.abs(op.r_tilde - ref.r_tilde) <= k * op.se_r + 1e-12
    return bool(ok_p.all() and ok_r.all())


def test_mc_constant_matches_closed_form(toy, backend):
    mdp, feats = toy
    op = mc_operator_history_dependent(mdp, feats, constant_lambda(0.5), warmup=20_000,
                                       samples=3000, seed=2)
    ref = exact_operator_state_dependent(mdp, 0.5)
    assert op.horizon == 175
    assert op.cap_mass < 1e-8
    assert mc_close(op, ref)


def test_mc_backends_agree(toy):
    from gbetd import _accel
    mdp, feats = toy
    res = {}
    for b in ("numba", "numpy"):
        prev = _accel.set_backend(b)
        try:
            res[b] = mc_operator_history_dependent(mdp, feats, scaling_scheme(5.0),
                                                   warmup=5000, samples=300, seed=1)
        finally:
            _accel.set_backend(prev)
    np.testing.assert_allclose(res["numba"].p_tilde, res["numpy"].p_tilde, atol=1e-12)
    np.testing.assert_allclose(res["numba"].r_tilde, res["numpy"].r_tilde, atol=1e-12)


def test_mc_state_dependent_lambda_matches_closed_form(toy):
    mdp, feats = toy
    n = mdp.n_states
    rng = np.random.default_rng(7)
    for lam in (np.full(n, 0.2), rng.uniform(0.0, 0.9, n), np.where(np.arange(n) % 2, 0.9, 0.1)):
        sch = custom_scheme(lambda y, e, g, r, lam=lam: lam[y % n], memory="pair")
        op = mc_operator_history_dependent(mdp, feats, sch, warmup=5000, samples=300,
                                           horizon_cap=80, seed=3, states=[0, 2, 3, 6, 20])
        ref = exact_operator_state_dependent(mdp, lam)
        for s in (0, 2, 3, 6, 20):
            assert np.all(np.abs(op.p_tilde[s] - ref.p_tilde[s]) <= 4 * op.se_p[s] + 1e-6)
            assert abs(op.r_tilde[s] - ref.r_tilde[s]) <= 4 * op.se_r[s] + 1e-6


def test_mc_huge_threshold_is_constant_beta(toy):
    mdp, feats = toy
    op = mc_operator_history_dependent(mdp, feats, scaling_scheme(1e12, beta=0.6),
                                       warmup=10_000, samples=2000, seed=4)
    assert mc_close(op, exact_operator_state_dependent(mdp, 0.6))


def test_mc_scaling_fixed_point(toy):
    mdp, feats = toy
    op = mc_operator_history_dependent(mdp, feats, scaling_scheme(50.0), warmup=20_000,
                                       samples=2000, seed=5)
    rep = verify_theorem3(op, mdp)
    assert rep.fixed_point_ok and rep.contraction and rep.substochastic


def test_mc_sampled_estimator_agrees(toy):
    mdp, feats = toy
    w = mc_operator_history_dependent(mdp, feats, retrace_scheme(), warmup=10_000,
                                      samples=2000, seed=6, states=[0, 3])
    s = mc_operator_history_dependent(mdp, feats, retrace_scheme(), warmup=10_000,
                                      samples=4000, seed=6, states=[0, 3],
                                      estimator="sampled")
    for st in (0, 3):
        se = np.sqrt(w.se_r[st] ** 2 + s.se_r[st] ** 2)
        assert abs(w.r_tilde[st] - s.r_tilde[st]) <= 4 * se
    with pytest.raises(ConfigError):
        mc_operator_history_dependent(mdp, feats, retrace_scheme(), estimator="bogus")


def test_mc_unvisited_state(toy):
    mdp, feats = toy
    with pytest.raises(ConditionError):
        mc_operator_history_dependent(mdp, feats, constant_lambda(0.5), warmup=5, samples=10,
                                      burn_in=0)


def test_default_horizon(toy):
    assert default_horizon(toy[0]) == 175
    p = np.array([[0.0, 1.0], [1.0, 0.0]])
    und = TabularMdp(p, p, np.zeros((2, 2)), np.array([1.0, 0.5]))
    with pytest.raises(ConfigError):
        default_horizon(und)
    assert default_horizon(und, fallback=500) == 500


def test_composite_operator(toy):
    mdp, _ = toy
    n = mdp.n_states
    a = exact_operator_state_dependent(mdp, 0.0)
    b = exact_operator_state_dependent(mdp, 1.0)
    same = composite_operator([a, a], np.arange(n) % 2)
    np.testing.assert_array_equal(same.p_tilde, a.p_tilde)
    part = (np.arange(n) >= 11).astype(int)
    comp = composite_operator([a, b], part)
    v = value_function(mdp)
    np.testing.assert_array_equal(comp.p_tilde[part == 1], 0.0)
    np.testing.assert_allclose(comp.r_tilde[part == 1], v[part == 1], atol=1e-12)
    rep = verify_theorem3(comp, mdp, v)
    assert rep.passed
    swapped = composite_operator([b, a], 1 - part)
    np.testing.assert_array_equal(swapped.p_tilde, comp.p_tilde)
    again = composite_operator([comp, comp], part)
    np.testing.assert_array_equal(again.p_tilde, comp.p_tilde)
    with pytest.raises(StructureError):
        composite_operator([a], np.zeros(3, dtype=int))


def test_projected_solution_paths(toy):
    mdp, feats = toy
    zeta = behavior_stationary_dist(mdp)
    v = value_function(mdp)
    errs = []
    for lam in GRID:
        op = exact_operator_state_dependent(mdp, lam)
        sol = projected_solution(op, feats, zeta, v)
        assert sol.path_gap < 1e-9
        errs.append(np.sqrt(zeta @ (sol.v_td - v) ** 2))
    assert np.all(np.diff(errs) < 0)
    one = projected_solution(exact_operator_state_dependent(mdp, 1.0), feats, zeta, v)
    np.testing.assert_allclose(one.v_td, weighted_projection(feats, zeta) @ v, atol=1e-12)


def test_projected_solution_representable(toy):
    mdp, feats = toy
    v = value_function(mdp)
    f2 = FeatureMap(np.column_stack([feats.phi[:, :4], v]))
    zeta = behavior_stationary_dist(mdp)
    sol = projected_solution(exact_operator_state_dependent(mdp, 0.3), f2, zeta, v)
    np.testing.assert_allclose(sol.v_td, v, atol=1e-10)
    with pytest.raises(ConditionError):
        projected_solution(one_step_operator(mdp), FeatureMap(np.ones((21, 2))), zeta, v)


def test_kappa_self_adjoint_case(toy):
    mdp, feats = toy
    zeta = behavior_stationary_dist(mdp)
    op = BellmanOperator(np.zeros((21, 21)), value_function(mdp))
    res = kappa_bound(op, feats, zeta, v_pi=value_function(mdp))
    assert res.kappa < 1e-6
    np.testing.assert_allclose(res.v_td, weighted_projection(feats, zeta) @ value_function(mdp),
                               atol=1e-12)


def test_kappa_bound_holds(toy):
    mdp, feats = toy
    zeta = behavior_stationary_dist(mdp)
    rng = np.random.default_rng(2)
    for lam in (0.0, 0.5, 0.9):
        op = exact_operator_state_dependent(mdp, lam)
        for xi in (zeta, rng.random(21) + 0.1):
            for _ in range(5):
                v = rng.standard_normal(21)
                res = kappa_bound(op, feats, zeta, xi, v_pi=v)
                assert res.sigma_f >= 1 - 1e-9
                assert res.bound_holds


def test_kappa_two_state():
    mdp = build_two_state()
    zeta = behavior_stationary_dist(mdp)
    op = exact_operator_state_dependent(mdp, [0.0, 1.0])
    feats = FeatureMap(np.array([[3.0], [1.0]]))
    for v in (value_function(mdp), np.array([1.0, -2.0])):
        res = kappa_bound(op, feats, zeta, v_pi=v)
        assert np.isfinite(res.kappa) and res.bound_holds


def test_kappa_tightness_short(toy):
    mdp, feats = toy
    zeta = behavior_stationary_dist(mdp)
    res = kappa_tightness(mdp, exact_operator_state_dependent(mdp, 0.0), feats, zeta,
                          draws=2000, seed=1)
    assert not res.exceeded
    assert res.best_ratio <= res.kappa * (1 + 1e-9)
    assert np.all(np.diff(res.history) >= 0)


def test_weighted_norm():
    a = np.diag([0.5, 2.0])
    assert weighted_norm(a, [0.3, 0.7]) == pytest.approx(2.0)


def test_counterexample():
    rep = counterexample_suite()
    assert rep.passed
    assert "PASS" in rep.table()


def test_theorem2_td0_matches_exact(toy):
    mdp, feats = toy
    exact = exact_operator_state_dependent(mdp, 0.0)
    rep = verify_theorem2(mdp, feats, constant_lambda(0.0), steps=200_000, seed=1, op=exact)
    zeta = behavior_stationary_dist(mdp)
    a, b = projected_coefficients(exact, feats, zeta)
    np.testing.assert_array_equal(rep.a_op, a)
    assert rep.max_z < 4.5


def test_theorem2_constant_triple_agreement(toy):
    mdp, feats = toy
    zeta = behavior_stationary_dist(mdp)
    rep = verify_theorem2(mdp, feats, constant_lambda(0.5), steps=200_000, seed=2,
                          mc_samples=2000, mc_warmup=20_000)
    a, b = projected_coefficients(exact_operator_state_dependent(mdp, 0.5), feats, zeta)
    assert np.all(np.abs(rep.a_op - a) <= 4.5 * rep.a_op_se + 1e-12)
    assert np.all(np.abs(rep.a_lstd - a) <= 4.5 * rep.a_lstd_se)
    assert rep.max_z < 4.5


def test_td_lambda_solution_composite_lambda(toy):
    mdp, feats = toy
    lam = np.where(np.arange(21) >= 11, 1.0, 0.0)
    theta = td_lambda_solution(mdp, feats, lam)
    assert theta.shape == (5,)
    comp = CompositeScheme([constant_lambda(0.0), constant_lambda(1.0)],
                           (np.arange(21) >= 11).astype(int))
    assert comp.n_blocks == 2
