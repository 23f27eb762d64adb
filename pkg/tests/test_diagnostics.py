import numpy as np
import pytest

from gbetd.diagnostics import (CharFnProbe, cf_convergence_curve,
                               conditional_trace_distributions, cycle_unboundedness_check,
                               ks_distance, visit_grid, visit_traces)
from gbetd.environments import build_two_state
from gbetd.errors import ConditionError, ConfigError
from gbetd.mdp import FeatureMap, TabularMdp
from gbetd.schemes import constant_lambda, scaling_scheme
from gbetd.traces import run_traces


def test_two_cycle_lambda0_point_mass():
    mdp = build_two_state()
    feats = FeatureMap(np.array([[3.0, 1.0], [1.0, 1.0]]))
    run = run_traces(mdp, feats, constant_lambda(0.0), 200, seed=0)
    dist = conditional_trace_distributions(run, [0, 1])
    for s, d in dist.items():
        x = d.samples[1:] if run.states[0] == s else d.samples
        np.testing.assert_array_equal(x, np.tile(feats.phi[s], (x.shape[0], 1)))
    probe = CharFnProbe.create(2, n_points=50)
    cf = probe.cf(np.tile(feats.phi[0], (5, 1)))
    np.testing.assert_allclose(np.abs(cf), 1.0)


def test_cf_properties(toy):
    mdp, feats = toy
    run = run_traces(mdp, feats, scaling_scheme(10.0), 5000, seed=1)
    probe = CharFnProbe.create(feats.n_features, seed=3)
    assert probe.n_points == 500
    cfs = probe.evaluate(run, [0, 3])
    assert all(np.all(np.abs(v) <= 1 + 1e-12) for v in cfs.values())
    x = visit_traces(run, 0)
    c1 = cf_convergence_curve(x, probe, chunk=97)
    c2 = cf_convergence_curve(x, CharFnProbe.create(feats.n_features, seed=3))
    np.testing.assert_allclose(c1.differences, c2.differences, atol=1e-12)
    assert c1.final == pytest.approx(0.0, abs=1e-12)
    assert np.all(c1.differences <= 2.0)
    with pytest.raises(ConfigError):
        cf_convergence_curve(x, probe, grid=[0])
    with pytest.raises(ConditionError):
        visit_traces(run, 99)


def test_visit_grid():
    np.testing.assert_array_equal(visit_grid(10), [1, 2, 4, 8, 10])
    np.testing.assert_array_equal(visit_grid(8), [1, 2, 4, 8])
    assert visit_grid(0).size == 0


def test_ks():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(2000)
    assert ks_distance(a, a) == 0.0
    assert ks_distance(a, a + 3) > 0.8


def test_cycle_check(toy):
    mdp, _ = toy
    assert cycle_unboundedness_check(mdp, 0.0).max_product == 0.0
    prods = [cycle_unboundedness_check(mdp, lam).max_product for lam in (0.2, 0.5, 0.8, 1.0)]
    assert np.all(np.diff(prods) > 0)
    on = TabularMdp(mdp.p_behavior, mdp.p_behavior, mdp.reward, mdp.discount)
    assert cycle_unboundedness_check(on, 1.0).max_product < 1.0
    with pytest.raises(ConfigError):
        cycle_unboundedness_check(mdp, 1.0, max_length=1)
    with pytest.raises(ConfigError):
        cycle_unboundedness_check(mdp, 1.5)
