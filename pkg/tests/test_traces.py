import numpy as np
import pytest

from gbetd.errors import ConfigError, StructureError
from gbetd.schemes import CompositeScheme, constant_lambda, retrace_scheme, scaling_scheme
from gbetd.traces import (RecordLog, composite_step, compute_traces, coupling_experiment,
                          excursions, init_composite, init_process, run_traces,
                          sample_states, step, step_with_interest, trace_norm_bound,
                          trace_statistics)


def test_zero_trace_step_gives_features(toy):
    mdp, feats = toy
    ts = init_process(mdp, feats, constant_lambda(1.0), seed=0)
    ts, rec = step(ts, mdp, feats, constant_lambda(1.0))
    np.testing.assert_array_equal(rec.trace, feats.phi[rec.s])


def test_td1_unrolled_sum(toy, backend):
    mdp, feats = toy
    states = sample_states(mdp, 60, seed=3)
    tr, _, _ = compute_traces(mdp, feats, constant_lambda(1.0), states)
    rho = mdp.ratio_matrix()
    r = rho[states[:-1], states[1:]]
    for t in (1, 10, 37, 60):
        # e_t = sum_{k=1..t} 0.9^(t-k) rho_k..rho_{t-1} phi(S_k)
        want = sum(0.9 ** (t - k) * np.prod(r[k:t]) * feats.phi[states[k]]
                   for k in range(1, t + 1))
        np.testing.assert_allclose(tr[t], want, rtol=1e-11, atol=1e-12)


def test_scaling_bound_holds(toy, backend):
    mdp, feats = toy
    sch = scaling_scheme(50.0)
    run = run_traces(mdp, feats, sch, 200_000, seed=2)
    bound = trace_norm_bound(mdp, feats, sch)
    assert bound == 51.0
    assert run.trace_norms().max() <= bound


def test_backends_agree(toy):
    from gbetd import _accel
    mdp, feats = toy
    out = {}
    for b in ("numba", "numpy"):
        prev = _accel.set_backend(b)
        try:
            out[b] = run_traces(mdp, feats, scaling_scheme(20.0), 20_000, seed=9)
        finally:
            _accel.set_backend(prev)
    np.testing.assert_array_equal(out["numba"].states, out["numpy"].states)
    np.testing.assert_allclose(out["numba"].traces, out["numpy"].traces, rtol=1e-12,
                               atol=1e-12)


def test_determinism(toy, backend):
    mdp, feats = toy
    a = run_traces(mdp, feats, retrace_scheme(), 5000, seed=4)
    b = run_traces(mdp, feats, retrace_scheme(), 5000, seed=4)
    c = run_traces(mdp, feats, retrace_scheme(), 5000, seed=5)
    np.testing.assert_array_equal(a.traces, b.traces)
    assert not np.array_equal(a.states, c.states)


def test_step_matches_batch(toy):
    mdp, feats = toy
    sch = scaling_scheme(3.0)
    run = run_traces(mdp, feats, sch, 500, seed=6)
    ts = init_process(mdp, feats, sch, seed=6)
    assert ts.state == run.states[0]
    for t in range(1, 501):
        ts, rec = step(ts, mdp, feats, sch)
        assert rec.s == run.states[t]
        np.testing.assert_allclose(rec.trace, run.traces[t], rtol=1e-12, atol=1e-13)
        assert rec.lam == pytest.approx(run.lambdas[t])
    assert ts.step == 500


def test_interest_unit_and_zero(toy):
    mdp, feats = toy
    sch = constant_lambda(0.8)
    n_mem = sch.n_memory(mdp.n_states)
    a = init_process(mdp, feats, sch, seed=1)
    b = init_process(mdp, feats, sch, seed=1)
    for _ in range(200):
        a, ra = step(a, mdp, feats, sch)
        b, rb = step_with_interest(b, mdp, feats, sch, np.ones(n_mem))
        np.testing.assert_array_equal(ra.trace, rb.trace)
    z = init_process(mdp, feats, sch, seed=1, e0=np.full(5, 10.0))
    norms = []
    for _ in range(300):
        z, rz = step_with_interest(z, mdp, feats, sch, np.zeros(n_mem))
        norms.append(np.linalg.norm(rz.trace))
    assert norms[-1] < 1e-6 * norms[0]
    with pytest.raises(ConfigError):
        step_with_interest(z, mdp, feats, sch, -np.ones(n_mem))


def test_interest_indicator_replay(toy, backend):
    mdp, feats = toy
    n = mdp.n_states
    sch = scaling_scheme(10.0)
    rng = np.random.default_rng(0)
    interest = (rng.random(n * n) < 0.5).astype(float)
    states = sample_states(mdp, 3000, seed=2)
    got, _, ys = compute_traces(mdp, feats, sch, states, interest=interest)
    rho = mdp.ratio_matrix()
    e = np.zeros(5)
    for t in range(1, states.size):
        s, s2 = states[t - 1], states[t]
        lam = sch.lambda_value(ys[t], e, 0.9, rho[s, s2], n)
        e = lam * 0.9 * rho[s, s2] * e + interest[ys[t]] * feats.phi[s2]
        np.testing.assert_allclose(got[t], e, rtol=1e-12, atol=1e-12)


def test_composite_single_block(toy):
    mdp, feats = toy
    sch = scaling_scheme(7.0)
    comp = CompositeScheme([sch], np.zeros(mdp.n_states, dtype=int))
    a = run_traces(mdp, feats, comp, 3000, seed=3)
    b = run_traces(mdp, feats, sch, 3000, seed=3)
    np.testing.assert_allclose(a.traces, b.traces, rtol=1e-14, atol=1e-14)


def test_composite_identical_blocks(toy):
    mdp, feats = toy
    part = np.arange(mdp.n_states) % 2
    comp = CompositeScheme([constant_lambda(0.7), constant_lambda(0.7)], part)
    a = run_traces(mdp, feats, comp, 3000, seed=4)
    b = run_traces(mdp, feats, constant_lambda(0.7), 3000, seed=4)
    np.testing.assert_allclose(a.traces, b.traces, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(a.traces, a.block_traces.sum(axis=0))


def test_composite_extreme_blocks(toy):
    mdp, feats = toy
    part = (np.arange(mdp.n_states) >= 11).astype(int)
    comp = CompositeScheme([constant_lambda(1.0), constant_lambda(0.0)], part)
    cs = init_composite(mdp, feats, comp, seed=5)
    for _ in range(1000):
        cs, rec = composite_step(cs, mdp, feats, comp)
        want = feats.phi[cs.state] * (part[cs.state] == 1)
        np.testing.assert_array_equal(cs.traces[1], want)
        np.testing.assert_array_equal(rec.trace, cs.traces[0] + cs.traces[1])


def test_composite_step_matches_batch(toy):
    mdp, feats = toy
    part = (np.arange(mdp.n_states) % 3 == 0).astype(int)
    comp = CompositeScheme([scaling_scheme(5.0), retrace_scheme()], part)
    run = run_traces(mdp, feats, comp, 400, seed=7)
    cs = init_composite(mdp, feats, comp, seed=7)
    for t in range(1, 401):
        cs, rec = composite_step(cs, mdp, feats, comp)
        np.testing.assert_allclose(rec.trace, run.traces[t], rtol=1e-12, atol=1e-13)


def test_composite_partition_mismatch(toy):
    mdp, feats = toy
    comp = CompositeScheme([constant_lambda(0.0)], np.zeros(3, dtype=int))
    with pytest.raises(StructureError):
        run_traces(mdp, feats, comp, 10)


def test_coupling(toy, backend):
    mdp, feats = toy
    sch = scaling_scheme(50.0)
    same = coupling_experiment(mdp, feats, sch, np.ones(5), np.ones(5), 1000, seed=1)
    assert np.all(same.deltas == 0)
    e1 = np.full(5, 10 / np.sqrt(5))
    res = coupling_experiment(mdp, feats, sch, np.zeros(5), e1, 100_000, seed=1)
    assert res.deltas[0] == pytest.approx(10.0)
    assert res.final_delta < 1e-6
    assert res.per_step_ok and res.cumulative_ok


def test_coupling_td1_exact_product(toy):
    mdp, feats = toy
    res = coupling_experiment(mdp, feats, constant_lambda(1.0), np.zeros(5), np.ones(5), 2000,
                              seed=3)
    # unscaled: the deviation is exactly D_0 times the product
    bound = np.exp(res.log_bound)
    np.testing.assert_allclose(res.deltas, bound, rtol=1e-9, atol=1e-12)


def test_statistics(toy):
    mdp, feats = toy
    bounded = trace_statistics(run_traces(mdp, feats, scaling_scheme(50.0), 50_000, seed=0))
    assert bounded.excursion_lengths.size == 0
    assert bounded.hist_counts.sum() == 0
    st = trace_statistics(run_traces(mdp, feats, constant_lambda(1.0), 800_000, seed=0))
    assert st.max_norm > 100
    assert np.all(np.diff(st.tail_fraction) <= 0)
    assert st.hist_counts.sum() == np.sum(st.excursion_lengths > 10)


def test_excursions():
    norms = np.array([0, 200, 200, 0, 150, 0, 300, 300, 300])
    np.testing.assert_array_equal(excursions(norms, 100), [2, 1, 3])
    with pytest.raises(ConfigError):
        trace_statistics(norms, bin_width=0)


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_record_log_roundtrip(tmp_path, toy, suffix):
    mdp, feats = toy
    run = run_traces(mdp, feats, scaling_scheme(5.0), 100, seed=1)
    log = RecordLog(tmp_path / f"log{suffix}", 5)
    log.append(run)
    rows = log.read()
    assert rows.shape == (100, 12)
    np.testing.assert_array_equal(rows[:, 7:], run.traces[1:])
    np.testing.assert_array_equal(rows[:, 2], run.states[1:])


def test_negative_steps(toy):
    with pytest.raises(ConfigError):
        sample_states(toy[0], -1)
