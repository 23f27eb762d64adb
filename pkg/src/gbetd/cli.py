"""``gbe-td``: batch driver for the toy-problem, Mountain Car and operator experiments.

Usage::

    gbe-td <recipe> [--config FILE] [--seed-offset K] [--slow] [--out DIR]

Every recipe writes CSV files (with header rows) and ``manifest.json``
into the output directory. Exit status: 0 on success, 2 on invalid input,
3 when a checked recipe's acceptance check fails.
"""
import argparse
from concurrent.futures import ProcessPoolExecutor
import csv
import hashlib
import json
import math
from pathlib import Path
import sys

import numpy as np

from . import __version__, _accel
from .config import load_environment, parse_config, parse_floats, parse_ints
from .errors import ConditionError, ConfigError, StructureError

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 2, 3
DATA_DIR = Path(__file__).parent / "data"


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def pmap(fn, items, workers):
    """Order-preserving map, fanned out over processes when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _param(cfg, recipe, key, default, kind=float):
    sec = cfg.recipe(recipe)
    if key not in sec:
        return default
    raw = sec[key]
    try:
        if kind == "floats":
            return parse_floats(raw)
        if kind == "ints":
            return parse_ints(raw)
        if kind == "words":
            return raw.split()
        if kind is bool:
            return raw.strip().lower() in ("1", "yes", "true", "on")
        if kind is int:
            return int(float(raw))
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{recipe}] {key}: {exc}") from exc


def _seeds(cfg, recipe):
    seeds = _param(cfg, recipe, "seeds", cfg.seeds, "ints")
    if not seeds:
        raise ConfigError("seeds list is empty")
    return seeds


def _scheme(cfg, name, fallback=None):
    if name in cfg.schemes:
        return cfg.schemes[name]
    if fallback is not None:
        return fallback
    raise ConfigError(f"unknown scheme {name!r}")


def default_config_path(recipe):
    path = DATA_DIR / f"{recipe}.ini"
    return path if path.exists() else None


# ---------------------------------------------------------------------------
# trace-stats


def _trace_stats_cell(args):
    from .diagnostics import cycle_unboundedness_check
    from .traces import run_traces, trace_norm_bound, trace_statistics
    mdp, feats, name, scheme, steps, seed, radius, bin_width, min_len, n_tail = args
    run = run_traces(mdp, feats, scheme, steps, seed=seed)
    norms = run.trace_norms()
    grid = np.linspace(0.0, max(float(norms.max()), 1.0), n_tail)
    st = trace_statistics(norms, tail_grid=grid, radius=radius, bin_width=bin_width,
                          min_length=min_len)
    bound = trace_norm_bound(mdp, feats, scheme) if not hasattr(scheme, "partition") \
        else math.inf
    cyc = None
    if getattr(scheme, "kind", "") == "constant":
        cyc = cycle_unboundedness_check(mdp, scheme.lam)
    return name, seed, norms, st, bound, cyc


def recipe_trace_stats(cfg, out, slow):
    from .schemes import constant_lambda, scaling_scheme
    mdp, feats = load_environment(cfg)
    names = _param(cfg, "trace-stats", "schemes", ["td1", "scaling50"], "words")
    builtin = {"td1": constant_lambda(1.0), "scaling50": scaling_scheme(50.0)}
    steps = _param(cfg, "trace-stats", "steps", cfg.steps, int)
    radius = _param(cfg, "trace-stats", "radius", 100.0)
    bin_width = _param(cfg, "trace-stats", "bin_width", 5, int)
    min_len = _param(cfg, "trace-stats", "min_length", 10, int)
    stride = _param(cfg, "trace-stats", "series_stride", 1, int)
    n_tail = _param(cfg, "trace-stats", "tail_points", 200, int)
    cells = [(mdp, feats, n, _scheme(cfg, n, builtin.get(n)), steps, seed, radius, bin_width,
              min_len, n_tail) for n in names for seed in _seeds(cfg, "trace-stats")]
    results = pmap(_trace_stats_cell, cells, cfg.workers)
    series, tails, exc, summ, cycles = [], [], [], [], []
    ok = True
    for name, seed, norms, st, bound, cyc in results:
        t = np.arange(0, norms.size, stride)
        series.extend((name, seed, int(i), norms[i]) for i in t)
        tails.extend((name, seed, x, f) for x, f in zip(st.tail_x, st.tail_fraction))
        exc.extend((name, seed, lo, hi, c) for lo, hi, c in
                   zip(st.hist_edges[:-1], st.hist_edges[1:], st.hist_counts))
        bound_ok = bool(st.max_norm <= bound)
        ok &= bound_ok
        summ.append((name, seed, st.max_norm, bound, bound_ok, st.excursion_lengths.size,
                     int((st.excursion_lengths > min_len).sum())))
        if cyc is not None:
            cycles.append((name, seed, cyc.max_product, " ".join(map(str, cyc.cycle)),
                           cyc.unbounded))
    files = [
        write_csv(out / "trace_norms.csv", ["scheme", "seed", "t", "norm"], series),
        write_csv(out / "tail_fractions.csv", ["scheme", "seed", "x", "fraction"], tails),
        write_csv(out / "excursions.csv", ["scheme", "seed", "length_lo", "length_hi", "count"],
                  exc),
        write_csv(out / "trace_summary.csv",
                  ["scheme", "seed", "max_norm", "norm_bound", "bound_ok", "n_excursions",
                   "n_long_excursions"], summ),
    ]
    if cycles:
        files.append(write_csv(out / "cycles.csv",
                               ["scheme", "seed", "max_product", "cycle", "unbounded"], cycles))
    if not ok:
        raise CheckFailed("trace norm exceeded the scheme's bound")
    return files


# ---------------------------------------------------------------------------
# ergodicity


def _ergodicity_cell(args):
    from .diagnostics import (CharFnProbe, cf_convergence_curve, conditional_trace_distributions,
                              ks_distance, visit_traces)
    from .traces import run_traces
    (mdp, feats, scheme, steps, seed, states, e0_alt, n_points, scale, bins, comp,
     contrast) = args
    run_a = run_traces(mdp, feats, scheme, steps, seed=seed)
    run_b = run_traces(mdp, feats, scheme, steps, seed=seed + 100_003,
                       e0=np.full(feats.n_features, e0_alt))
    probe = CharFnProbe.create(feats.n_features, n_points, scale, seed=seed)
    dists = conditional_trace_distributions(run_a, states, component=comp, bins=bins)
    hist, curves, summ = [], [], []
    finals = {}
    for s in states:
        xa = dists[s].samples
        xb = visit_traces(run_b, s)
        self_c = cf_convergence_curve(xa, probe, state=s)
        cross = cf_convergence_curve(xa, probe, reference=probe.cf(xb), state=s)
        # first half of the run against the whole run
        n_half = int(np.count_nonzero(run_a.states[:steps // 2] == s))
        ks = ks_distance(xa[:n_half, comp], xa[:, comp])
        d = dists[s]
        hist.extend((seed, s, lo, hi, v) for lo, hi, v in
                    zip(d.hist_edges[:-1], d.hist_edges[1:], d.hist_density))
        curves.extend((seed, s, "self", k, v) for k, v in zip(self_c.visits, self_c.differences))
        curves.extend((seed, s, "cross_run", k, v) for k, v in zip(cross.visits, cross.differences))
        summ.append((seed, s, xa.shape[0], cross.final, ks))
        finals[s] = cross.final
    s1, s2 = contrast
    xs = visit_traces(run_a, s1)
    cs = cf_convergence_curve(xs, probe, reference=probe.cf(visit_traces(run_a, s2)), state=s1)
    curves.extend((seed, s1, f"cross_state_{s2}", k, v) for k, v in zip(cs.visits, cs.differences))
    return seed, hist, curves, summ, finals, cs.final


def recipe_ergodicity(cfg, out, slow):
    from .environments import TOY_MONITORED
    from .schemes import scaling_scheme
    mdp, feats = load_environment(cfg)
    rname = "ergodicity"
    scheme = _scheme(cfg, _param(cfg, rname, "scheme", "scaling50", str), scaling_scheme(50.0))
    default_states = list(TOY_MONITORED.values()) if cfg.environment == "toy" else [0, 1]
    states = _param(cfg, rname, "states", default_states, "ints")
    default_contrast = [TOY_MONITORED["SE-first"], TOY_MONITORED["NE-middle"]] \
        if cfg.environment == "toy" else states[:2]
    contrast = _param(cfg, rname, "contrast", default_contrast, "ints")
    if len(contrast) != 2:
        raise ConfigError("contrast needs exactly two states")
    tol = _param(cfg, rname, "cross_run_tol", 0.05)
    min_gap = _param(cfg, rname, "cross_state_min", 0.2)
    cells = [(mdp, feats, scheme, _param(cfg, rname, "steps", cfg.steps, int), seed, states,
              _param(cfg, rname, "e0_alt", 40.0), _param(cfg, rname, "probe_points", 500, int),
              _param(cfg, rname, "probe_scale", 200.0), _param(cfg, rname, "bins", 60, int),
              _param(cfg, rname, "component", 0, int), contrast)
             for seed in _seeds(cfg, rname)]
    hist, curves, summ, checks = [], [], [], []
    ok = True
    for seed, h, c, s, finals, cross_state in pmap(_ergodicity_cell, cells, cfg.workers):
        hist += h
        curves += c
        summ += s
        run_ok = all(v < tol for v in finals.values())
        state_ok = cross_state > min_gap
        ok &= run_ok and state_ok
        checks.append((seed, max(finals.values()), run_ok, cross_state, state_ok))
    files = [
        write_csv(out / "histograms.csv", ["seed", "state", "bin_lo", "bin_hi", "density"], hist),
        write_csv(out / "cf_curves.csv", ["seed", "state", "comparison", "visits", "max_diff"],
                  curves),
        write_csv(out / "ergodicity_states.csv",
                  ["seed", "state", "visits", "cross_run_final", "ks_half_vs_full"], summ),
        write_csv(out / "ergodicity_checks.csv",
                  ["seed", "max_cross_run", "cross_run_ok", "cross_state", "cross_state_ok"],
                  checks),
    ]
    if not ok:
        raise CheckFailed("ergodicity check failed")
    return files


# ---------------------------------------------------------------------------
# toy LSTD sweep and TD(lambda) curve


def _sweep_cell(args):
    from .lstd import LstdAccumulator, solution_metrics, solve
    from .traces import run_traces, sample_states
    mdp, feats, schemes, steps, seed, theta1, v_pi, zeta = args
    states = sample_states(mdp, steps, seed=seed)
    rows = []
    for family, param, scheme in schemes:
        run = run_traces(mdp, feats, scheme, steps, seed=seed, states=states)
        sol = solve(LstdAccumulator(feats.n_features).accumulate_run(run, feats))
        m = solution_metrics(sol.theta, feats, theta1, v_pi, zeta)
        rows.append((family, param, seed, m.param_distance, m.value_error, sol.flagged))
    return rows


def _td1_reference(mdp, feats):
    from .bellman import td_lambda_solution
    from .mdp import behavior_stationary_dist, value_function
    zeta = behavior_stationary_dist(mdp)
    return td_lambda_solution(mdp, feats, 1.0, zeta), value_function(mdp), zeta


def recipe_toy_lstd_sweep(cfg, out, slow):
    from .bellman import td_lambda_solution
    from .lstd import solution_metrics
    from .schemes import constant_lambda, retrace_scheme, scaling_scheme
    mdp, feats = load_environment(cfg)
    rname = "toy-lstd-sweep"
    c_grid = _param(cfg, rname, "C_grid", [10.0 * k for k in range(1, 11)], "floats")
    l_grid = _param(cfg, rname, "lambda_grid", [0.9 + 0.02 * k for k in range(6)], "floats")
    retrace = _param(cfg, rname, "retrace", True, bool)
    steps = _param(cfg, rname, "steps", 300_000, int)
    schemes = [("scaling", c, scaling_scheme(c)) for c in c_grid]
    schemes += [("constant", round(lam, 10), constant_lambda(min(lam, 1.0))) for lam in l_grid]
    if retrace:
        schemes.append(("retrace", 1.0, retrace_scheme(1.0)))
    theta1, v_pi, zeta = _td1_reference(mdp, feats)
    cells = [(mdp, feats, schemes, steps, seed, theta1, v_pi, zeta)
             for seed in _seeds(cfg, rname)]
    rows = [r for part in pmap(_sweep_cell, cells, cfg.workers) for r in part]
    agg = []
    for family, param, _ in schemes:
        d = np.array([r[3] for r in rows if r[0] == family and r[1] == param])
        e = np.array([r[4] for r in rows if r[0] == family and r[1] == param])
        agg.append((family, param, d.size, d.mean(), d.std(ddof=0), e.mean(), e.std(ddof=0)))
    asym = []
    for lam in l_grid:
        m = solution_metrics(td_lambda_solution(mdp, feats, min(lam, 1.0), zeta), feats, theta1,
                             v_pi, zeta)
        asym.append(("asymptotic", round(lam, 10), m.param_distance, m.value_error))
    files = [
        write_csv(out / "lstd_sweep_runs.csv",
                  ["family", "param", "seed", "distance_td1", "value_error", "flagged"], rows),
        write_csv(out / "lstd_sweep_summary.csv",
                  ["family", "param", "n", "mean_distance", "std_distance", "mean_value_error",
                   "std_value_error"], agg),
        write_csv(out / "lstd_sweep_asymptotic.csv",
                  ["family", "lambda", "distance_td1", "value_error"], asym),
    ]
    sc = [a for a in agg if a[0] == "scaling"]
    for prev, nxt in zip(sc[:-1], sc[1:]):
        if nxt[3] > prev[3] + max(prev[4], nxt[4]):
            raise CheckFailed(f"scaling-scheme distance increases from C={prev[1]} to C={nxt[1]}")
    return files


def recipe_toy_td_curve(cfg, out, slow):
    from .bellman import td_lambda_solution
    from .lstd import solution_metrics
    mdp, feats = load_environment(cfg)
    grid = _param(cfg, "toy-td-curve", "lambda_grid", [k / 10 for k in range(11)], "floats")
    theta1, v_pi, zeta = _td1_reference(mdp, feats)
    rows = []
    for lam in grid:
        m = solution_metrics(td_lambda_solution(mdp, feats, lam, zeta), feats, theta1, v_pi,
                             zeta)
        rows.append((lam, m.param_distance, m.value_error))
    f = write_csv(out / "td_curve.csv", ["lambda", "distance_td1", "value_error"], rows)
    errs = [r[2] for r in rows]
    if any(b >= a for a, b in zip(errs[:-1], errs[1:])):
        raise CheckFailed("asymptotic value error is not strictly decreasing in lambda")
    return [f]


# ---------------------------------------------------------------------------
# Mountain Car


def parse_mcar_scheme(text):
    """``scaling:C``, ``retrace``, ``constant:lambda``, ``constrained:lambda:B``,
    ``composite:C1:C2`` or ``truncated:K:C`` (optionally ``@beta``)."""
    from . import environments as env
    body, _, beta = text.partition("@")
    beta = float(beta) if beta else 1.0
    parts = body.split(":")
    try:
        vals = [float(x) for x in parts[1:]]
        kind = parts[0]
        if kind == "scaling" and len(vals) == 1:
            return env.mcar_scaling(vals[0], beta)
        if kind == "retrace" and not vals:
            return env.mcar_retrace(beta)
        if kind == "constant" and len(vals) == 1:
            return env.mcar_constant(vals[0])
        if kind == "constrained" and len(vals) == 2:
            return env.mcar_constant(vals[0], clamp=vals[1])
        if kind == "composite" and len(vals) == 2:
            return env.mcar_composite(vals[0], vals[1], beta)
        if kind == "truncated" and len(vals) == 2:
            return env.mcar_truncated_retrace(vals[0], vals[1], beta)
    except ValueError as exc:
        raise ConfigError(f"bad Mountain Car scheme {text!r}") from exc
    raise ConfigError(f"bad Mountain Car scheme {text!r}")


MCAR_DEFAULT_SCHEMES = ("scaling:0 scaling:5 scaling:25 scaling:125 retrace composite:125:25 "
                        "constant:1 constrained:1:50").split()


def mcar_reference(n_weight, rollouts, horizon, seed):
    from . import environments as env
    weights = env.mcar_error_weights(n_weight, seed=seed)
    gi, gj = np.nonzero(weights > 0)
    vals = np.zeros_like(weights)
    mean, se, done = env.mcar_reference_values(env.GRID_X[gi], env.GRID_V[gj],
                                               n_rollouts=rollouts, horizon=horizon, seed=seed)
    vals[gi, gj] = mean
    return weights, vals, float(done.min()) if done.size else 1.0


def _mcar_cell(args):
    from . import environments as env
    seed, n_eff, labels, weights, values, every = args
    data = env.simulate_behavior(n_eff, seed=seed)
    res = env.run_mcar_lstd(data, [parse_mcar_scheme(s) for s in labels], weights, values,
                            checkpoint_every=every)
    return seed, labels, res


def mcar_ordering(series):
    """Per-seed ordinal checks; ``series`` maps scheme label to its error curve.

    Constrained LSTD counts as non-divergent when its worst error over the
    second half of the run stays within twice the final C=0 error.
    """
    e = {k: float(v[-1]) for k, v in series.items()}
    con = np.asarray(series["lambda=1,B=50"])
    late = con[con.size // 2:]
    return {
        "C0>C5>C25>=C125": e["C=0"] > e["C=5"] > e["C=25"] >= e["C=125"],
        "C0>=retrace>=C5": e["C=0"] >= e["retrace"] >= e["C=5"],
        "constrained_stable": bool(np.all(np.isfinite(late)) and late.max() <= 2 * e["C=0"]),
    }


def recipe_mcar_suite(cfg, out, slow):
    if not slow:
        raise ConfigError("mcar-suite takes tens of minutes; pass --slow to run it")
    rname = "mcar-suite"
    n_eff = _param(cfg, rname, "effective_steps", 600_000, int)
    n_weight = _param(cfg, rname, "weight_steps", 800_000, int)
    rollouts = _param(cfg, rname, "rollouts", 600, int)
    horizon = _param(cfg, rname, "horizon", 5000, int)
    every = _param(cfg, rname, "checkpoint_every", cfg.checkpoint_every, int)
    labels = _param(cfg, rname, "schemes", list(MCAR_DEFAULT_SCHEMES), "words")
    seeds = _seeds(cfg, rname)
    ref_seed = _param(cfg, rname, "reference_seed", 12345, int)
    weights, values, _ = mcar_reference(n_weight, rollouts, horizon, ref_seed)
    for lab in labels:
        parse_mcar_scheme(lab)
    cells = [(seed, n_eff, labels, weights, values, every) for seed in seeds]
    errs, finals, checks = [], [], []
    votes = {}
    for seed, labs, res in pmap(_mcar_cell, cells, cfg.workers):
        curves = {}
        for r in res:
            errs.extend((r.label, seed, int(c), e, f) for c, e, f in
                        zip(r.checkpoints, r.errors, r.flagged))
            curves[r.label] = r.errors
            finals.append((r.label, seed, r.errors[-1]))
        if all(k in curves for k in ("C=0", "C=5", "C=25", "C=125", "retrace", "lambda=1,B=50")):
            for name, passed in mcar_ordering(curves).items():
                votes.setdefault(name, []).append(passed)
                checks.append((seed, name, passed))
    from .environments import GRID_V, GRID_X
    pts = [(i, j) for i in range(GRID_X.size) for j in range(GRID_V.size) if weights[i, j] > 0]
    files = [
        write_csv(out / "mcar_weights.csv", ["position", "velocity", "weight"],
                  [(round(GRID_X[i], 10), round(GRID_V[j], 10), weights[i, j]) for i, j in pts]),
        write_csv(out / "mcar_values.csv", ["position", "velocity", "value"],
                  [(round(GRID_X[i], 10), round(GRID_V[j], 10), values[i, j]) for i, j in pts]),
        write_csv(out / "mcar_errors.csv", ["scheme", "seed", "iteration", "error", "flagged"],
                  errs),
        write_csv(out / "mcar_final.csv", ["scheme", "seed", "final_error"], finals),
        write_csv(out / "mcar_checks.csv", ["seed", "check", "passed"], checks),
    ]
    need = math.ceil(0.8 * len(seeds))
    bad = [k for k, v in votes.items() if sum(v) < need]
    if votes and bad:
        raise CheckFailed("Mountain Car ordering failed: " + ", ".join(bad))
    return files


# ---------------------------------------------------------------------------
# operator recipes


def recipe_counterexample(cfg, out, slow):
    from .bellman import counterexample_suite
    gamma = _param(cfg, "counterexample", "gamma", 0.95)
    rep = counterexample_suite(gamma)
    print(rep.table())
    f = write_csv(out / "counterexample.csv", ["check", "value", "expected", "tolerance", "passed"],
                  [(r.name, _plain(r.value), _plain(r.expected), r.tolerance, r.passed)
                   for r in rep.rows])
    if not rep.passed:
        raise CheckFailed("counterexample values do not match")
    return [f]


def _plain(x):
    if isinstance(x, np.ndarray):
        return " ".join(_fmt(v) for v in np.ravel(x))
    return x


def recipe_theorem2(cfg, out, slow):
    from .bellman import verify_theorem2
    from .schemes import scaling_scheme
    mdp, feats = load_environment(cfg)
    rname = "theorem2-check"
    scheme = _scheme(cfg, _param(cfg, rname, "scheme", "scaling50", str), scaling_scheme(50.0))
    steps = _param(cfg, rname, "steps", 1_000_000, int)
    samples = _param(cfg, rname, "mc_samples", 10_000, int)
    batches = _param(cfg, rname, "batches", 50, int)
    rows, summ = [], []
    ok = True
    for seed in _seeds(cfg, rname):
        rep = verify_theorem2(mdp, feats, scheme, steps=steps, seed=seed, n_batches=batches,
                              mc_samples=samples)
        za, zb = rep.z_scores
        k = feats.n_features
        for i in range(k):
            for j in range(k):
                rows.append((seed, "A", i, j, rep.a_lstd[i, j], rep.a_lstd_se[i, j],
                             rep.a_op[i, j], rep.a_op_se[i, j], za[i, j]))
            rows.append((seed, "b", i, "", rep.b_lstd[i], rep.b_lstd_se[i], rep.b_op[i],
                         rep.b_op_se[i], zb[i]))
        summ.append((seed, rep.max_z, rep.agree, rep.inconclusive))
        ok &= rep.agree
    files = [
        write_csv(out / "theorem2_entries.csv",
                  ["seed", "term", "i", "j", "lstd", "lstd_se", "operator", "operator_se", "z"],
                  rows),
        write_csv(out / "theorem2_summary.csv", ["seed", "max_z", "agree", "inconclusive"], summ),
    ]
    if not ok:
        raise CheckFailed("LSTD limit and operator projection disagree")
    return files


# ---------------------------------------------------------------------------
# plot data


def emit_plot_data(src, dest=None):
    """Reshape recipe outputs in ``src`` into one tidy CSV per figure analogue.

    Long format ``series, x, y, seed``; aggregated sweeps carry ``mean`` and
    ``std`` columns instead of ``y``.
    """
    src = Path(src)
    dest = Path(dest) if dest is not None else src / "plot"
    specs = [
        ("trace_norms.csv", "fig_trace_norms.csv",
         lambda r: (r["scheme"], r["t"], r["norm"], r["seed"])),
        ("tail_fractions.csv", "fig_tail_fractions.csv",
         lambda r: (r["scheme"], r["x"], r["fraction"], r["seed"])),
        ("excursions.csv", "fig_excursions.csv",
         lambda r: (r["scheme"], r["length_lo"], r["count"], r["seed"])),
        ("cf_curves.csv", "fig_ergodicity.csv",
         lambda r: (f"{r['state']}:{r['comparison']}", r["visits"], r["max_diff"], r["seed"])),
        ("td_curve.csv", None, None),
        ("lstd_sweep_summary.csv", None, None),
        ("mcar_errors.csv", "fig_mcar_errors.csv",
         lambda r: (r["scheme"], r["iteration"], r["error"], r["seed"])),
    ]
    written = []
    for name, target, fn in specs:
        path = src / name
        if not path.exists():
            continue
        dest.mkdir(parents=True, exist_ok=True)
        rows = read_csv(path)
        if name == "td_curve.csv":
            out = [("distance_td1", r["lambda"], r["distance_td1"], "") for r in rows]
            out += [("value_error", r["lambda"], r["value_error"], "") for r in rows]
            written.append(write_csv(dest / "fig_td_curve.csv", ["series", "x", "y", "seed"], out))
        elif name == "lstd_sweep_summary.csv":
            out = [(r["family"], r["param"], r["mean_distance"], r["std_distance"], r["n"])
                   for r in rows]
            written.append(write_csv(dest / "fig_lstd_sweep.csv",
                                     ["series", "x", "mean", "std", "n"], out))
        else:
            written.append(write_csv(dest / target, ["series", "x", "y", "seed"],
                                     [fn(r) for r in rows]))
    if not written:
        raise ConfigError(f"no recipe outputs found in {src}")
    return written


def recipe_plot_data(cfg, out, slow):
    return emit_plot_data(out, out / "plot")


RECIPES = {
    "trace-stats": recipe_trace_stats,
    "ergodicity": recipe_ergodicity,
    "toy-lstd-sweep": recipe_toy_lstd_sweep,
    "toy-td-curve": recipe_toy_td_curve,
    "mcar-suite": recipe_mcar_suite,
    "counterexample": recipe_counterexample,
    "theorem2-check": recipe_theorem2,
    "plot-data": recipe_plot_data,
}


# ---------------------------------------------------------------------------
# driver


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, recipe, cfg, files, status):
    man = {
        "recipe": recipe,
        "status": status,
        "config_hash": cfg.config_hash(),
        "seeds": list(cfg.seeds),
        "environment": cfg.environment,
        "version": __version__,
        "files": {Path(f).relative_to(out).as_posix(): _sha256(f) for f in sorted(files)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def run_recipe(name, cfg, out, slow=False):
    """Run one recipe; returns the exit status."""
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; choose from {', '.join(RECIPES)}")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    status = EXIT_OK
    files = []
    try:
        files = RECIPES[name](cfg, out, slow)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        status = EXIT_CHECK
        files = sorted(p for p in out.glob("*.csv"))
    write_manifest(out, name, cfg, files, "ok" if status == EXIT_OK else "check_failed")
    return status


def build_parser():
    p = argparse.ArgumentParser(prog="gbe-td", description=__doc__.split("\n")[0])
    p.add_argument("recipe", help="one of: " + ", ".join(RECIPES))
    p.add_argument("--config", help="INI experiment config (default: bundled config)")
    p.add_argument("--seed-offset", type=int, default=0, help="add K to every seed")
    p.add_argument("--slow", action="store_true", help="allow minutes-scale recipes")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=None, help="override worker count")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {args.recipe!r}; choose from {', '.join(RECIPES)}")
        src = args.config or default_config_path(args.recipe)
        cfg = parse_config(src) if src is not None else parse_config("[experiment]\n")
        if args.seed_offset:
            cfg = cfg.with_seed_offset(args.seed_offset)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("workers must be >= 1")
            cfg.workers = args.workers
        out = Path(args.out or cfg.out or f"results/{args.recipe}")
        return run_recipe(args.recipe, cfg, out, args.slow)
    except (ConfigError, StructureError, ConditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
