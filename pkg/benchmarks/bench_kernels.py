"""Wall-clock comparison of the numba kernels and their numpy fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--scale 1.0] [--repeat 3]

Each kernel runs once per backend to warm up (numba compiles on first
call), then ``--repeat`` timed runs; the best time is reported. The
numba/numpy results are also checked for agreement.
"""
import argparse
import time

import numpy as np

from gbetd import _accel
from gbetd.bellman import mc_operator_history_dependent
from gbetd.environments import (build_toy, mcar_error_weights, mcar_retrace, mcar_scaling,
                                run_mcar_lstd, simulate_behavior)
from gbetd.lstd import LstdAccumulator
from gbetd.schemes import scaling_scheme
from gbetd.traces import run_traces


def cases(scale):
    mdp, feats = build_toy()
    sch = scaling_scheme(50.0)
    n = int(200_000 * scale)
    run = run_traces(mdp, feats, sch, n, seed=0)
    data = simulate_behavior(int(20_000 * scale), seed=0)
    w = mcar_error_weights(data=data)
    vals = np.zeros_like(w)

    def traces():
        return run_traces(mdp, feats, sch, n, seed=0).traces[-1]

    def lstd():
        return LstdAccumulator(feats.n_features).accumulate_run(run, feats).a_matrix

    def mc():
        return mc_operator_history_dependent(mdp, feats, sch, warmup=20_000,
                                             samples=int(200 * scale), seed=0).p_tilde

    def mcar():
        res = run_mcar_lstd(data, [mcar_scaling(25), mcar_retrace()], w, vals,
                            checkpoint_every=data.n_effective)
        return np.array([r.theta for r in res])

    return {"trace recursion": traces, "LSTD accumulation": lstd,
            "MC operator rollouts": mc, "Mountain Car LSTD segment": mcar}


def best_time(fn, repeat):
    out = fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=float, default=1.0, help="problem-size multiplier")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = ["numba", "numpy"] if _accel.HAVE_NUMBA else ["numpy"]
    table = {}
    for name, fn in cases(args.scale).items():
        res = {}
        for b in backends:
            prev = _accel.set_backend(b)
            try:
                res[b] = best_time(fn, args.repeat)
            finally:
                _accel.set_backend(prev)
        table[name] = res
    print(f"{'kernel':28s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}"
          + f"{'max |diff|':>13s}")
    for name, res in table.items():
        line = f"{name:28s}" + "".join(f"{res[b][0]:11.3f}s" for b in backends)
        if len(backends) == 2:
            diff = float(np.max(np.abs(res["numba"][1] - res["numpy"][1])))
            line += f"{res['numpy'][0] / res['numba'][0]:9.1f}x{diff:13.2e}"
        print(line)


if __name__ == "__main__":
    main()
