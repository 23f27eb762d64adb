"""Joint state-trace process under the behavior policy.

The state trajectory does not depend on the traces, so a run is computed in
two passes: :func:`sample_states` draws ``S_0..S_T`` from the behavior chain
and :func:`compute_traces` replays the trace recursion

    e_t = lambda_t * gamma_t * rho_{t-1} * e_{t-1} + i_t * phi(S_t)

over it. Coupling experiments reuse one trajectory for several initial
traces; composite schemes run one masked recursion per block.
"""
from dataclasses import dataclass, field
import math
from pathlib import Path
from typing import Optional

import numpy as np

from . import _accel
from ._accel import njit
from .errors import ConfigError, StructureError
from .mdp import behavior_stationary_dist
from .rng import stream
from .schemes import CompositeScheme, lambda_kernel

# ---------------------------------------------------------------------------
# kernels


@njit
def _sample_states_nb(cdf, s0, u):
    out = np.empty(u.shape[0] + 1, dtype=np.int64)
    out[0] = s0
    n = cdf.shape[1]
    s = s0
    for t in range(u.shape[0]):
        x = u[t]
        j = 0
        while j < n - 1 and cdf[s, j] <= x:
            j += 1
        s = j
        out[t + 1] = s
    return out


def _sample_states_np(cdf, s0, u):
    out = np.empty(u.shape[0] + 1, dtype=np.int64)
    out[0] = s0
    s = s0
    for t, x in enumerate(u):
        s = int(np.searchsorted(cdf[s], x, side="right"))
        out[t + 1] = s
    return out


@njit
def _trace_loop_nb(states, weights, phi, gamma, rho, kind, lam, beta, k_trunc, thr, e0,
                   traces, lambdas):
    n = phi.shape[1]
    for i in range(n):
        traces[0, i] = e0[i]
    lambdas[0] = np.nan
    for t in range(1, states.shape[0]):
        sp = states[t - 1]
        s = states[t]
        g = gamma[s]
        r = rho[sp, s]
        sq = 0.0
        for i in range(n):
            sq += traces[t - 1, i] * traces[t - 1, i]
        lt = lambda_kernel(kind, lam, beta, k_trunc, thr[sp, s], g, r, math.sqrt(sq))
        lambdas[t] = lt
        f = lt * g * r
        w = weights[t]
        for i in range(n):
            traces[t, i] = f * traces[t - 1, i] + w * phi[s, i]


def _trace_loop_np(states, weights, phi, gamma, rho, kind, lam, beta, k_trunc, thr, e0,
                   traces, lambdas):
    rule = getattr(lambda_kernel, "py_func", lambda_kernel)
    traces[0] = e0
    lambdas[0] = np.nan
    g_all = gamma[states]
    r_all = np.empty(states.shape[0])
    r_all[1:] = rho[states[:-1], states[1:]]
    c_all = np.empty(states.shape[0])
    c_all[1:] = thr[states[:-1], states[1:]]
    phi_rows = phi[states]
    e = np.array(e0, dtype=np.float64)
    for t in range(1, states.shape[0]):
        lt = rule(kind, lam, beta, k_trunc, c_all[t], g_all[t], r_all[t],
                  math.sqrt(e @ e))
        lambdas[t] = lt
        e = (lt * g_all[t] * r_all[t]) * e + weights[t] * phi_rows[t]
        traces[t] = e


def _trace_loop_custom(states, memories, weights, phi, gamma, rho, scheme, e0,
                       traces, lambdas):
    n_states = gamma.shape[0]
    traces[0] = e0
    lambdas[0] = np.nan
    e = np.array(e0, dtype=np.float64)
    for t in range(1, states.shape[0]):
        sp, s = states[t - 1], states[t]
        lt = scheme.lambda_value(int(memories[t]), e, gamma[s], rho[sp, s], n_states)
        lambdas[t] = lt
        e = (lt * gamma[s] * rho[sp, s]) * e + weights[t] * phi[s]
        traces[t] = e


# ---------------------------------------------------------------------------
# data types


@dataclass
class TraceRun:
    """Full-precision record stream of one run.

    Arrays are indexed by time ``t = 0..T``; ``lambdas[0]`` is NaN since
    ``lambda_t`` is only defined for ``t >= 1``. ``rewards[t]`` is
    ``R_t = r(S_t, S_{t+1})`` and has length T.
    """
    states: np.ndarray
    memories: np.ndarray
    traces: np.ndarray
    lambdas: np.ndarray
    rewards: np.ndarray
    rho: np.ndarray
    gamma: np.ndarray
    block_traces: Optional[np.ndarray] = None

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def rhos(self):
        """rho_t = rho(S_t, S_{t+1}) for t = 0..T-1."""
        return self.rho[self.states[:-1], self.states[1:]]

    @property
    def gammas(self):
        return self.gamma[self.states]

    def trace_norms(self):
        return np.linalg.norm(self.traces, axis=1)

    def record(self, t):
        """TransitionRecord for step ``t >= 1``."""
        sp, s = int(self.states[t - 1]), int(self.states[t])
        return TransitionRecord(sp, s, float(self.rho[sp, s]), float(self.gamma[s]),
                                float(self.lambdas[t]), self.traces[t].copy(),
                                float(self.rewards[t - 1]))


@dataclass
class TransitionRecord:
    s_prev: int
    s: int
    rho_prev: float
    gamma: float
    lam: float
    trace: np.ndarray
    reward_prev: float


@dataclass
class TraceProcessState:
    state: int
    memory: int
    trace: np.ndarray
    step: int = 0
    rng: Optional[np.random.Generator] = None


@dataclass
class CompositeTraceState:
    state: int
    memories: list
    traces: list
    step: int = 0
    rng: Optional[np.random.Generator] = None

    @property
    def summed_trace(self):
        return np.sum(self.traces, axis=0)


# ---------------------------------------------------------------------------
# trajectory sampling


def _behavior_cdf(mdp):
    cdf = np.cumsum(mdp.p_behavior, axis=1)
    cdf[:, -1] = 1.0
    return cdf


def initial_state(mdp, seed):
    """S_0 ~ zeta_S drawn from the ``init`` stream."""
    zeta = behavior_stationary_dist(mdp)
    return int(stream(seed, "init").choice(mdp.n_states, p=zeta))


def sample_states(mdp, steps, seed=0, s0=None):
    """Behavior-chain trajectory S_0..S_steps on the ``transitions`` stream."""
    if steps < 0:
        raise ConfigError("steps must be nonnegative")
    if s0 is None:
        s0 = initial_state(mdp, seed)
    u = stream(seed, "transitions").random(steps)
    cdf = _behavior_cdf(mdp)
    if _accel.use_numba():
        return _sample_states_nb(cdf, int(s0), u)
    return _sample_states_np(cdf, int(s0), u)


def sample_rewards(mdp, states, seed=0):
    """R_t = r(S_t, S_{t+1}), plus zero-mean noise when the model asks for it."""
    rew = mdp.reward[states[:-1], states[1:]]
    if mdp.reward_noise > 0:
        rew = rew + mdp.reward_noise * stream(seed, "rewards").standard_normal(rew.shape[0])
    return rew


# ---------------------------------------------------------------------------
# trace recursion


def _increment_weights(scheme, states, memories, interest, mask):
    w = np.ones(states.shape[0])
    if interest is not None:
        interest = np.asarray(interest, dtype=np.float64)
        if np.any(interest < 0):
            raise ConfigError("interest values must be nonnegative")
        w = w * interest[memories]
    if mask is not None:
        w = w * np.asarray(mask, dtype=np.float64)[states]
    return w


def compute_traces(mdp, features, scheme, states, e0=None, interest=None, mask=None,
                   y0=None):
    """Trace recursion over a fixed state trajectory.

    Returns ``(traces, lambdas, memories)``. ``interest`` is indexed by
    memory state; ``mask`` by state (used for composite blocks). Neither
    weights ``e_0``.
    """
    states = np.asarray(states, dtype=np.int64)
    phi = features.phi
    n_states = mdp.n_states
    if phi.shape[0] != n_states:
        raise StructureError("feature rows do not match the number of states")
    e0 = np.zeros(phi.shape[1]) if e0 is None else np.asarray(e0, dtype=np.float64)
    if e0.shape != (phi.shape[1],):
        raise StructureError("initial trace has the wrong dimension")
    memories = scheme.memory_path(states, n_states, y0=y0)
    weights = _increment_weights(scheme, states, memories, interest, mask)
    rho = mdp.ratio_matrix()
    traces = np.empty((states.shape[0], phi.shape[1]))
    lambdas = np.empty(states.shape[0])
    if not scheme.is_compiled:
        _trace_loop_custom(states, memories, weights, phi, mdp.discount, rho, scheme, e0,
                           traces, lambdas)
    else:
        args = (states, weights, phi, mdp.discount, rho, scheme.kind_code, scheme.lam,
                scheme.beta, scheme.k_trunc, scheme.threshold_matrix(n_states), e0,
                traces, lambdas)
        if _accel.use_numba():
            _trace_loop_nb(*args)
        else:
            _trace_loop_np(*args)
    return traces, lambdas, memories


def run_traces(mdp, features, scheme, steps, seed=0, e0=None, s0=None, interest=None,
               states=None):
    """Simulate ``steps`` transitions of the state-trace process.

    ``scheme`` may be a :class:`LambdaScheme` or a :class:`CompositeScheme`.
    Pass ``states`` to replay a given trajectory instead of sampling one.
    """
    if states is None:
        states = sample_states(mdp, steps, seed=seed, s0=s0)
    rewards = sample_rewards(mdp, states, seed=seed)
    rho = mdp.ratio_matrix()
    if isinstance(scheme, CompositeScheme):
        if scheme.partition.shape[0] != mdp.n_states:
            raise StructureError("partition does not cover the state space")
        blocks, mems, lams = [], [], []
        for i, (sub, mask) in enumerate(zip(scheme.schemes, scheme.block_masks())):
            e0_i = None
            if e0 is not None:
                e0_i = np.asarray(e0)[i]
            tr, la, me = compute_traces(mdp, features, sub, states, e0=e0_i,
                                        interest=interest, mask=mask)
            blocks.append(tr)
            lams.append(la)
            mems.append(me)
        block_traces = np.stack(blocks)
        return TraceRun(states, np.stack(mems), block_traces.sum(axis=0), np.stack(lams),
                        rewards, rho, mdp.discount, block_traces=block_traces)
    traces, lambdas, memories = compute_traces(mdp, features, scheme, states, e0=e0,
                                               interest=interest)
    return TraceRun(states, memories, traces, lambdas, rewards, rho, mdp.discount)


def init_process(mdp, features, scheme, seed=0, s0=None, e0=None):
    """Initial (S_0, y_0, e_0) with the run's ``transitions`` stream attached."""
    if s0 is None:
        s0 = initial_state(mdp, seed)
    e0 = np.zeros(features.n_features) if e0 is None else np.array(e0, dtype=np.float64)
    return TraceProcessState(int(s0), scheme.memory_init(int(s0), mdp.n_states), e0, 0,
                             stream(seed, "transitions"))


def _draw_next(mdp, s, rng):
    cdf = np.cumsum(mdp.p_behavior[s])
    cdf[-1] = 1.0
    return int(np.searchsorted(cdf, rng.random(), side="right"))


def step(ts, mdp, features, scheme, interest=None):
    """Advance the process by one transition; returns ``(new_state, record)``.

    Draws from ``ts.rng`` exactly as :func:`sample_states` does, so stepping
    ``T`` times reproduces a batch run with the same seed.
    """
    n = mdp.n_states
    s_prev = ts.state
    s = _draw_next(mdp, s_prev, ts.rng)
    y = scheme.memory_step(ts.memory, s, n)
    rho_prev = float(mdp.ratio_matrix()[s_prev, s]) if mdp.p_behavior[s_prev, s] > 0 else 0.0
    g = float(mdp.discount[s])
    lam = scheme.lambda_value(y, ts.trace, g, rho_prev, n)
    inc = 1.0
    if interest is not None:
        inc = float(interest[y])
        if inc < 0:
            raise ConfigError("interest values must be nonnegative")
    e = lam * g * rho_prev * ts.trace + inc * features.phi[s]
    rec = TransitionRecord(s_prev, s, rho_prev, g, lam, e.copy(),
                           float(mdp.reward[s_prev, s]))
    return TraceProcessState(s, y, e, ts.step + 1, ts.rng), rec


def step_with_interest(ts, mdp, features, scheme, interest):
    return step(ts, mdp, features, scheme, interest=interest)


def init_composite(mdp, features, composite, seed=0, s0=None):
    if s0 is None:
        s0 = initial_state(mdp, seed)
    n = mdp.n_states
    return CompositeTraceState(
        int(s0), [sch.memory_init(int(s0), n) for sch in composite.schemes],
        [np.zeros(features.n_features) for _ in composite.schemes], 0,
        stream(seed, "transitions"))


def composite_step(cs, mdp, features, composite):
    """One transition of the composite process; record carries the summed trace."""
    n = mdp.n_states
    if composite.partition.shape[0] != n:
        raise StructureError("partition does not cover the state space")
    s_prev = cs.state
    s = _draw_next(mdp, s_prev, cs.rng)
    block = int(composite.partition[s])
    rho_prev = float(mdp.ratio_matrix()[s_prev, s])
    g = float(mdp.discount[s])
    mems, traces, lams = [], [], []
    for i, sch in enumerate(composite.schemes):
        y = sch.memory_step(cs.memories[i], s, n)
        lam = sch.lambda_value(y, cs.traces[i], g, rho_prev, n)
        e = lam * g * rho_prev * cs.traces[i]
        if i == block:
            e = e + features.phi[s]
        mems.append(y)
        traces.append(e)
        lams.append(lam)
    new = CompositeTraceState(s, mems, traces, cs.step + 1, cs.rng)
    rec = TransitionRecord(s_prev, s, rho_prev, g, float(lams[block]), new.summed_trace,
                           float(mdp.reward[s_prev, s]))
    return new, rec


def trace_norm_bound(mdp, features, scheme):
    """max_y C_y + max_s |phi(s)| (inf when the scheme claims no bound)."""
    n = mdp.n_states
    pairs = np.argwhere(mdp.p_behavior > 0)
    if scheme.memory == "trivial":
        ys = [0]
    else:
        ys = [int(s) * n + int(s2) for s, s2 in pairs]
    c = max(scheme.trace_bound(y, n) for y in ys)
    return c + features.max_norm


# ---------------------------------------------------------------------------
# coupling


@dataclass
class CouplingResult:
    deltas: np.ndarray
    log_bound: np.ndarray
    per_step_ok: bool
    cumulative_ok: bool
    max_step_violation: float

    @property
    def final_delta(self):
        return float(self.deltas[-1])


def coupling_experiment(mdp, features, scheme, e0, e0_hat, steps, seed=0, s0=None,
                        rel_tol=1e-9, abs_tol=1e-12):
    """Two trace sequences from different initial traces on one trajectory.

    Checks the per-step contraction ``D_t <= gamma_t rho_{t-1} D_{t-1}`` and
    the cumulative bound ``D_t <= D_0 prod_k gamma_k rho_{k-1}`` (kept in log
    space so long products do not underflow). Tolerances absorb rounding
    relative to the trace magnitude.
    """
    states = sample_states(mdp, steps, seed=seed, s0=s0)
    y0 = scheme.memory_init(int(states[0]), mdp.n_states)
    tr1, _, _ = compute_traces(mdp, features, scheme, states, e0=e0, y0=y0)
    tr2, _, _ = compute_traces(mdp, features, scheme, states, e0=e0_hat, y0=y0)
    deltas = np.linalg.norm(tr1 - tr2, axis=1)
    rho = mdp.ratio_matrix()
    factors = mdp.discount[states[1:]] * rho[states[:-1], states[1:]]
    scale = np.maximum(np.linalg.norm(tr1, axis=1), np.linalg.norm(tr2, axis=1))
    slack = abs_tol * (1.0 + scale[1:])
    step_gap = deltas[1:] - (factors * deltas[:-1] * (1.0 + rel_tol) + slack)
    per_step_ok = bool(np.all(step_gap <= 0.0))
    with np.errstate(divide="ignore"):
        log_bound = np.concatenate([[0.0], np.cumsum(np.log(factors))])
        log_bound = log_bound + (np.log(deltas[0]) if deltas[0] > 0 else -np.inf)
    bound = np.exp(log_bound)
    cum_slack = abs_tol * (1.0 + scale) * np.arange(1, states.shape[0] + 1)
    cumulative_ok = bool(np.all(deltas <= bound * (1.0 + rel_tol) + cum_slack))
    return CouplingResult(deltas, log_bound, per_step_ok, cumulative_ok,
                          float(step_gap.max()) if step_gap.size else 0.0)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class TraceStats:
    norms: np.ndarray
    tail_x: np.ndarray
    tail_fraction: np.ndarray
    excursion_lengths: np.ndarray
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    radius: float
    min_length: int

    @property
    def max_norm(self):
        return float(self.norms.max())


def excursions(norms, radius):
    """Lengths of maximal runs with ``norm > radius``."""
    outside = np.concatenate([[False], np.asarray(norms) > radius, [False]])
    d = np.diff(outside.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return ends - starts


def trace_statistics(run_or_norms, tail_grid=None, radius=100.0, bin_width=5,
                     min_length=10):
    """Norm series, tail fractions and excursion-length histogram.

    Only excursions longer than ``min_length`` enter the histogram; bins
    are ``bin_width`` steps wide starting just above ``min_length``.
    """
    if isinstance(run_or_norms, TraceRun):
        norms = run_or_norms.trace_norms()
    else:
        norms = np.asarray(run_or_norms, dtype=np.float64)
    if bin_width < 1:
        raise ConfigError("bin width must be >= 1")
    if tail_grid is None:
        top = max(float(norms.max()), 1.0)
        tail_grid = np.linspace(0.0, top, 200)
    tail_grid = np.asarray(tail_grid, dtype=np.float64)
    srt = np.sort(norms)
    tail = 1.0 - np.searchsorted(srt, tail_grid, side="right") / norms.shape[0]
    lengths = excursions(norms, radius)
    long = lengths[lengths > min_length]
    top = int(long.max()) if long.size else min_length + bin_width
    edges = np.arange(min_length + 0.5, top + bin_width + 0.5, bin_width)
    counts, edges = np.histogram(long, bins=edges)
    return TraceStats(norms, tail_grid, tail, lengths, edges, counts, float(radius),
                      int(min_length))


# ---------------------------------------------------------------------------
# record logs

RECORD_COLUMNS = ("t", "s_prev", "s", "rho_prev", "gamma", "lambda", "reward_prev")


class RecordLog:
    """Append-only run log, CSV (``.csv``) or raw little-endian float64 (``.bin``).

    Rows are ``t, s_prev, s, rho_prev, gamma, lambda, reward_prev, e_0..e_{n-1}``.
    """

    def __init__(self, path, n_features):
        self.path = Path(path)
        self.n_features = n_features
        self.binary = self.path.suffix == ".bin"
        if not self.binary and not self.path.exists():
            cols = list(RECORD_COLUMNS) + [f"e{i}" for i in range(n_features)]
            self.path.write_text(",".join(cols) + "\n")

    def append(self, run, t0=1):
        """Append records ``t0..T`` of ``run``."""
        t = np.arange(t0, run.states.shape[0])
        if t.size == 0:
            return
        sp, s = run.states[t - 1], run.states[t]
        rows = np.column_stack([t, sp, s, run.rho[sp, s], run.gamma[s], run.lambdas[t],
                                run.rewards[t - 1], run.traces[t]])
        if self.binary:
            with open(self.path, "ab") as fh:
                fh.write(rows.astype("<f8").tobytes())
        else:
            with open(self.path, "a") as fh:
                np.savetxt(fh, rows, delimiter=",", fmt="%.17g")

    def read(self):
        if self.binary:
            data = np.fromfile(self.path, dtype="<f8")
            return data.reshape(-1, len(RECORD_COLUMNS) + self.n_features)
        return np.loadtxt(self.path, delimiter=",", skiprows=1, ndmin=2)
