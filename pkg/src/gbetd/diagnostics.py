"""Ergodicity and boundedness diagnostics for the state-trace process.

Empirical conditional trace distributions given the state are compared
through their characteristic functions at random probe frequencies; the
boundedness of constant-lambda traces is predicted from cycle products of
the transition graph.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.stats import ks_2samp

from .errors import ConditionError, ConfigError
from .rng import stream


def visit_traces(run, state):
    """Traces ``e_{t_k}`` at the successive visits ``t_k`` to ``state``."""
    idx = np.flatnonzero(run.states == state)
    if idx.size == 0:
        raise ConditionError(f"state {state} never visited")
    return run.traces[idx]


@dataclass
class ConditionalDistribution:
    state: int
    samples: np.ndarray
    hist_edges: np.ndarray
    hist_density: np.ndarray


def conditional_trace_distributions(run, states, component=0, bins=60, range_=None):
    """Per-state trace samples and normalized histograms of one component."""
    out = {}
    for s in states:
        x = visit_traces(run, s)
        dens, edges = np.histogram(x[:, component], bins=bins, range=range_, density=True)
        out[int(s)] = ConditionalDistribution(int(s), x, edges, dens)
    return out


def ks_distance(a, b):
    """Two-sample Kolmogorov-Smirnov statistic."""
    return float(ks_2samp(np.asarray(a), np.asarray(b)).statistic)


@dataclass
class CharFnProbe:
    """Probe frequencies ``omega_j ~ N(0, scale^2 I)`` and CF evaluation."""
    points: np.ndarray
    per_state_cf: dict = field(default_factory=dict)

    @classmethod
    def create(cls, dim, n_points=500, scale=200.0, seed=0):
        pts = scale * stream(seed, "probe").standard_normal((n_points, dim))
        return cls(pts)

    @property
    def n_points(self):
        return self.points.shape[0]

    def cf_sums(self, samples, chunk=4096):
        """Running sums of ``exp(i omega^T e)`` over ``samples`` (returns the total)."""
        total = np.zeros(self.n_points, dtype=np.complex128)
        for lo in range(0, samples.shape[0], chunk):
            total += np.exp(1j * (samples[lo:lo + chunk] @ self.points.T)).sum(axis=0)
        return total

    def cf(self, samples):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.shape[0] == 0:
            raise ConditionError("no samples")
        return self.cf_sums(samples) / samples.shape[0]

    def evaluate(self, run, states):
        for s in states:
            self.per_state_cf[int(s)] = self.cf(visit_traces(run, s))
        return self.per_state_cf


def visit_grid(total):
    """Powers of two up to ``total``, plus ``total`` itself."""
    if total < 1:
        return np.zeros(0, dtype=np.int64)
    g = 2 ** np.arange(int(math.log2(total)) + 1)
    if g[-1] != total:
        g = np.append(g, total)
    return g.astype(np.int64)


@dataclass
class CfCurve:
    state: int
    visits: np.ndarray
    differences: np.ndarray

    @property
    def final(self):
        return float(self.differences[-1])


def cf_convergence_curve(samples, probe, reference=None, grid=None, chunk=4096,
                         state=-1):
    """``max_j |f_k(omega_j) - f(omega_j)|`` along the visit-count grid.

    ``samples`` are the visit traces of one state in visit order; ``f_k``
    is the empirical CF of the first ``k`` of them. ``f`` is the CF of all
    samples unless ``reference`` (another CF vector) is given, e.g. from a
    second run or a different state.
    """
    samples = np.asarray(samples, dtype=np.float64)
    k_total = samples.shape[0]
    if k_total < 2:
        raise ConditionError("need at least two visits")
    grid = visit_grid(k_total) if grid is None else np.asarray(grid, dtype=np.int64)
    if grid.size and (grid.min() < 1 or grid.max() > k_total):
        raise ConfigError("grid points must lie in 1..number of visits")
    running = np.zeros(probe.n_points, dtype=np.complex128)
    partial = {}
    pos = 0
    wanted = set(int(k) for k in grid)
    for lo in range(0, k_total, chunk):
        block = np.exp(1j * (samples[lo:lo + chunk] @ probe.points.T))
        csum = np.cumsum(block, axis=0) + running
        for k in wanted:
            if lo < k <= lo + block.shape[0]:
                partial[k] = csum[k - lo - 1] / k
        running = csum[-1]
        pos += block.shape[0]
    f_final = running / k_total if reference is None else np.asarray(reference)
    diffs = np.array([np.max(np.abs(partial[int(k)] - f_final)) for k in grid])
    return CfCurve(int(state), grid, diffs)


# ---------------------------------------------------------------------------
# cycles


@dataclass
class CycleReport:
    max_product: float
    cycle: tuple
    n_cycles: int
    max_length: int
    unbounded: bool


def cycle_unboundedness_check(mdp, lam, max_length=12):
    """Largest product of ``lam * gamma(s') * rho(s, s')`` over simple cycles.

    Cycles are simple cycles of the behavior transition graph with at most
    ``max_length`` edges, enumerated by depth-first search from each
    cycle's smallest state. A product above 1 predicts unbounded
    constant-lambda traces.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    if max_length < 1:
        raise ConfigError("cycle length cap must be >= 1")
    rho = mdp.ratio_matrix()
    n = mdp.n_states
    weight = lam * mdp.discount[None, :] * rho
    succ = [np.flatnonzero(mdp.p_behavior[s] > 0) for s in range(n)]
    best, best_cycle, count = -1.0, (), 0
    for start in range(n):
        stack = [(start, iter(succ[start]), 1.0, (start,))]
        on_path = {start}
        while stack:
            node, it, prod, path = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                on_path.discard(node)
                continue
            nxt = int(nxt)
            w = prod * weight[node, nxt]
            if nxt == start:
                count += 1
                if w > best:
                    best, best_cycle = w, path
                continue
            if nxt < start or nxt in on_path or len(path) >= max_length:
                continue
            on_path.add(nxt)
            stack.append((nxt, iter(succ[nxt]), w, path + (nxt,)))
    if count == 0:
        raise ConfigError(f"no cycle of length <= {max_length} found")
    return CycleReport(float(best), best_cycle, count, max_length, bool(best > 1.0))
