"""Off-policy LSTD: accumulate and solve the empirical TD equation.

For ``v = Phi theta`` the empirical equation (1/t) sum_k e_k delta_k(v) = 0
is affine in theta,

    (1/t) sum_k e_k delta_k(Phi theta) = A theta + b,
    A = mean_k  e_k rho_k (gamma_{k+1} phi(S_{k+1}) - phi(S_k))^T,
    b = mean_k  e_k rho_k R_k,

and LSTD returns the root of ``A theta + b``. Means are kept as running
(count-weighted) averages so that magnitudes stay stable on long runs.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import _accel
from ._accel import njit
from .errors import ConfigError, StructureError

COND_LIMIT = 1e12


@dataclass
class LstdRecord:
    """Inputs of one LSTD term: trace, ratio, next discount, features, reward."""
    trace: np.ndarray
    rho: float
    gamma_next: float
    phi: np.ndarray
    phi_next: np.ndarray
    reward: float


@njit
def _welford_nb(traces, phi_s, phi_next, rho, gamma_next, reward, clamp, a, b, count):
    n = a.shape[0]
    e = np.empty(n)
    d = np.empty(n)
    for k in range(traces.shape[0]):
        count += 1
        inv = 1.0 / count
        r = rho[k]
        for i in range(n):
            x = traces[k, i]
            if x > clamp:
                x = clamp
            elif x < -clamp:
                x = -clamp
            e[i] = x * r
            d[i] = gamma_next[k] * phi_next[k, i] - phi_s[k, i]
        for i in range(n):
            for j in range(n):
                a[i, j] += (e[i] * d[j] - a[i, j]) * inv
            b[i] += (e[i] * reward[k] - b[i]) * inv
    return count


def _welford_np(traces, phi_s, phi_next, rho, gamma_next, reward, clamp, a, b, count,
                chunk=65536):
    # chunk means merged with the count-weighted update
    for lo in range(0, traces.shape[0], chunk):
        hi = min(lo + chunk, traces.shape[0])
        m = hi - lo
        e = np.clip(traces[lo:hi], -clamp, clamp) * rho[lo:hi, None]
        d = gamma_next[lo:hi, None] * phi_next[lo:hi] - phi_s[lo:hi]
        a_c = e.T @ d / m
        b_c = e.T @ reward[lo:hi] / m
        count += m
        w = m / count
        a += (a_c - a) * w
        b += (b_c - b) * w
    return count


class LstdAccumulator:
    """Running averages defining the LSTD linear equation.

    Parameters
    ----------
    n_features : int
    truncation : float, optional
        Constrained-LSTD bound B: trace components are clamped to [-B, B]
        before use. The trace recursion itself is not affected.
    """

    def __init__(self, n_features, truncation=None):
        if truncation is not None and not truncation > 0:
            raise ConfigError("truncation bound must be positive")
        self.n_features = int(n_features)
        self.truncation = truncation
        self.a_matrix = np.zeros((self.n_features, self.n_features))
        self.b_vector = np.zeros(self.n_features)
        self.count = 0

    @property
    def _clamp(self):
        return math.inf if self.truncation is None else float(self.truncation)

    def copy(self):
        out = LstdAccumulator(self.n_features, self.truncation)
        out.a_matrix = self.a_matrix.copy()
        out.b_vector = self.b_vector.copy()
        out.count = self.count
        return out

    def accumulate(self, rec):
        """Add one :class:`LstdRecord`."""
        trace = np.asarray(rec.trace, dtype=np.float64)
        if trace.shape != (self.n_features,) or np.shape(rec.phi) != (self.n_features,) \
                or np.shape(rec.phi_next) != (self.n_features,):
            raise StructureError("record dimension does not match the accumulator")
        self.accumulate_arrays(trace[None], np.asarray(rec.phi, dtype=np.float64)[None],
                               np.asarray(rec.phi_next, dtype=np.float64)[None],
                               np.array([rec.rho], dtype=np.float64),
                               np.array([rec.gamma_next], dtype=np.float64),
                               np.array([rec.reward], dtype=np.float64))
        return self

    def accumulate_arrays(self, traces, phi_s, phi_next, rho, gamma_next, reward):
        """Bulk update from aligned arrays (one row per term)."""
        traces = np.ascontiguousarray(traces, dtype=np.float64)
        if traces.ndim != 2 or traces.shape[1] != self.n_features:
            raise StructureError("trace array has the wrong feature dimension")
        args = (traces, np.ascontiguousarray(phi_s, dtype=np.float64),
                np.ascontiguousarray(phi_next, dtype=np.float64),
                np.ascontiguousarray(rho, dtype=np.float64),
                np.ascontiguousarray(gamma_next, dtype=np.float64),
                np.ascontiguousarray(reward, dtype=np.float64), self._clamp,
                self.a_matrix, self.b_vector, self.count)
        if _accel.use_numba():
            self.count = int(_welford_nb(*args))
        else:
            self.count = int(_welford_np(*args))
        return self

    def accumulate_run(self, run, features, start=0, stop=None):
        """Add terms ``k = start..stop-1`` of a :class:`~gbetd.traces.TraceRun`."""
        if stop is None:
            stop = run.n_steps
        k = np.arange(start, stop)
        s, s2 = run.states[k], run.states[k + 1]
        phi = features.phi
        return self.accumulate_arrays(run.traces[k], phi[s], phi[s2], run.rho[s, s2],
                                      run.gamma[s2], run.rewards[k])

    def merge(self, other):
        """Count-weighted combination with another accumulator (returns a new one)."""
        if other.n_features != self.n_features or other.truncation != self.truncation:
            raise StructureError("cannot merge accumulators of different shape or bound")
        out = self.copy()
        total = self.count + other.count
        if total == 0:
            return out
        w = other.count / total
        out.a_matrix = self.a_matrix + (other.a_matrix - self.a_matrix) * w
        out.b_vector = self.b_vector + (other.b_vector - self.b_vector) * w
        out.count = total
        return out

    def evaluate(self, theta):
        """A theta + b, i.e. the averaged e_k delta_k(Phi theta)."""
        return self.a_matrix @ theta + self.b_vector

    def solve(self):
        return solve(self)


@dataclass
class LstdSolution:
    theta: np.ndarray
    flagged: bool
    residual: float
    condition: float


def solve_system(a, b):
    """Root of ``a theta + b``; returns ``(theta, flagged, residual)``.

    Falls back to the minimum-norm least-squares solution (and flags it)
    when the condition number exceeds 1e12.
    """
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return np.full(b.shape, np.nan), True, math.inf
    cond = np.linalg.cond(a)
    flagged = not np.isfinite(cond) or cond > COND_LIMIT
    if flagged:
        theta = np.linalg.lstsq(a, -b, rcond=None)[0]
    else:
        theta = np.linalg.solve(a, -b)
    return theta, bool(flagged), float(np.max(np.abs(a @ theta + b), initial=0.0))


def solve(acc):
    """Solve ``A theta + b = 0`` for an accumulator; see :func:`solve_system`."""
    if acc.count == 0:
        raise ConfigError("cannot solve an empty accumulator")
    theta, flagged, resid = solve_system(acc.a_matrix, acc.b_vector)
    return LstdSolution(theta, flagged, resid, float(np.linalg.cond(acc.a_matrix)))


def lstd_path(run, features, checkpoints, truncation=None):
    """LSTD solutions of one run at increasing step counts.

    Returns ``(checkpoints, thetas, flags)``.
    """
    checkpoints = np.asarray(sorted(int(c) for c in checkpoints))
    if checkpoints.size and (checkpoints[0] < 1 or checkpoints[-1] > run.n_steps):
        raise ConfigError("checkpoints must lie in 1..n_steps")
    acc = LstdAccumulator(features.n_features, truncation)
    thetas = np.empty((checkpoints.size, features.n_features))
    flags = np.zeros(checkpoints.size, dtype=bool)
    lo = 0
    for i, c in enumerate(checkpoints):
        acc.accumulate_run(run, features, lo, c)
        lo = c
        sol = solve(acc)
        thetas[i] = sol.theta
        flags[i] = sol.flagged
    return checkpoints, thetas, flags


def batch_accumulators(run, features, n_batches, truncation=None, burn_in=0):
    """One accumulator per contiguous batch of the run (for batch-means errors)."""
    if n_batches < 2:
        raise ConfigError("need at least two batches")
    edges = np.linspace(burn_in, run.n_steps, n_batches + 1).astype(np.int64)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        out.append(LstdAccumulator(features.n_features, truncation)
                   .accumulate_run(run, features, lo, hi))
    return out


def weighted_norm(x, weights):
    return float(np.sqrt(np.sum(weights * np.asarray(x) ** 2)))


@dataclass
class SolutionMetrics:
    param_distance: float
    value_error: float


def solution_metrics(theta, features, theta_ref=None, v_pi=None, zeta=None):
    """Normalized parameter distance and zeta-weighted value error.

    ``param_distance = |theta - theta_ref| / |theta_ref|`` and
    ``value_error = |Phi theta - v_pi|_zeta / |v_pi|_zeta``; either is NaN
    when its reference is not given.
    """
    theta = np.asarray(theta, dtype=np.float64)
    dist = math.nan
    if theta_ref is not None:
        nref = np.linalg.norm(theta_ref)
        if nref == 0:
            raise ConfigError("reference parameter has zero norm")
        dist = float(np.linalg.norm(theta - theta_ref) / nref)
    err = math.nan
    if v_pi is not None:
        if zeta is None:
            raise ConfigError("value error needs the weights zeta")
        nv = weighted_norm(v_pi, zeta)
        if nv == 0:
            raise ConfigError("reference value function has zero norm")
        err = weighted_norm(features.phi @ theta - v_pi, zeta) / nv
    return SolutionMetrics(dist, err)
