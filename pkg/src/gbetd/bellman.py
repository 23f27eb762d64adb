"""Generalized Bellman operators ``T v = r_tilde + P_tilde v`` on a finite state space.

An operator is attached to a randomized stopping time: starting from
``S_0 = s`` under the target chain, the system continues at step ``t`` with
probability ``lambda_t`` and stops otherwise. Then

    r_tilde(s)     = E_s[ sum_{t < tau} gamma_1^t r_pi(S_t) ],
    P_tilde(s, s') = E_s[ gamma_1^tau 1(S_tau = s') ],

with ``gamma_1^t = gamma(S_1)...gamma(S_t)``. For state-dependent lambda
both have closed forms; for history-dependent schemes they are estimated
by simulation from initial memory/trace pairs drawn from a long behavior
run.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import _accel
from ._accel import njit
from .errors import ConditionError, ConfigError, StructureError
from .lstd import LstdAccumulator, batch_accumulators
from .mdp import (behavior_stationary_dist, spectral_radius, spectral_radius_nonneg,
                  value_function)
from .rng import stream
from .schemes import CompositeScheme, lambda_kernel

ROW_SUM_TOL = 1e-9


@dataclass
class BellmanOperator:
    """Affine operator ``v -> r_tilde + p_tilde v``.

    For Monte Carlo operators ``cov[s]`` is the covariance of the per-rollout
    vector ``(P_tilde row, r_tilde)`` at state ``s`` and ``n_samples[s]`` the
    number of rollouts, so standard errors of any linear functional follow.
    """
    p_tilde: np.ndarray
    r_tilde: np.ndarray
    provenance: str = "exact"
    n_samples: np.ndarray = None
    cov: np.ndarray = None
    cap_mass: float = 0.0
    horizon: int = 0
    notes: list = field(default_factory=list)

    @property
    def n_states(self):
        return self.r_tilde.shape[0]

    @property
    def is_exact(self):
        return self.provenance == "exact"

    def apply(self, v):
        return self.r_tilde + self.p_tilde @ v

    @property
    def se_p(self):
        if self.cov is None:
            return np.zeros_like(self.p_tilde)
        n = self.n_states
        var = self.cov[:, np.arange(n), np.arange(n)]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(var / self.n_samples[:, None])  # nan for unsampled states

    @property
    def se_r(self):
        if self.cov is None:
            return np.zeros_like(self.r_tilde)
        n = self.n_states
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(self.cov[:, n, n] / self.n_samples)

    def functional_se(self, v, c=1.0):
        """Per-state standard error of ``c * r_tilde(s) + (P_tilde v)(s)``."""
        if self.cov is None:
            return np.zeros(self.n_states)
        w = np.append(np.asarray(v, dtype=np.float64), c)
        var = np.einsum("i,sij,j->s", w, self.cov, w)
        return np.sqrt(np.maximum(var, 0.0) / self.n_samples)


# ---------------------------------------------------------------------------
# exact operators


def exact_operator_state_dependent(mdp, lam):
    """Closed-form operator for ``lambda_t = lam(S_t)``.

    Summing the temporal differences along the continuation weights gives
    ``Tv - v = (I - P Gamma Lambda)^{-1} (r_pi + P Gamma v - v)``: each step
    continues with probability ``lam(S_t)`` and stops with ``1 - lam(S_t)``.
    Rearranging,

        r_tilde = (I - P Gamma Lambda)^{-1} r_pi,
        P_tilde = (I - P Gamma Lambda)^{-1} P Gamma (I - Lambda).
    """
    n = mdp.n_states
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
    if np.any((lam < 0) | (lam > 1)) or np.any(np.isnan(lam)):
        raise ConfigError("lambda values must lie in [0, 1]")
    pg = mdp.p_gamma
    m = np.eye(n) - pg * lam[None, :]
    try:
        lu_r = np.linalg.solve(m, np.column_stack([mdp.expected_reward, pg * (1.0 - lam)[None, :]]))
    except np.linalg.LinAlgError as exc:
        raise ConditionError("I - P Gamma Lambda is singular") from exc
    if not np.all(np.isfinite(lu_r)):
        raise ConditionError("I - P Gamma Lambda is singular")
    r_tilde = lu_r[:, 0]
    p_tilde = lu_r[:, 1:]
    # exact zeros stay zeros; tiny negative rounding is clipped
    p_tilde = np.where(p_tilde < 0, np.where(p_tilde > -1e-14, 0.0, p_tilde), p_tilde)
    return BellmanOperator(p_tilde, r_tilde, "exact")


def one_step_operator(mdp):
    """The classical operator ``r_pi + P Gamma v`` (lambda = 0)."""
    return BellmanOperator(np.array(mdp.p_gamma), mdp.expected_reward.copy(), "exact")


def composite_operator(operators, partition):
    """Row ``s`` of the result comes from ``operators[partition[s]]``."""
    partition = np.asarray(partition, dtype=np.int64)
    if not operators:
        raise StructureError("need at least one operator")
    n = operators[0].n_states
    if partition.shape != (n,):
        raise StructureError("partition does not match the operators' state space")
    if partition.min() < 0 or partition.max() >= len(operators):
        raise StructureError("partition refers to a missing operator")
    if any(op.n_states != n for op in operators):
        raise StructureError("operators are defined on different state spaces")
    p = np.empty((n, n))
    r = np.empty(n)
    exact = all(op.is_exact for op in operators)
    cov = None if exact else np.zeros((n, n + 1, n + 1))
    ns = None if exact else np.ones(n)
    for s in range(n):
        op = operators[partition[s]]
        p[s] = op.p_tilde[s]
        r[s] = op.r_tilde[s]
        if not exact and op.cov is not None:
            cov[s] = op.cov[s]
            ns[s] = op.n_samples[s]
        elif not exact:
            ns[s] = np.inf
    prov = "exact" if exact else "composite"
    return BellmanOperator(p, r, prov, ns, cov)


# ---------------------------------------------------------------------------
# Monte Carlo operators


@njit
def _mc_rollouts_nb(s0, e0s, cdf, phi, gamma, rho, kind, lam, beta, k_trunc, thr, r_pi,
                    u, stop_u, sampled, out, cap_mass):
    n_states = cdf.shape[0]
    n = phi.shape[1]
    horizon = u.shape[1]
    e = np.empty(n)
    for i in range(u.shape[0]):
        for j in range(n):
            e[j] = e0s[i, j]
        s = s0
        w = 1.0
        out[i, n_states] = r_pi[s]
        stopped = False
        for t in range(horizon):
            x = u[i, t]
            s2 = 0
            while s2 < n_states - 1 and cdf[s, s2] <= x:
                s2 += 1
            g = gamma[s2]
            r = rho[s, s2]
            sq = 0.0
            for j in range(n):
                sq += e[j] * e[j]
            lt = lambda_kernel(kind, lam, beta, k_trunc, thr[s, s2], g, r, math.sqrt(sq))
            f = lt * g * r
            for j in range(n):
                e[j] = f * e[j] + phi[s2, j]
            if sampled:
                w *= g
                if stop_u[i, t] >= lt:
                    out[i, s2] += w
                    stopped = True
                    break
                out[i, n_states] += w * r_pi[s2]
            else:
                out[i, s2] += w * g * (1.0 - lt)
                w *= lt * g
                out[i, n_states] += w * r_pi[s2]
                if w == 0.0:
                    stopped = True
                    break
            s = s2
        if not stopped:
            cap_mass[i] = w


def _lambda_vec(kind, lam, beta, k_trunc, c, g, r, norm):
    """Vectorized twin of :func:`lambda_kernel`."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == 0:
            return np.full(r.shape, lam)
        if kind == 1:
            x = g * r * norm
            return np.where(x <= c, beta, beta * c / x)
        safe = np.where(r == 0.0, 1.0, r)
        if kind == 2:
            return np.where(r == 0.0, 0.0, beta * np.minimum(1.0, r) / safe)
        lt = np.where(r == 0.0, 0.0, np.minimum(k_trunc, r) / safe)
        x = lt * g * r * norm
        return np.where(x <= c, beta * lt, beta * lt * c / np.where(x == 0, 1.0, x))


def _mc_rollouts_np(s0, e0s, cdf, phi, gamma, rho, kind, lam, beta, k_trunc, thr, r_pi,
                    u, stop_u, sampled, out, cap_mass):
    m, horizon = u.shape
    n_states = cdf.shape[0]
    e = np.array(e0s)
    s = np.full(m, s0)
    w = np.ones(m)
    live = np.ones(m, dtype=bool)
    rows = np.arange(m)
    out[:, n_states] = r_pi[s0]
    for t in range(horizon):
        if not live.any():
            break
        s2 = (u[:, t, None] >= cdf[s]).sum(axis=1)
        s2 = np.minimum(s2, n_states - 1)
        g = gamma[s2]
        r = rho[s, s2]
        lt = _lambda_vec(kind, lam, beta, k_trunc, thr[s, s2], g, r, np.linalg.norm(e, axis=1))
        e = (lt * g * r)[:, None] * e + phi[s2]
        if sampled:
            w = np.where(live, w * g, w)
            stop = live & (stop_u[:, t] >= lt)
            np.add.at(out, (rows[stop], s2[stop]), w[stop])
            cont = live & ~stop
            out[cont, n_states] += w[cont] * r_pi[s2[cont]]
            live = cont
        else:
            np.add.at(out, (rows[live], s2[live]), (w * g * (1.0 - lt))[live])
            w = np.where(live, w * lt * g, w)
            out[live, n_states] += (w * r_pi[s2])[live]
            live = live & (w != 0.0)
        s = np.where(live, s2, s)
    cap_mass[live] = w[live]


def _mc_rollouts_custom(s0, e0s, y0s, mdp, phi, scheme, rho, r_pi, cdf, u, stop_u, sampled,
                        out, cap_mass):
    n_states = mdp.n_states
    gamma = mdp.discount
    for i in range(u.shape[0]):
        e = np.array(e0s[i])
        y = int(y0s[i])
        s = s0
        w = 1.0
        out[i, n_states] = r_pi[s]
        stopped = False
        for t in range(u.shape[1]):
            s2 = min(int(np.searchsorted(cdf[s], u[i, t], side="right")), n_states - 1)
            y = scheme.memory_step(y, s2, n_states)
            lt = scheme.lambda_value(y, e, gamma[s2], rho[s, s2], n_states)
            e = lt * gamma[s2] * rho[s, s2] * e + phi[s2]
            if sampled:
                w *= gamma[s2]
                if stop_u[i, t] >= lt:
                    out[i, s2] += w
                    stopped = True
                    break
                out[i, n_states] += w * r_pi[s2]
            else:
                out[i, s2] += w * gamma[s2] * (1.0 - lt)
                w *= lt * gamma[s2]
                out[i, n_states] += w * r_pi[s2]
                if w == 0.0:
                    stopped = True
                    break
            s = s2
        if not stopped:
            cap_mass[i] = w


def default_horizon(mdp, tol=1e-8, fallback=None):
    """Smallest H with ``max(gamma)**H < tol``; ``fallback`` when some gamma is 1."""
    gmax = float(np.max(mdp.discount))
    if gmax < 1.0:
        if gmax == 0.0:
            return 1
        return int(math.floor(math.log(tol) / math.log(gmax))) + 1
    if fallback is None:
        raise ConfigError("discount reaches 1: give the horizon cap explicitly")
    return int(fallback)


def autocorr_time(x, max_lag=None):
    """Integrated autocorrelation time (initial-positive-sequence truncation)."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    n = x.size
    var = x @ x / n
    if var == 0:
        return 1.0
    max_lag = max_lag or min(n // 4, 10_000)
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:max_lag] / (n * var)
    tau = 1.0
    for k in range(1, max_lag):
        if acf[k] <= 0:
            break
        tau += 2 * acf[k]
    return float(tau)


def mc_operator_history_dependent(mdp, features, scheme, warmup=100_000, samples=10_000,
                                  horizon_cap=None, seed=0, estimator="weighted",
                                  burn_in=None, states=None):
    """Monte Carlo operator for a (possibly history-dependent) lambda scheme.

    Initial ``(y_0, e_0)`` given ``S_0 = s`` are drawn from the visits to
    ``s`` of one behavior run of length ``warmup`` (after ``burn_in``
    steps), approximating the invariant law of the state-trace process.
    From each draw the target chain is simulated with the same trace
    recursion. With ``estimator="weighted"`` the stopping decision is
    integrated out (the continuation probabilities become weights), which
    has lower variance than ``estimator="sampled"`` that draws the stop.

    The horizon cap truncates rollouts; the leftover continuation weight is
    reported as ``cap_mass`` (its mean over rollouts), bounding the bias.
    """
    if estimator not in ("weighted", "sampled"):
        raise ConfigError(f"unknown estimator {estimator!r}")
    if isinstance(scheme, CompositeScheme):
        raise ConfigError("estimate composite operators block by block and combine them "
                          "with composite_operator")
    from .traces import run_traces
    n_states = mdp.n_states
    horizon = default_horizon(mdp) if horizon_cap is None else int(horizon_cap)
    if burn_in is None:
        burn_in = min(1000, warmup // 10)
    run = run_traces(mdp, features, scheme, warmup, seed=seed)
    pool_s = run.states[burn_in:]
    pool_e = run.traces[burn_in:]
    pool_y = run.memories[burn_in:]
    rho = mdp.ratio_matrix()
    r_pi = mdp.expected_reward
    cdf = np.cumsum(mdp.p_target, axis=1)
    cdf[:, -1] = 1.0
    pick_rng = stream(seed, "pool")
    mc_rng = stream(seed, "mc")
    sampled = estimator == "sampled"
    p_t = np.zeros((n_states, n_states))
    r_t = np.zeros(n_states)
    cov = np.zeros((n_states, n_states + 1, n_states + 1))
    n_s = np.zeros(n_states)
    cap_total, cap_count = 0.0, 0
    targets = range(n_states) if states is None else states
    compiled = scheme.is_compiled
    if compiled:
        thr = scheme.threshold_matrix(n_states)
    for s in targets:
        idx = np.flatnonzero(pool_s == s)
        if idx.size == 0:
            raise ConditionError(f"state {s} never visited during warmup")
        pick = idx[pick_rng.integers(0, idx.size, samples)]
        u = mc_rng.random((samples, horizon))
        stop_u = mc_rng.random((samples, horizon)) if sampled else np.empty((0, 0))
        out = np.zeros((samples, n_states + 1))
        cap = np.zeros(samples)
        if compiled:
            args = (s, np.ascontiguousarray(pool_e[pick]), cdf, features.phi, mdp.discount,
                    rho, scheme.kind_code, scheme.lam, scheme.beta, scheme.k_trunc, thr, r_pi,
                    u, stop_u, sampled, out, cap)
            if _accel.use_numba():
                _mc_rollouts_nb(*args)
            else:
                _mc_rollouts_np(*args)
        else:
            _mc_rollouts_custom(s, pool_e[pick], pool_y[pick], mdp, features.phi, scheme, rho,
                                r_pi, cdf, u, stop_u, sampled, out, cap)
        mean = out.mean(axis=0)
        p_t[s] = mean[:n_states]
        r_t[s] = mean[n_states]
        cov[s] = np.cov(out, rowvar=False)
        n_s[s] = samples
        cap_total += cap.sum()
        cap_count += samples
    op = BellmanOperator(p_t, r_t, "monte_carlo", n_s, cov,
                         cap_mass=cap_total / max(cap_count, 1), horizon=horizon)
    tau = autocorr_time(np.linalg.norm(pool_e, axis=1)[: min(pool_e.shape[0], 200_000)])
    op.notes.append(f"warmup={warmup}, burn_in={burn_in}, trace-norm autocorrelation "
                    f"time {tau:.1f} steps")
    return op


# ---------------------------------------------------------------------------
# Theorem 3 style checks


@dataclass
class Theorem3Report:
    nonnegative: bool
    max_row_sum: float
    substochastic: bool
    spectral_radius: float
    contraction: bool
    fixed_point_residual: float
    fixed_point_ok: bool
    weight_vector: np.ndarray
    weighted_ok: bool
    weighted_modulus: float

    @property
    def passed(self):
        return (self.nonnegative and self.substochastic and self.contraction
                and self.fixed_point_ok and self.weighted_ok)

    def rows(self):
        return [
            ("nonnegative", self.nonnegative, ""),
            ("row_sums_le_1", self.substochastic, f"{self.max_row_sum:.12g}"),
            ("spectral_radius_lt_1", self.contraction, f"{self.spectral_radius:.12g}"),
            ("fixed_point", self.fixed_point_ok, f"{self.fixed_point_residual:.3g}"),
            ("weighted_sup_norm_contraction", self.weighted_ok, f"{self.weighted_modulus:.12g}"),
        ]


def verify_theorem3(op, mdp, v_pi=None, fp_tol=1e-10, n_se=3.0):
    """Substochasticity, spectral radius, fixed point and a contraction weight.

    For exact operators the fixed-point residual must be below ``fp_tol``;
    for Monte Carlo operators each state's residual must be within ``n_se``
    standard errors (``fixed_point_residual`` then reports the largest
    residual in standard-error units).
    """
    p = op.p_tilde
    if v_pi is None:
        v_pi = value_function(mdp)
    nonneg = bool(np.all(p >= -1e-12))
    rows = p.sum(axis=1)
    max_row = float(rows.max())
    subst = max_row <= 1.0 + ROW_SUM_TOL
    sigma = spectral_radius_nonneg(np.abs(p))
    contraction = sigma < 1.0
    resid = op.apply(v_pi) - v_pi
    if op.is_exact:
        fp = float(np.max(np.abs(resid)))
        fp_ok = fp < fp_tol
    else:
        se = op.functional_se(v_pi)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, np.abs(resid) / se, np.where(np.abs(resid) > 1e-12, np.inf, 0))
        # truncation bias may add to the residual
        fp = float(np.max(z))
        fp_ok = fp <= n_se
    n = p.shape[0]
    w = np.full(n, np.nan)
    w_ok, modulus = False, math.nan
    if contraction:
        try:
            w = np.linalg.solve(np.eye(n) - np.abs(p), np.ones(n))
            pw = np.abs(p) @ w
            modulus = float(np.max(pw / w))
            w_ok = bool(np.all(w > 0) and np.all(pw < w))
        except np.linalg.LinAlgError:
            pass
    return Theorem3Report(nonneg, max_row, subst, float(sigma), contraction, fp, fp_ok, w,
                          w_ok, modulus)


# ---------------------------------------------------------------------------
# projected equations, oblique projections, kappa


def weighted_norm(a, weights):
    """Operator norm of ``a`` w.r.t. ``|x|_w = sqrt(sum w x^2)``."""
    d = np.sqrt(np.asarray(weights, dtype=np.float64))
    return float(np.linalg.norm(d[:, None] * np.asarray(a) / d[None, :], 2))


def weighted_projection(features, weights):
    """Orthogonal projection onto span(Phi) in the ``weights``-weighted norm."""
    phi = features.phi if hasattr(features, "phi") else np.asarray(features)
    dphi = phi * np.asarray(weights)[:, None]
    return phi @ np.linalg.solve(phi.T @ dphi, dphi.T)


def projected_coefficients(op, features, zeta):
    """``(A, b)`` with ``Phi^T D (T Phi theta - Phi theta) = A theta + b``."""
    phi = features.phi
    dphi = phi * np.asarray(zeta)[:, None]
    a = dphi.T @ (op.p_tilde @ phi - phi)
    b = dphi.T @ op.r_tilde
    return a, b


def td_solution(op, features, zeta):
    """theta solving the projected equation ``Phi^T D (T Phi theta - Phi theta) = 0``."""
    a, b = projected_coefficients(op, features, zeta)
    if np.linalg.cond(a) > 1e12:
        raise ConditionError("projected equation has no unique solution")
    return np.linalg.solve(a, -b)


def td_lambda_solution(mdp, features, lam, zeta=None):
    """Asymptotic TD(lambda) parameter for constant or state-dependent lambda."""
    if zeta is None:
        zeta = behavior_stationary_dist(mdp)
    return td_solution(exact_operator_state_dependent(mdp, lam), features, zeta)


@dataclass
class ObliqueAnalysis:
    v_td: np.ndarray
    theta: np.ndarray
    kappa: float = math.nan
    sigma_f: float = math.nan
    xi_weights: np.ndarray = None
    path_gap: float = 0.0
    bias: float = math.nan
    best_error: float = math.nan
    bound_holds: bool = True


def projected_solution(op, features, zeta, v_pi, rtol=1e-9):
    """Oblique-projection form of the TD solution, checked against a direct solve.

    ``v_td = Phi (Phi^T D (I - P_tilde) Phi)^{-1} Phi^T D (I - P_tilde) v_pi``
    uses only ``v_pi``; the direct path solves the projected equation with
    ``r_tilde``. The two agree when ``v_pi`` is the operator's fixed point.
    """
    phi = features.phi
    if not features.full_column_rank:
        raise ConditionError("features are not linearly independent")
    n = op.n_states
    dphi = phi * np.asarray(zeta)[:, None]
    m = dphi.T @ (np.eye(n) - op.p_tilde)
    lhs = m @ phi
    if np.linalg.cond(lhs) > 1e12:
        raise ConditionError("projected system is singular: no unique TD solution")
    theta = np.linalg.solve(lhs, m @ v_pi)
    theta_direct = td_solution(op, features, zeta)
    gap = float(np.linalg.norm(theta - theta_direct) / max(np.linalg.norm(theta), 1e-300))
    if gap > rtol and op.is_exact:
        raise ConditionError(f"projected-solution paths disagree (relative gap {gap:.3g})")
    return ObliqueAnalysis(phi @ theta, theta, path_gap=gap)


def kappa_matrix(op, features, zeta, xi=None):
    """``F = (Psi^T Phi)^{-1} (Psi^T Xi^{-1} Psi) (Phi^T Psi)^{-1} (Phi^T Xi Phi)``."""
    phi = features.phi
    zeta = np.asarray(zeta, dtype=np.float64)
    xi = zeta if xi is None else np.asarray(xi, dtype=np.float64)
    if np.any(xi <= 0):
        raise ConfigError("xi must be positive")
    n = op.n_states
    psi = (np.eye(n) - op.p_tilde).T @ (phi * zeta[:, None])
    ptp = psi.T @ phi
    if np.linalg.cond(ptp) > 1e12:
        raise ConditionError("Psi^T Phi is singular")
    f = np.linalg.solve(ptp, psi.T @ (psi / xi[:, None])) @ np.linalg.solve(
        ptp.T, phi.T @ (phi * xi[:, None]))
    return f


def kappa_bound(op, features, zeta, xi=None, v_pi=None):
    """kappa = sqrt(sigma(F) - 1) and, given ``v_pi``, the bias bound check.

    ``|v_td - Pi_xi v_pi|_xi <= kappa |v_pi - Pi_xi v_pi|_xi``.
    """
    zeta = np.asarray(zeta, dtype=np.float64)
    xi = zeta if xi is None else np.asarray(xi, dtype=np.float64)
    f = kappa_matrix(op, features, zeta, xi)
    sigma_f = spectral_radius(f)
    if sigma_f < 1.0 - 1e-9:
        raise ConditionError(f"sigma(F) = {sigma_f:.12g} < 1")
    kappa = math.sqrt(max(sigma_f - 1.0, 0.0))
    out = ObliqueAnalysis(None, None, kappa, sigma_f, xi)
    if v_pi is not None:
        bias, best = bias_ratio_parts(op, features, zeta, xi, v_pi)
        # v_pi need not be the operator's fixed point here, so use the oblique form only
        obl = _oblique_operator(op, features, zeta)
        out.v_td = obl @ np.asarray(v_pi, dtype=np.float64)
        out.theta = np.linalg.lstsq(features.phi, out.v_td, rcond=None)[0]
        out.bias, out.best_error = bias, best
        out.bound_holds = bias <= kappa * best * (1 + 1e-9) + 1e-12
    return out


def _oblique_operator(op, features, zeta):
    phi = features.phi
    n = op.n_states
    psi = (np.eye(n) - op.p_tilde).T @ (phi * zeta[:, None])
    return phi @ np.linalg.solve(psi.T @ phi, psi.T)


def bias_ratio_parts(op, features, zeta, xi, v):
    """(|v_td - Pi_xi v|_xi, |v - Pi_xi v|_xi) for a value vector ``v``."""
    obl = _oblique_operator(op, features, np.asarray(zeta))
    proj = weighted_projection(features, xi)
    sx = np.sqrt(xi)
    pv = proj @ v
    return float(np.linalg.norm(sx * (obl @ v - pv))), float(np.linalg.norm(sx * (v - pv)))


@dataclass
class TightnessResult:
    kappa: float
    best_ratio: float
    evaluations: int
    exceeded: bool
    history: np.ndarray

    @property
    def relative_gap(self):
        return (self.kappa - self.best_ratio) / self.kappa if self.kappa > 0 else 0.0


def kappa_tightness(mdp, op, features, zeta, xi=None, draws=10_000, seed=0, step0=0.5):
    """Random search over reward vectors for the worst bias ratio.

    Each draw perturbs the incumbent reward vector ``r_pi`` with Gaussian
    noise and keeps the candidate if its ratio
    ``|v_td - Pi v_pi| / |v_pi - Pi v_pi|`` (with ``v_pi = (I - P Gamma)^{-1} r_pi``)
    is larger; the step shrinks after runs of failures. The first draw is
    a plain Gaussian reward vector.
    """
    zeta = np.asarray(zeta, dtype=np.float64)
    xi = zeta if xi is None else np.asarray(xi, dtype=np.float64)
    kappa = kappa_bound(op, features, zeta, xi).kappa
    n = mdp.n_states
    rng = stream(seed, "search")
    solve_v = np.linalg.inv(np.eye(n) - mdp.p_gamma)
    obl = _oblique_operator(op, features, zeta)
    proj = weighted_projection(features, xi)
    sx = np.sqrt(xi)

    def ratio(r):
        v = solve_v @ r
        pv = proj @ v
        den = np.linalg.norm(sx * (v - pv))
        return np.linalg.norm(sx * (obl @ v - pv)) / den if den > 1e-300 else 0.0

    best_r = rng.standard_normal(n)
    best = ratio(best_r)
    step, fails = step0, 0
    hist = np.empty(draws)
    hist[0] = best
    exceeded = best > kappa * (1 + 1e-9)
    for k in range(1, draws):
        cand = best_r + step * np.linalg.norm(best_r) / math.sqrt(n) * rng.standard_normal(n)
        val = ratio(cand)
        exceeded |= val > kappa * (1 + 1e-9)
        if val > best:
            best, best_r, fails = val, cand, 0
        else:
            fails += 1
            if fails >= 50:
                step, fails = step * 0.5, 0
        hist[k] = best
    return TightnessResult(kappa, float(best), draws, bool(exceeded), hist)


# ---------------------------------------------------------------------------
# counterexample


@dataclass
class CheckRow:
    name: str
    value: object
    expected: object
    tolerance: float
    passed: bool


@dataclass
class CounterexampleReport:
    rows: list

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def table(self):
        lines = [f"{'check':<34} {'value':>28} {'expected':>28}  result"]
        for r in self.rows:
            lines.append(f"{r.name:<34} {_fmt(r.value):>28} {_fmt(r.expected):>28}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def _fmt(x):
    if isinstance(x, np.ndarray):
        return np.array2string(np.round(x, 4), separator=",").replace("\n", "")
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def counterexample_suite(gamma=0.95):
    """Two-state cycle with lambda = (0, 1): the projected TD matrix is not
    negative definite even though the operator is a contraction.
    """
    from .environments import build_two_state
    from .mdp import FeatureMap
    mdp = build_two_state(gamma)
    zeta = behavior_stationary_dist(mdp)
    op = exact_operator_state_dependent(mdp, [0.0, 1.0])
    phi2 = FeatureMap(np.array([[3.0, 1.0], [1.0, 1.0]]))
    a, _ = projected_coefficients(op, phi2, zeta)
    expected = np.array([[0.4862, -0.1713], [0.7787, -0.0738]])
    rows = [CheckRow("P_tilde", op.p_tilde, np.array([[gamma ** 2, 0.0], [gamma, 0.0]]), 1e-12,
                     bool(np.allclose(op.p_tilde, [[gamma ** 2, 0.0], [gamma, 0.0]],
                                      atol=1e-12)))]
    rows.append(CheckRow("Phi^T D (P_tilde - I) Phi", a, expected, 1e-3,
                         bool(np.max(np.abs(a - expected)) <= 1e-3)))
    eig = np.linalg.eigvals(a)
    rows.append(CheckRow("eigenvalues have positive real part", eig, "Re > 0", 0.0,
                         bool(np.all(eig.real > 0))))
    proj = weighted_projection(phi2, zeta)
    nrm = weighted_norm(proj @ op.p_tilde, zeta)
    rows.append(CheckRow("|Pi P_tilde|_zeta, Phi = [[3,1],[1,1]]", nrm, 1.31, 0.01,
                         abs(nrm - 1.31) <= 0.01))
    phi1 = FeatureMap(np.array([[3.0], [1.0]]))
    sig = spectral_radius(weighted_projection(phi1, zeta) @ op.p_tilde)
    rows.append(CheckRow("sigma(Pi P_tilde), Phi = (3,1)^T", sig, 1.10, 0.01,
                         abs(sig - 1.10) <= 0.01))
    t3 = verify_theorem3(op, mdp)
    rows.append(CheckRow("sigma(P_tilde) < 1", t3.spectral_radius, "< 1", 0.0, t3.contraction))
    return CounterexampleReport(rows)


# ---------------------------------------------------------------------------
# Theorem 2: LSTD limit vs projected generalized Bellman equation


@dataclass
class Theorem2Report:
    a_lstd: np.ndarray
    b_lstd: np.ndarray
    a_lstd_se: np.ndarray
    b_lstd_se: np.ndarray
    a_op: np.ndarray
    b_op: np.ndarray
    a_op_se: np.ndarray
    b_op_se: np.ndarray
    max_z: float
    agree: bool
    inconclusive: bool
    n_se: float

    @property
    def z_scores(self):
        za = np.abs(self.a_lstd - self.a_op) / np.sqrt(self.a_lstd_se ** 2 + self.a_op_se ** 2)
        zb = np.abs(self.b_lstd - self.b_op) / np.sqrt(self.b_lstd_se ** 2 + self.b_op_se ** 2)
        return za, zb


def operator_projection_se(op, features, zeta):
    """Standard errors of ``A = Phi^T D (P_tilde - I) Phi`` and ``b = Phi^T D r_tilde``.

    Rows of a Monte Carlo operator are independent across states, so the
    variances add state by state.
    """
    phi = features.phi
    n_states = op.n_states
    k = phi.shape[1]
    if op.cov is None:
        return np.zeros((k, k)), np.zeros(k)
    zeta = np.asarray(zeta)
    var_a = np.zeros((k, k))
    var_b = np.zeros(k)
    for s in range(n_states):
        if not np.isfinite(op.n_samples[s]):
            continue
        c = op.cov[s] / op.n_samples[s]
        cp = c[:n_states, :n_states]
        vj = np.einsum("aj,ab,bj->j", phi, cp, phi)
        var_a += (zeta[s] * phi[s]) [:, None] ** 2 * vj[None, :]
        var_b += (zeta[s] * phi[s]) ** 2 * c[n_states, n_states]
    return np.sqrt(var_a), np.sqrt(var_b)


def verify_theorem2(mdp, features, scheme, steps=1_000_000, seed=0, n_batches=50,
                    mc_samples=10_000, mc_warmup=100_000, n_se=3.0, op=None,
                    rel_precision=0.05):
    """Compare the LSTD limit with the projected generalized Bellman equation.

    Left side: ``A, b`` from one behavior run of ``steps`` transitions, with
    batch-means standard errors. Right side: ``Phi^T D (P_tilde - I) Phi``
    and ``Phi^T D r_tilde`` from a Monte Carlo operator built on an
    independent seed (or a given exact ``op``). Agreement means every entry
    differs by at most ``n_se`` combined standard errors. The result is
    flagged inconclusive when the combined errors are larger than
    ``rel_precision`` times the largest coefficient.
    """
    from .traces import run_traces
    zeta = behavior_stationary_dist(mdp)
    run = run_traces(mdp, features, scheme, steps, seed=seed)
    burn = min(1000, steps // 100)
    acc = LstdAccumulator(features.n_features).accumulate_run(run, features, burn)
    batches = batch_accumulators(run, features, n_batches, burn_in=burn)
    a_b = np.stack([b.a_matrix for b in batches])
    b_b = np.stack([b.b_vector for b in batches])
    a_se = a_b.std(axis=0, ddof=1) / math.sqrt(n_batches)
    b_se = b_b.std(axis=0, ddof=1) / math.sqrt(n_batches)
    if op is None:
        op = mc_operator_history_dependent(mdp, features, scheme, warmup=mc_warmup,
                                           samples=mc_samples, seed=seed + 7919)
    a_op, b_op = projected_coefficients(op, features, zeta)
    a_op_se, b_op_se = operator_projection_se(op, features, zeta)
    se_a = np.sqrt(a_se ** 2 + a_op_se ** 2)
    se_b = np.sqrt(b_se ** 2 + b_op_se ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        za = np.where(se_a > 0, np.abs(acc.a_matrix - a_op) / se_a,
                      np.where(np.abs(acc.a_matrix - a_op) > 1e-12, np.inf, 0.0))
        zb = np.where(se_b > 0, np.abs(acc.b_vector - b_op) / se_b,
                      np.where(np.abs(acc.b_vector - b_op) > 1e-12, np.inf, 0.0))
    max_z = float(max(za.max(), zb.max()))
    scale = max(np.abs(a_op).max(), np.abs(b_op).max())
    inconclusive = bool(max(se_a.max(), se_b.max()) > rel_precision * scale)
    return Theorem2Report(acc.a_matrix, acc.b_vector, a_se, b_se, a_op, b_op, a_op_se,
                          b_op_se, max_z, max_z <= n_se, inconclusive, n_se)
