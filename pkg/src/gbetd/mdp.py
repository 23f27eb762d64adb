"""Finite two-chain model for off-policy evaluation.

A :class:`TabularMdp` holds the target chain ``P``, the behavior chain
``P_o``, per-transition rewards ``r(s, s')`` and per-state discounts
``gamma(s)``. Value functions follow the convention

    v(s) = E_s[ r_pi(S_0) + sum_t gamma(S_1)...gamma(S_t) r_pi(S_t) ],

so that ``v = r_pi + P diag(gamma) v``.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ConditionError, StructureError
from .rng import stream

STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    p_target: np.ndarray
    p_behavior: np.ndarray
    reward: np.ndarray
    discount: np.ndarray
    reward_noise: float = 0.0
    name: str = ""

    def __post_init__(self):
        for attr in ("p_target", "p_behavior", "reward", "discount"):
            arr = np.array(getattr(self, attr), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        n = self.discount.shape[0] if self.discount.ndim == 1 else -1
        if n <= 0:
            raise StructureError("discount must be a non-empty vector")
        for attr in ("p_target", "p_behavior", "reward"):
            if getattr(self, attr).shape != (n, n):
                raise StructureError(
                    f"{attr} has shape {getattr(self, attr).shape}, expected {(n, n)}")
        if self.reward_noise < 0:
            raise StructureError("reward_noise must be nonnegative")

    @property
    def n_states(self):
        return self.discount.shape[0]

    @property
    def expected_reward(self):
        """r_pi(s) = sum_s' P[s, s'] r(s, s')."""
        return np.einsum("ij,ij->i", self.p_target, self.reward)

    @property
    def p_gamma(self):
        """P @ diag(gamma)."""
        return self.p_target * self.discount[None, :]

    def ratio_matrix(self):
        """Importance ratios rho(s, s') for every pair, 0 where both are 0."""
        p, po = self.p_target, self.p_behavior
        if np.any((po == 0) & (p > 0)):
            s, s2 = np.argwhere((po == 0) & (p > 0))[0]
            raise ConditionError(
                f"absolute continuity fails at ({s}, {s2}): P > 0 but P_o = 0")
        out = np.zeros_like(p)
        mask = po > 0
        out[mask] = p[mask] / po[mask]
        return out


@dataclass(frozen=True, eq=False)
class FeatureMap:
    phi: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=np.float64)
        if phi.ndim != 2:
            raise StructureError("feature matrix must be 2-D (states x features)")
        if not np.all(np.isfinite(phi)):
            raise StructureError("feature matrix has non-finite entries")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def n_features(self):
        return self.phi.shape[1]

    @property
    def rank(self):
        return int(np.linalg.matrix_rank(self.phi))

    @property
    def full_column_rank(self):
        return self.rank == self.n_features

    @property
    def max_norm(self):
        return float(np.max(np.linalg.norm(self.phi, axis=1)))


@dataclass
class ValidationReport:
    row_stochastic: bool
    absolutely_continuous: bool
    discounted: bool
    irreducible: bool
    spectral_radius: float
    messages: list = field(default_factory=list)

    @property
    def passed(self):
        return (self.row_stochastic and self.absolutely_continuous
                and self.discounted and self.irreducible)

    def rows(self):
        return [
            ("row_stochastic", self.row_stochastic),
            ("absolute_continuity", self.absolutely_continuous),
            ("spectral_radius_PGamma_lt_1", self.discounted),
            ("behavior_irreducible", self.irreducible),
        ]


def spectral_radius_nonneg(a, tol=1e-12, max_iter=10_000):
    """Perron root of a nonnegative square matrix.

    Power iteration on ``A + I`` (primitive whenever ``A`` is irreducible)
    with Collatz-Wielandt bounds as the stopping rule. Falls back to a dense
    eigen-solve if the bounds fail to close within ``max_iter``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return 0.0
    if np.any(a < 0):
        raise ValueError("matrix has negative entries; use spectral_radius")
    m = a + np.eye(a.shape[0])
    x = np.ones(a.shape[0])
    for _ in range(max_iter):
        y = m @ x
        ratios = y / x
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= tol * hi:
            return float(0.5 * (lo + hi) - 1.0)
        x = y / np.linalg.norm(y)
        if x.min() < 1e-280:
            break
    return spectral_radius(a)


def spectral_radius(a):
    """Largest eigenvalue modulus of an arbitrary square matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def is_irreducible(p):
    """Strong connectivity of the support graph of ``p``."""
    n_comp, _ = connected_components(np.asarray(p) > 0, directed=True,
                                     connection="strong")
    return n_comp == 1


def validate(mdp):
    """Check the standing assumptions on the two chains."""
    msgs = []
    rows_ok = True
    for name, mat in (("P", mdp.p_target), ("P_o", mdp.p_behavior)):
        if np.any(mat < 0):
            rows_ok = False
            msgs.append(f"{name} has negative entries")
        dev = np.max(np.abs(mat.sum(axis=1) - 1.0))
        if dev > STOCHASTIC_TOL:
            rows_ok = False
            msgs.append(f"{name} row sums deviate from 1 by {dev:.3g}")
    bad = (mdp.p_behavior == 0) & (mdp.p_target > 0)
    ac_ok = not np.any(bad)
    if not ac_ok:
        msgs.append(f"absolute continuity fails on {int(bad.sum())} transitions")
    gamma = mdp.discount
    if np.any((gamma < 0) | (gamma > 1)):
        msgs.append("discount outside [0, 1]")
    sigma = spectral_radius_nonneg(np.abs(mdp.p_gamma))
    disc_ok = sigma < 1.0
    if not disc_ok:
        msgs.append(f"spectral radius of P Gamma is {sigma:.6g} >= 1")
    irr = is_irreducible(mdp.p_behavior)
    if not irr:
        msgs.append("behavior chain is reducible")
    return ValidationReport(rows_ok, ac_ok, disc_ok, irr, sigma, msgs)


def importance_ratio(mdp, s, s_next):
    p, po = mdp.p_target[s, s_next], mdp.p_behavior[s, s_next]
    if po == 0.0:
        if p > 0.0:
            raise ConditionError(
                f"absolute continuity fails at ({s}, {s_next}): P > 0 but P_o = 0")
        return 0.0
    return p / po


def value_function(mdp):
    """Solve (I - P Gamma) v = r_pi by LU with partial pivoting."""
    n = mdp.n_states
    r_pi = mdp.expected_reward
    lhs = np.eye(n) - mdp.p_gamma
    try:
        v = np.linalg.solve(lhs, r_pi)
    except np.linalg.LinAlgError as exc:
        raise ConditionError("I - P Gamma is singular") from exc
    resid = np.max(np.abs(v - r_pi - mdp.p_gamma @ v))
    if not np.isfinite(resid) or resid > 1e-10 * max(1.0, np.max(np.abs(v))):
        raise ConditionError(f"value function residual {resid:.3g} too large")
    return v


def behavior_stationary_dist(mdp):
    """Invariant distribution zeta_S of the behavior chain."""
    po = mdp.p_behavior
    if not is_irreducible(po):
        raise ConditionError("behavior chain is reducible; stationary law not unique")
    n = mdp.n_states
    a = po.T - np.eye(n)
    a[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    zeta = np.linalg.solve(a, rhs)
    # one step of the chain removes most of the solve's rounding
    zeta = np.clip(zeta @ po, 0.0, None)
    zeta /= zeta.sum()
    return zeta


def rollout_value_estimate(mdp, n_rollouts, horizon, seed=0):
    """Monte Carlo estimate of v_pi with truncated target-policy rollouts.

    Returns ``(mean, stderr)`` per state. Truncation bias is bounded by
    ``sigma(P Gamma)**horizon`` times the reward scale.
    """
    rng = stream(seed, "rollouts")
    n = mdp.n_states
    cdf = np.cumsum(mdp.p_target, axis=1)
    cdf[:, -1] = 1.0
    r_pi = mdp.expected_reward
    means, ses = np.empty(n), np.empty(n)
    for s0 in range(n):
        state = np.full(n_rollouts, s0)
        weight = np.ones(n_rollouts)
        total = np.zeros(n_rollouts)
        for _ in range(horizon):
            if mdp.reward_noise > 0:
                total += weight * (r_pi[state] + mdp.reward_noise * rng.standard_normal(n_rollouts))
            else:
                total += weight * r_pi[state]
            u = rng.random(n_rollouts)
            state = (u[:, None] > cdf[state]).sum(axis=1)
            weight = weight * mdp.discount[state]
        means[s0] = total.mean()
        ses[s0] = total.std(ddof=1) / np.sqrt(n_rollouts)
    return means, ses


# ---------------------------------------------------------------------------
# text file format

_MATRIX_BLOCKS = ("p_target", "p_behavior", "reward")


def save_mdp(path, mdp, features=None):
    """Write ``mdp`` (and optionally its features) in the ``.mdp`` text format."""
    n = mdp.n_states
    lines = [f"# {mdp.name}" if mdp.name else "# tabular mdp", f"n_states {n}"]
    if features is not None:
        lines.append(f"n_features {features.n_features}")
    if mdp.reward_noise:
        lines.append(f"reward_noise {mdp.reward_noise!r}")
    for key in _MATRIX_BLOCKS:
        lines.append(key)
        lines.extend(" ".join(repr(float(x)) for x in row) for row in getattr(mdp, key))
    lines.append("discount")
    lines.append(" ".join(repr(float(x)) for x in mdp.discount))
    if features is not None:
        lines.append("features")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in features.phi)
    Path(path).write_text("\n".join(lines) + "\n")


def load_mdp(path):
    """Parse an ``.mdp`` file; returns ``(TabularMdp, FeatureMap or None)``."""
    tokens = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens.append(line.split())
    header, blocks, current = {}, {}, None
    for parts in tokens:
        key = parts[0]
        if key in ("n_states", "n_features", "reward_noise", "name"):
            if len(parts) != 2:
                raise StructureError(f"malformed header line: {' '.join(parts)}")
            header[key] = parts[1]
            current = None
        elif key in _MATRIX_BLOCKS + ("discount", "features"):
            current = key
            blocks[current] = []
        elif current is None:
            raise StructureError(f"data outside a block: {' '.join(parts)}")
        else:
            try:
                blocks[current].append([float(x) for x in parts])
            except ValueError as exc:
                raise StructureError(f"non-numeric entry in block {current}") from exc
    if "n_states" not in header:
        raise StructureError("missing n_states")
    n = int(header["n_states"])
    for key in _MATRIX_BLOCKS:
        rows = blocks.get(key)
        if rows is None or len(rows) != n or any(len(r) != n for r in rows):
            raise StructureError(f"block {key} must be {n} rows of {n} numbers")
    disc = blocks.get("discount")
    if disc is None:
        raise StructureError("missing discount block")
    disc = [x for row in disc for x in row]
    if len(disc) != n:
        raise StructureError(f"discount must have {n} entries")
    mdp = TabularMdp(np.array(blocks["p_target"]), np.array(blocks["p_behavior"]),
                     np.array(blocks["reward"]), np.array(disc),
                     reward_noise=float(header.get("reward_noise", 0.0)),
                     name=Path(path).stem)
    features = None
    if "features" in blocks:
        rows = blocks["features"]
        if len(rows) != n:
            raise StructureError(f"features must have {n} rows")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise StructureError("ragged feature rows")
        if "n_features" in header and int(header["n_features"]) != widths.pop():
            raise StructureError("n_features does not match feature rows")
        features = FeatureMap(np.array(rows))
    return mdp, features
