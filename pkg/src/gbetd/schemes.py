"""History-dependent lambda schemes.

A scheme couples a finite memory process ``y_t = g(y_{t-1}, S_t)`` with a
rule ``lambda_t = lambda(y_t, e_{t-1})``. Shipped schemes use one of two
memories: ``trivial`` (a single state, id 0) or ``pair`` where
``y_t = (S_{t-1}, S_t)`` is coded as ``S_{t-1} * N + S_t``.

Every shipped rule is also available as a scalar numba kernel
(:func:`lambda_kernel`) so that trace recursions can run compiled.
"""
from dataclasses import dataclass, field
import math
from typing import Callable, Optional

import numpy as np

from ._accel import njit
from .errors import ConfigError, StructureError
from .rng import stream

KIND_CODES = {"constant": 0, "scaling": 1, "retrace": 2, "truncated_retrace": 3}


@njit
def lambda_kernel(kind, lam, beta, k_trunc, c_y, gamma_t, rho_prev, norm_e):
    """Scalar lambda rule shared by the numba and numpy trace paths.

    ``c_y`` is the threshold attached to the current memory state; 0/0 is
    read as 0 wherever the ratio appears in a denominator.
    """
    if kind == 0:
        return lam
    if kind == 1:
        x = gamma_t * rho_prev * norm_e
        if x <= c_y:
            return beta
        return beta * c_y / x
    if kind == 2:
        if rho_prev == 0.0:
            return 0.0
        return beta * min(1.0, rho_prev) / rho_prev
    # truncated retrace
    if rho_prev == 0.0:
        return 0.0
    lt = min(k_trunc, rho_prev) / rho_prev
    x = lt * gamma_t * rho_prev * norm_e
    if x <= c_y:
        return beta * lt
    return beta * lt * c_y / x


@dataclass(frozen=True, eq=False)
class LambdaScheme:
    """Memory process plus lambda rule.

    Use the factory functions (:func:`constant_lambda`, :func:`scaling_scheme`,
    ...) rather than constructing this directly.
    """
    kind: str
    memory: str = "trivial"
    lam: float = 0.0
    beta: float = 1.0
    k_trunc: float = 1.0
    thresholds: Optional[np.ndarray] = None
    rule: Optional[Callable] = None
    bound: Optional[Callable] = None
    norm: str = "l2"
    label: str = ""

    def __post_init__(self):
        if self.memory not in ("trivial", "pair"):
            raise StructureError(f"unknown memory type {self.memory!r}")
        if self.kind != "custom" and self.kind not in KIND_CODES:
            raise StructureError(f"unknown scheme kind {self.kind!r}")
        if self.thresholds is not None:
            thr = np.array(self.thresholds, dtype=np.float64)
            thr.setflags(write=False)
            object.__setattr__(self, "thresholds", thr)

    # --- memory process -------------------------------------------------
    def n_memory(self, n_states):
        return 1 if self.memory == "trivial" else n_states * n_states

    def memory_init(self, s0, n_states):
        return 0 if self.memory == "trivial" else s0 * n_states + s0

    def memory_step(self, y, s_next, n_states):
        if self.memory == "trivial":
            return 0
        return (y % n_states) * n_states + s_next

    def memory_path(self, states, n_states, y0=None):
        """Memory states along a state trajectory (vectorized replay of g)."""
        states = np.asarray(states, dtype=np.int64)
        if self.memory == "trivial":
            return np.zeros(states.shape[0], dtype=np.int64)
        ys = np.empty(states.shape[0], dtype=np.int64)
        ys[1:] = states[:-1] * n_states + states[1:]
        ys[0] = self.memory_init(int(states[0]), n_states) if y0 is None else y0
        return ys

    # --- lambda rule ----------------------------------------------------
    @property
    def is_compiled(self):
        return self.kind != "custom"

    @property
    def kind_code(self):
        return KIND_CODES[self.kind]

    def threshold_matrix(self, n_states):
        """Per-pair thresholds C_{ss'} as an N x N array (inf when unused)."""
        if self.kind == "scaling":
            thr = self.thresholds
            if thr.ndim == 0:
                return np.full((n_states, n_states), float(thr))
            if thr.shape != (n_states, n_states):
                raise StructureError(
                    f"threshold matrix shape {thr.shape} does not match {n_states} states")
            return np.array(thr)
        if self.kind == "truncated_retrace":
            return np.full((n_states, n_states), float(self.thresholds))
        return np.full((n_states, n_states), np.inf)

    def _threshold_for(self, y, n_states):
        if self.kind == "scaling":
            if self.thresholds.ndim == 0:
                return float(self.thresholds)
            return float(self.thresholds[y // n_states, y % n_states])
        if self.kind == "truncated_retrace":
            return float(self.thresholds)
        return math.inf

    def lambda_value(self, y, e_prev, gamma_t, rho_prev, n_states=None):
        """lambda(y, e_prev) for a step with discount gamma_t and ratio rho_{t-1}."""
        if self.kind == "custom":
            return float(self.rule(y, np.asarray(e_prev), gamma_t, rho_prev))
        n = n_states if n_states is not None else self._infer_n()
        c_y = self._threshold_for(y, n) if self.kind in ("scaling", "truncated_retrace") else 0.0
        return float(lambda_kernel(self.kind_code, self.lam, self.beta, self.k_trunc, c_y,
                                   float(gamma_t), float(rho_prev),
                                   float(np.linalg.norm(e_prev))))

    def _infer_n(self):
        if self.thresholds is not None and self.thresholds.ndim == 2:
            return self.thresholds.shape[0]
        return 1

    def trace_bound(self, y, n_states):
        """Claimed C_y with ||gamma rho lambda(y, e) e|| <= C_y for all e (inf if none)."""
        if self.kind == "custom":
            return math.inf if self.bound is None else float(self.bound(y))
        if self.kind in ("scaling", "truncated_retrace"):
            return self.beta * self._threshold_for(y, n_states)
        return math.inf

    def describe(self):
        if self.label:
            return self.label
        if self.kind == "constant":
            return f"constant(lambda={self.lam:g})"
        if self.kind == "scaling":
            thr = self.thresholds
            c = f"{float(thr):g}" if thr.ndim == 0 else "matrix"
            return f"scaling(C={c}, beta={self.beta:g})"
        if self.kind == "retrace":
            return f"retrace(beta={self.beta:g})"
        if self.kind == "truncated_retrace":
            return (f"truncated_retrace(K={self.k_trunc:g}, C={float(self.thresholds):g}, "
                    f"beta={self.beta:g})")
        return "custom"


def constant_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return LambdaScheme("constant", memory="trivial", lam=float(lam))


def scaling_scheme(thresholds, beta=1.0):
    """Scale gamma*rho*e back onto the ball of radius C_{ss'} whenever it leaves it."""
    thr = np.asarray(thresholds, dtype=np.float64)
    if np.any(thr < 0) or np.any(np.isnan(thr)):
        raise ConfigError("scaling thresholds must be nonnegative")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    return LambdaScheme("scaling", memory="pair", beta=float(beta), thresholds=thr)


def retrace_scheme(beta=1.0):
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"beta must lie in (0, 1], got {beta}")
    return LambdaScheme("retrace", memory="pair", beta=float(beta))


def truncated_retrace_scheme(k_trunc, c, beta=1.0):
    """Ratios truncated at K, then traces scaled onto the ball of radius C."""
    if k_trunc < 1.0:
        raise ConfigError(f"K must be >= 1, got {k_trunc}")
    if not c > 0.0:
        raise ConfigError(f"C must be > 0, got {c}")
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"beta must lie in (0, 1], got {beta}")
    return LambdaScheme("truncated_retrace", memory="pair", beta=float(beta),
                        k_trunc=float(k_trunc), thresholds=float(c))


def custom_scheme(rule, memory="trivial", bound=None, label="custom"):
    """Wrap a Python callable ``rule(y, e_prev, gamma_t, rho_prev) -> lambda``.

    Custom schemes run on the uncompiled trace path.
    """
    return LambdaScheme("custom", memory=memory, rule=rule, bound=bound, label=label)


@dataclass(frozen=True, eq=False)
class CompositeScheme:
    """One scheme per block of a state partition; ``partition[s]`` is the block of s."""
    schemes: tuple
    partition: np.ndarray

    def __post_init__(self):
        part = np.asarray(self.partition, dtype=np.int64)
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if part.ndim != 1:
            raise StructureError("partition must be a vector over states")
        if part.size and (part.min() < 0 or part.max() >= len(self.schemes)):
            raise StructureError("partition refers to a block without a scheme")

    @property
    def n_blocks(self):
        return len(self.schemes)

    def block_masks(self):
        return [(self.partition == i) for i in range(self.n_blocks)]

    def describe(self):
        return "composite(" + ", ".join(s.describe() for s in self.schemes) + ")"


# ---------------------------------------------------------------------------
# conformance checking

@dataclass
class ConformanceReport:
    lambda_in_range: bool
    max_lipschitz_ratio: float
    lipschitz_ok: bool
    max_bound_excess: float
    max_gain: float
    bound_ok: bool
    samples: int
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return self.lambda_in_range and self.lipschitz_ok and self.bound_ok


def _transitions(scheme, mdp):
    """(s, s') pairs that can produce each memory state under the behavior chain."""
    pairs = np.argwhere(mdp.p_behavior > 0)
    return [(int(s), int(s2)) for s, s2 in pairs]


def check_condition3(scheme, mdp, samples=1000, seed=0, features=None, tol=1e-9):
    """Randomized test of the non-expansiveness and bounded-product conditions.

    Every behavior transition is visited in turn; for each, random trace
    pairs ``(e, e')`` are drawn inside a ball whose radius is ten times the
    largest claimed C_y. Schemes that claim no finite C_y (constant lambda,
    Retrace) are judged on the reachable trace set instead: with per-step
    gain ``g = max gamma*rho*lambda < 1`` traces stay inside
    ``max|phi| / (1 - g)`` and the condition holds with C_y = g times that.
    """
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    rng = stream(seed, "conformance")
    n = mdp.n_states
    rho = mdp.ratio_matrix()
    gamma = mdp.discount
    trans = _transitions(scheme, mdp)
    dim = features.n_features if features is not None else 5
    phi_max = features.max_norm if features is not None else 1.0
    notes = []

    def mem(s, s2):
        return 0 if scheme.memory == "trivial" else s * n + s2

    claims = np.array([scheme.trace_bound(mem(s, s2), n) for s, s2 in trans])
    finite_claim = np.all(np.isfinite(claims))

    # per-step gain at a very long trace: finite iff lambda scales like 1/|e|
    probe = rng.standard_normal(dim)
    probe *= 1e8 / np.linalg.norm(probe)
    gains = []
    for s, s2 in trans:
        lam = scheme.lambda_value(mem(s, s2), probe, gamma[s2], rho[s, s2], n)
        gains.append(gamma[s2] * rho[s, s2] * lam)
    max_gain = float(max(gains)) if gains else 0.0

    if finite_claim:
        radius = 10.0 * max(float(claims.max()), 1.0)
        c_eff = claims
    elif max_gain < 1.0:
        radius = phi_max / (1.0 - max_gain) if max_gain > 0 else phi_max
        c_eff = np.full(len(trans), max_gain * radius)
        notes.append(f"no finite C_y claimed; reachable-trace radius {radius:.6g} "
                     f"from per-step gain {max_gain:.6g}")
    else:
        radius = 10.0 * phi_max
        c_eff = None
        notes.append(f"per-step gain {max_gain:.6g} > 1 (two-step product "
                     f"{max_gain ** 2:.6g}): traces are not bounded by any finite C_y")

    in_range = True
    max_ratio = 0.0
    max_excess = -math.inf
    for i in range(samples):
        k = i % len(trans)
        s, s2 = trans[k]
        y = mem(s, s2)
        g, r = gamma[s2], rho[s, s2]
        e1 = rng.standard_normal(dim)
        e1 *= radius * rng.random() / max(np.linalg.norm(e1), 1e-300)
        if i % 2:
            e2 = e1 + rng.standard_normal(dim) * radius * 1e-3
        else:
            e2 = rng.standard_normal(dim)
            e2 *= radius * rng.random() / max(np.linalg.norm(e2), 1e-300)
        l1 = scheme.lambda_value(y, e1, g, r, n)
        l2 = scheme.lambda_value(y, e2, g, r, n)
        if not (0.0 <= l1 <= 1.0 and 0.0 <= l2 <= 1.0):
            if in_range:
                notes.append(f"lambda out of [0, 1]: {l1 if not 0 <= l1 <= 1 else l2:.6g}")
            in_range = False
        diff = np.linalg.norm(e1 - e2)
        if diff > 0:
            max_ratio = max(max_ratio, np.linalg.norm(l1 * e1 - l2 * e2) / diff)
        if c_eff is not None:
            excess = g * r * l1 * np.linalg.norm(e1) - c_eff[k]
            max_excess = max(max_excess, excess)
    lip_ok = max_ratio <= 1.0 + tol
    if c_eff is None:
        bound_ok = False
        max_excess = math.inf
    else:
        bound_ok = max_excess <= tol * max(1.0, float(np.max(c_eff)))
    return ConformanceReport(in_range, float(max_ratio), lip_ok, float(max_excess),
                             max_gain, bound_ok, samples, notes)
