"""Benchmark environments: the 21-state toy chain and Mountain Car.

The toy problem is a :class:`~gbetd.mdp.TabularMdp` fixture. Mountain Car
is a simulator only; its off-policy data are produced as a stream of
*effective* transitions (jumps and restarts of the behavior policy are
ineffective and break the trace), tile-coded with two even tilings.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import _accel
from ._accel import njit
from .errors import ConfigError
from .mdp import FeatureMap, TabularMdp
from .rng import stream
from .schemes import lambda_kernel

# ---------------------------------------------------------------------------
# toy problem

TOY_GROUPS = ("NE", "SE", "SW", "NW")
TOY_GROUP_SIZE = 5
TOY_GAMMA = 0.9
# within-group (back, forward) probabilities for the target and behavior chains
_TOY_MOVES = {"target": (0.2, 0.8), "behavior": (0.5, 0.5)}


def toy_state(group, k):
    """Index of the ``k``-th state (0..4, clockwise) of ``group`` ("NE", ...)."""
    g = TOY_GROUPS.index(group) if isinstance(group, str) else int(group)
    return 1 + TOY_GROUP_SIZE * g + k


# states monitored in the ergodicity experiment
TOY_MONITORED = {"central": 0, "NE-middle": toy_state("NE", 2), "SE-first": toy_state("SE", 0)}


def _toy_chain(back, fwd):
    n = 1 + 4 * TOY_GROUP_SIZE
    p = np.zeros((n, n))
    for g in range(4):
        s = [toy_state(g, k) for k in range(TOY_GROUP_SIZE)]
        p[0, s[0]] = 0.25
        p[s[0], s[1]] = 1.0
        for k in (1, 2, 3):
            p[s[k], s[k - 1]] = back
            p[s[k], s[k + 1]] = fwd
        p[s[4], s[3]] = back
        p[s[4], 0] = fwd
    return p


def build_toy():
    """The 21-state toy problem and its 5 group-indicator features.

    State 0 is the central state; groups NE, SE, SW, NW follow clockwise,
    each with 5 states ordered clockwise from the entry state. The reward
    ``r(s, s')`` is +1 when leaving the middle state of a northern group and
    -1 for a southern group, so ``r_pi`` is +-1 at those four states.
    """
    p = _toy_chain(*_TOY_MOVES["target"])
    po = _toy_chain(*_TOY_MOVES["behavior"])
    n = p.shape[0]
    reward = np.zeros((n, n))
    for g, sign in zip(TOY_GROUPS, (1.0, -1.0, -1.0, 1.0)):
        reward[toy_state(g, 2), :] = sign
    mdp = TabularMdp(p, po, reward, np.full(n, TOY_GAMMA), name="toy21")
    phi = np.zeros((n, 5))
    phi[0, 0] = 1.0
    for g in range(4):
        for k in range(TOY_GROUP_SIZE):
            phi[toy_state(g, k), 1 + g] = 1.0
    return mdp, FeatureMap(phi)


def toy_rotation():
    """Permutation mapping each group onto the next one clockwise."""
    perm = np.arange(1 + 4 * TOY_GROUP_SIZE)
    for g in range(4):
        for k in range(TOY_GROUP_SIZE):
            perm[toy_state(g, k)] = toy_state((g + 1) % 4, k)
    return perm


def build_two_state(gamma=0.95):
    """Deterministic two-state cycle (target = behavior), zero rewards."""
    p = np.array([[0.0, 1.0], [1.0, 0.0]])
    return TabularMdp(p, p.copy(), np.zeros((2, 2)), np.full(2, gamma), name="two_state")


# ---------------------------------------------------------------------------
# Mountain Car

X_MIN, X_MAX = -1.2, 0.5
V_MIN, V_MAX = -0.07, 0.07
ACTIONS = (-1, 0, 1)  # back, coast, forward
ACTION_REWARD = {-1: -1.5, 0: 0.0, 1: -1.0}
BEHAVIOR_ACTION_PROB = 0.9 / 3.0


@dataclass
class MountainCarConfig:
    """Constants of the adapted Mountain Car problem.

    ``v_eps`` is the "velocity near zero" threshold of the target policy;
    ``restart_lo``/``restart_hi`` bound the near-valley restart positions.
    """
    v_eps: float = 0.001
    coast_below: float = -1.0
    jump_prob: float = 0.1
    restart_valley_prob: float = 0.5
    restart_lo: float = -0.6
    restart_hi: float = -0.4
    tiles: tuple = (8, 9)

    @property
    def n_features(self):
        return sum(k * k for k in self.tiles)


@dataclass
class MountainCarSim:
    """Mutable single-owner simulator state."""
    position: float
    velocity: float
    terminal: bool = False


@njit
def _dynamics(x, v, a):
    v = v + 0.001 * a - 0.0025 * math.cos(3.0 * x)
    v = min(max(v, -0.07), 0.07)
    x = x + v
    if x <= -1.2:
        x = -1.2
        if v < 0.0:
            v = 0.0
    if x >= 0.5:
        x = 0.5
    return x, v


@njit
def _action_reward(a):
    if a < 0:
        return -1.5
    if a > 0:
        return -1.0
    return 0.0


@njit
def _target_prob(x, v, a, v_eps, coast_below):
    """pi(a | x, v) for the energy-pumping target policy."""
    if x < coast_below:
        return 1.0 if a == 0 else 0.0
    if abs(v) < v_eps:
        return 0.0 if a == 0 else 0.5
    if v > 0.0:
        return 1.0 if a == 1 else 0.0
    return 1.0 if a == -1 else 0.0


def mcar_step(sim, action, rng=None):
    """Apply ``action`` in {-1, 0, 1}; returns ``(next_sim, reward, discount)``.

    The discount is that of the next state: 0 at the destination, else 1.
    """
    if sim.terminal:
        raise ConfigError("cannot step a terminal Mountain Car state")
    if action not in ACTIONS:
        raise ConfigError(f"unknown action {action!r}")
    x, v = _dynamics(float(sim.position), float(sim.velocity), int(action))
    done = x >= X_MAX
    return MountainCarSim(x, v, done), ACTION_REWARD[int(action)], 0.0 if done else 1.0


def mcar_target_policy(sim, rng, cfg=None):
    """Sample the target action: push along the motion, coast past x < -1."""
    cfg = cfg or MountainCarConfig()
    probs = [_target_prob(sim.position, sim.velocity, a, cfg.v_eps, cfg.coast_below)
             for a in ACTIONS]
    return ACTIONS[int(rng.choice(3, p=probs))]


@dataclass
class BehaviorEvent:
    kind: str  # "action", "jump" or "restart"
    action: int = 0
    rho: float = 0.0
    effective: bool = False
    next_sim: MountainCarSim = None


def mcar_behavior_policy(sim, rng, cfg=None):
    """One behavior-policy event from ``sim``.

    At the destination the behavior policy restarts; otherwise it jumps to
    a uniform random state with probability 0.1 or plays a uniform action.
    Jumps and restarts are ineffective and carry no importance ratio.
    """
    cfg = cfg or MountainCarConfig()
    u = rng.random(4)
    x, v, kind, a = _behavior_event(sim.position, sim.velocity, sim.terminal, u,
                                    cfg.jump_prob, cfg.restart_valley_prob,
                                    cfg.restart_lo, cfg.restart_hi)
    if kind == 0:
        rho = _target_prob(sim.position, sim.velocity, a, cfg.v_eps, cfg.coast_below) \
            / BEHAVIOR_ACTION_PROB
        return BehaviorEvent("action", a, rho, True, MountainCarSim(x, v, x >= X_MAX))
    name = "jump" if kind == 1 else "restart"
    return BehaviorEvent(name, 0, 0.0, False, MountainCarSim(x, v, False))


@njit
def _behavior_event(x, v, terminal, u, jump_prob, valley_prob, lo, hi):
    """Returns (x', v', kind, action) with kind 0 action, 1 jump, 2 restart."""
    if terminal:
        if u[0] < valley_prob:
            return lo + (hi - lo) * u[1], 0.0, 2, 0
        return -1.2 + 1.7 * u[1], -0.07 + 0.14 * u[2], 2, 0
    if u[0] < jump_prob:
        return -1.2 + 1.7 * u[1], -0.07 + 0.14 * u[2], 1, 0
    a = min(int(u[3] * 3.0), 2) - 1
    x2, v2 = _dynamics(x, v, a)
    return x2, v2, 0, a


# --- tile coding -----------------------------------------------------------

@njit
def _tile_index(x, v, k, offset):
    i = int((x - -1.2) / 1.7 * k)
    j = int((v - -0.07) / 0.14 * k)
    i = min(max(i, 0), k - 1)
    j = min(max(j, 0), k - 1)
    return offset + i * k + j


@njit
def _tiles2(x, v, k1, k2):
    return _tile_index(x, v, k1, 0), _tile_index(x, v, k2, k1 * k1)


class TileCoding:
    """Two even tilings of the position-velocity rectangle (8x8 + 9x9 by default).

    Every state activates exactly one tile per tiling. Because each tiling's
    indicators sum to one, the feature matrix over any rich set of states has
    rank ``n_features - 1``.
    """

    def __init__(self, tiles=(8, 9)):
        if len(tiles) != 2 or min(tiles) < 1:
            raise ConfigError("tile coding needs two positive tiling sizes")
        self.tiles = tuple(int(k) for k in tiles)
        self.n_features = sum(k * k for k in self.tiles)

    def active(self, x, v):
        return _tiles2(float(x), float(v), self.tiles[0], self.tiles[1])

    def active_many(self, x, v):
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        out = np.empty(x.shape + (2,), dtype=np.int64)
        for c, (k, off) in enumerate(((self.tiles[0], 0),
                                      (self.tiles[1], self.tiles[0] ** 2))):
            i = np.clip(((x + 1.2) / 1.7 * k).astype(np.int64), 0, k - 1)
            j = np.clip(((v + 0.07) / 0.14 * k).astype(np.int64), 0, k - 1)
            out[..., c] = off + i * k + j
        return out

    def features(self, x, v):
        phi = np.zeros(self.n_features)
        phi[list(self.active(x, v))] = 1.0
        return phi


# --- behavior data ----------------------------------------------------------

@dataclass
class McarData:
    """Effective transitions of one behavior run.

    Record ``k`` is the step from ``(x[k], v[k])``; ``carry[k]`` tells
    whether the next record starts where this one ended with no jump or
    restart in between (otherwise the trace restarts at the next record).
    """
    x: np.ndarray
    v: np.ndarray
    tiles: np.ndarray
    next_tiles: np.ndarray
    rho: np.ndarray
    reward: np.ndarray
    gamma_next: np.ndarray
    carry: np.ndarray
    n_ineffective: int = 0

    @property
    def n_effective(self):
        return self.rho.shape[0]


@njit
def _simulate_nb(x, v, terminal, u, n0, need, k1, k2, jump_prob, valley_prob, lo, hi,
                 v_eps, coast_below, xs, vs, tl, ntl, rho, rew, gnext, carry):
    """Consume uniform rows, filling records from index ``n0`` up to ``need``."""
    n = n0
    used = 0
    inef = 0
    for r in range(u.shape[0]):
        if n >= need:
            break
        used += 1
        x2, v2, kind, a = _behavior_event(x, v, terminal, u[r], jump_prob, valley_prob,
                                          lo, hi)
        if kind != 0:
            inef += 1
            if n > 0:
                carry[n - 1] = False
            x, v, terminal = x2, v2, False
            continue
        xs[n] = x
        vs[n] = v
        t1, t2 = _tiles2(x, v, k1, k2)
        tl[n, 0] = t1
        tl[n, 1] = t2
        t1, t2 = _tiles2(x2, v2, k1, k2)
        ntl[n, 0] = t1
        ntl[n, 1] = t2
        rho[n] = _target_prob(x, v, a, v_eps, coast_below) / (0.9 / 3.0)
        rew[n] = _action_reward(a)
        terminal = x2 >= 0.5
        gnext[n] = 0.0 if terminal else 1.0
        carry[n] = not terminal
        x, v = x2, v2
        n += 1
    return n, used, inef, x, v, terminal


def simulate_behavior(n_effective, seed=0, cfg=None, chunk=200_000):
    """Behavior-policy run of ``n_effective`` effective iterations.

    Uniforms come in rows of four from the ``behavior`` stream; the run
    starts from a uniform random state.
    """
    cfg = cfg or MountainCarConfig()
    if n_effective < 1:
        raise ConfigError("need at least one effective iteration")
    rng = stream(seed, "behavior")
    k1, k2 = cfg.tiles
    xs = np.empty(n_effective)
    vs = np.empty(n_effective)
    tl = np.empty((n_effective, 2), dtype=np.int64)
    ntl = np.empty((n_effective, 2), dtype=np.int64)
    rho = np.empty(n_effective)
    rew = np.empty(n_effective)
    gnext = np.empty(n_effective)
    carry = np.zeros(n_effective, dtype=np.bool_)
    start = rng.random(2)
    x, v, term = -1.2 + 1.7 * start[0], -0.07 + 0.14 * start[1], False
    fn = _simulate_nb if _accel.use_numba() else getattr(_simulate_nb, "py_func", _simulate_nb)
    done, inef = 0, 0
    while done < n_effective:
        u = rng.random((chunk, 4))
        done, _, ie, x, v, term = fn(x, v, term, u, done, n_effective, k1, k2,
                                     cfg.jump_prob, cfg.restart_valley_prob, cfg.restart_lo,
                                     cfg.restart_hi, cfg.v_eps, cfg.coast_below,
                                     xs, vs, tl, ntl, rho, rew, gnext, carry)
        inef += ie
    return McarData(xs, vs, tl, ntl, rho, rew, gnext, carry, inef)


# --- error weights and reference values --------------------------------------

GRID_X = np.round(np.linspace(X_MIN, X_MAX, 171), 10)
GRID_V = np.round(np.linspace(V_MIN, V_MAX, 141), 10)


def grid_index(x, v):
    """Nearest grid point (row = position index, column = velocity index)."""
    i = np.clip(np.rint((np.asarray(x) - X_MIN) / 0.01).astype(np.int64), 0, 170)
    j = np.clip(np.rint((np.asarray(v) - V_MIN) / 0.001).astype(np.int64), 0, 140)
    return i, j


def mcar_error_weights(n_effective=800_000, seed=0, cfg=None, data=None):
    """Visit frequencies of the 171 x 141 grid under the behavior policy.

    Visits at effective iterations count toward the nearest grid point;
    visits to the boundary point (-1.2, 0) are discarded before
    normalizing.
    """
    if data is None:
        data = simulate_behavior(n_effective, seed=seed, cfg=cfg)
    i, j = grid_index(data.x, data.v)
    counts = np.zeros((GRID_X.size, GRID_V.size))
    np.add.at(counts, (i, j), 1.0)
    counts[0, 70] = 0.0
    return counts / counts.sum()


@njit
def _rollouts_nb(xs, vs, n_roll, horizon, seeds, v_eps, coast_below, out_mean, out_var,
                 out_done):
    for p in range(xs.shape[0]):
        np.random.seed(seeds[p])
        s1 = 0.0
        s2 = 0.0
        nd = 0
        for _ in range(n_roll):
            x = xs[p]
            v = vs[p]
            tot = 0.0
            finished = x >= 0.5
            for _h in range(horizon):
                if finished:
                    break
                if x < coast_below:
                    a = 0
                elif abs(v) < v_eps:
                    a = 1 if np.random.random() < 0.5 else -1
                elif v > 0.0:
                    a = 1
                else:
                    a = -1
                tot += _action_reward(a)
                x, v = _dynamics(x, v, a)
                finished = x >= 0.5
            if finished:
                nd += 1
            s1 += tot
            s2 += tot * tot
        m = s1 / n_roll
        out_mean[p] = m
        out_var[p] = max(s2 / n_roll - m * m, 0.0)
        out_done[p] = nd


def _rollouts_np(xs, vs, n_roll, horizon, seeds, v_eps, coast_below, out_mean, out_var,
                 out_done):
    for p in range(xs.shape[0]):
        rng = np.random.RandomState(seeds[p])
        x = np.full(n_roll, xs[p])
        v = np.full(n_roll, vs[p])
        tot = np.zeros(n_roll)
        done = x >= 0.5
        for _ in range(horizon):
            if done.all():
                break
            coin = np.where(rng.random_sample(n_roll) < 0.5, 1, -1)
            a = np.where(x < coast_below, 0,
                         np.where(np.abs(v) < v_eps, coin, np.where(v > 0, 1, -1)))
            live = ~done
            tot[live] += np.where(a < 0, -1.5, np.where(a > 0, -1.0, 0.0))[live]
            v2 = np.clip(v + 0.001 * a - 0.0025 * np.cos(3.0 * x), -0.07, 0.07)
            x2 = x + v2
            v2 = np.where((x2 <= -1.2) & (v2 < 0), 0.0, v2)
            x2 = np.clip(x2, -1.2, 0.5)
            x = np.where(live, x2, x)
            v = np.where(live, v2, v)
            done = x >= 0.5
        out_mean[p] = tot.mean()
        out_var[p] = tot.var()
        out_done[p] = int(done.sum())


def mcar_reference_values(points_x, points_v, n_rollouts=600, horizon=5000, seed=0,
                          cfg=None):
    """Target-policy value estimates ``(mean, stderr, finished_fraction)`` per point.

    Each point gets its own seed derived from the ``rollouts`` stream, so
    results do not depend on which other points are evaluated. The two
    backends use different generators and agree only statistically.
    """
    cfg = cfg or MountainCarConfig()
    xs = np.ascontiguousarray(points_x, dtype=np.float64)
    vs = np.ascontiguousarray(points_v, dtype=np.float64)
    base = int(stream(seed, "rollouts").integers(0, 2**31 - 1))
    idx = np.round((xs - X_MIN) / 0.01).astype(np.int64) * 1000 + \
        np.round((vs - V_MIN) / 0.001).astype(np.int64)
    seeds = ((idx * 2654435761 + base) % (2**31 - 1)).astype(np.int64)
    mean = np.empty(xs.size)
    var = np.empty(xs.size)
    done = np.empty(xs.size, dtype=np.int64)
    fn = _rollouts_nb if _accel.use_numba() else _rollouts_np
    fn(xs, vs, int(n_rollouts), int(horizon), seeds, cfg.v_eps, cfg.coast_below, mean, var,
       done)
    se = np.sqrt(var / max(n_rollouts - 1, 1))
    return mean, se, done / n_rollouts


def termination_check(n_trials=1000, horizon=5000, seed=0, cfg=None):
    """Fraction of target-policy trajectories from uniform starts that terminate."""
    rng = stream(seed, "init")
    xs = -1.2 + 1.7 * rng.random(n_trials)
    vs = -0.07 + 0.14 * rng.random(n_trials)
    _, _, frac = mcar_reference_values(xs, vs, n_rollouts=1, horizon=horizon, seed=seed,
                                       cfg=cfg)
    return float(frac.mean())


# --- LSTD over Mountain Car data ---------------------------------------------

@dataclass
class McarScheme:
    """Lambda scheme for the Mountain Car stream.

    ``blocks`` lists ``(kind_code, lam, beta, k_trunc, C)`` per block; block
    1 (the second entry) covers states outside ``x <= -0.9 or v >= 0.04``
    when two blocks are given. ``clamp`` is the constrained-LSTD bound.
    """
    label: str
    blocks: tuple
    clamp: float = math.inf

    @property
    def n_blocks(self):
        return len(self.blocks)


def mcar_scaling(c, beta=1.0):
    return McarScheme(f"C={c:g}", ((1, 0.0, beta, 1.0, float(c)),))


def mcar_retrace(beta=1.0):
    return McarScheme("retrace", ((2, 0.0, beta, 1.0, math.inf),))


def mcar_constant(lam, clamp=math.inf):
    lbl = f"lambda={lam:g}" + ("" if math.isinf(clamp) else f",B={clamp:g}")
    return McarScheme(lbl, ((0, float(lam), 1.0, 1.0, math.inf),), clamp=float(clamp))


def mcar_truncated_retrace(k_trunc, c, beta=1.0):
    return McarScheme(f"K={k_trunc:g},C={c:g}", ((3, 0.0, beta, float(k_trunc), float(c)),))


def mcar_composite(c1, c2, beta=1.0):
    return McarScheme(f"C:({c1:g},{c2:g})", ((1, 0.0, beta, 1.0, float(c1)),
                                            (1, 0.0, beta, 1.0, float(c2))))


def mcar_partition(x, v):
    """Block 0: ``x <= -0.9`` or ``v >= 0.04``; block 1: the rest."""
    return np.where((np.asarray(x) <= -0.9) | (np.asarray(v) >= 0.04), 0, 1).astype(np.int64)


@njit
def _mcar_lstd_segment(lo, hi, tiles, next_tiles, rho, reward, gamma_next, carry, block,
                       kinds, lams, betas, ks, cs, clamp, traces, prev, a_sum, b_sum):
    """Accumulate records ``lo..hi-1``; ``traces`` is (blocks, n), updated in place.

    ``prev`` holds (rho_{k-1}, gamma_k, carry_{k-1}) of the previous record.
    """
    nb = traces.shape[0]
    n = traces.shape[1]
    e = np.empty(n)
    for k in range(lo, hi):
        g = prev[1]
        r_prev = prev[0]
        cont = prev[2] > 0.5
        for i in range(nb):
            if cont:
                sq = 0.0
                for j in range(n):
                    sq += traces[i, j] * traces[i, j]
                lt = lambda_kernel(kinds[i], lams[i], betas[i], ks[i], cs[i], g, r_prev,
                                   math.sqrt(sq))
                f = lt * g * r_prev
            else:
                f = 0.0
            for j in range(n):
                traces[i, j] *= f
        bi = block[k]
        traces[bi, tiles[k, 0]] += 1.0
        traces[bi, tiles[k, 1]] += 1.0
        for j in range(n):
            s = 0.0
            for i in range(nb):
                s += traces[i, j]
            if s > clamp:
                s = clamp
            elif s < -clamp:
                s = -clamp
            e[j] = s
        rk = rho[k]
        if rk != 0.0:
            gn = gamma_next[k]
            for j in range(n):
                w = e[j] * rk
                if w != 0.0:
                    a_sum[j, tiles[k, 0]] -= w
                    a_sum[j, tiles[k, 1]] -= w
                    if gn != 0.0:
                        a_sum[j, next_tiles[k, 0]] += w * gn
                        a_sum[j, next_tiles[k, 1]] += w * gn
                    b_sum[j] += w * reward[k]
        prev[0] = rk
        prev[1] = gamma_next[k]
        prev[2] = 1.0 if carry[k] else 0.0


def _mcar_lstd_segment_np(lo, hi, tiles, next_tiles, rho, reward, gamma_next, carry, block,
                          kinds, lams, betas, ks, cs, clamp, traces, prev, a_sum, b_sum):
    rule = getattr(lambda_kernel, "py_func", lambda_kernel)
    nb, n = traces.shape
    for k in range(lo, hi):
        if prev[2] > 0.5:
            norms = np.linalg.norm(traces, axis=1)
            f = np.array([rule(kinds[i], lams[i], betas[i], ks[i], cs[i], prev[1], prev[0],
                               norms[i]) for i in range(nb)]) * prev[1] * prev[0]
            traces *= f[:, None]
        else:
            traces[:] = 0.0
        traces[block[k], tiles[k]] += 1.0
        e = np.clip(traces.sum(axis=0), -clamp, clamp)
        rk = rho[k]
        if rk != 0.0:
            w = e * rk
            np.subtract.at(a_sum, (slice(None), tiles[k]), w[:, None])
            if gamma_next[k] != 0.0:
                np.add.at(a_sum, (slice(None), next_tiles[k]), (w * gamma_next[k])[:, None])
            b_sum += w * reward[k]
        prev[:] = (rk, gamma_next[k], 1.0 if carry[k] else 0.0)


@dataclass
class McarLstdResult:
    label: str
    checkpoints: np.ndarray
    errors: np.ndarray
    flagged: np.ndarray
    theta: np.ndarray


def mcar_weighted_error(theta, weights, values, tiles_on_grid):
    """Weighted RMS difference between the tile-coded estimate and reference values."""
    v_hat = theta[tiles_on_grid[..., 0]] + theta[tiles_on_grid[..., 1]]
    return float(np.sqrt(np.sum(weights * (v_hat - values) ** 2)))


def run_mcar_lstd(data, schemes, weights, values, cfg=None, checkpoint_every=2000):
    """LSTD for each scheme on one shared behavior stream.

    Matrices are kept as running sums (sparse per-step updates); solutions
    are taken every ``checkpoint_every`` effective iterations with the
    minimum-norm least-squares solver, since even tilings make the
    coefficient matrix rank deficient by one.
    """
    from .lstd import solve_system
    cfg = cfg or MountainCarConfig()
    coder = TileCoding(cfg.tiles)
    gx, gv = np.meshgrid(GRID_X, GRID_V, indexing="ij")
    grid_tiles = coder.active_many(gx, gv)
    block_of = mcar_partition(data.x, data.v)
    n = coder.n_features
    T = data.n_effective
    cps = np.arange(checkpoint_every, T + 1, checkpoint_every)
    if cps.size == 0 or cps[-1] != T:
        cps = np.append(cps, T)
    seg = _mcar_lstd_segment if _accel.use_numba() else _mcar_lstd_segment_np
    out = []
    for sch in schemes:
        nb = sch.n_blocks
        blk = block_of if nb > 1 else np.zeros(T, dtype=np.int64)
        arr = np.array(sch.blocks, dtype=np.float64)
        kinds = arr[:, 0].astype(np.int64)
        traces = np.zeros((nb, n))
        prev = np.array([0.0, 0.0, 0.0])
        a_sum = np.zeros((n, n))
        b_sum = np.zeros(n)
        errs = np.empty(cps.size)
        flags = np.zeros(cps.size, dtype=np.bool_)
        lo = 0
        theta = np.zeros(n)
        for c, hi in enumerate(cps):
            seg(lo, int(hi), data.tiles, data.next_tiles, data.rho, data.reward,
                data.gamma_next, data.carry, blk, kinds, arr[:, 1].copy(), arr[:, 2].copy(),
                arr[:, 3].copy(), arr[:, 4].copy(), float(sch.clamp), traces, prev, a_sum,
                b_sum)
            lo = int(hi)
            if not (np.all(np.isfinite(a_sum)) and np.all(np.isfinite(b_sum))):
                errs[c:] = np.inf
                flags[c:] = True
                break
            theta, flagged, _ = solve_system(a_sum / hi, b_sum / hi)
            flags[c] = flagged
            errs[c] = mcar_weighted_error(theta, weights, values, grid_tiles)
        out.append(McarLstdResult(sch.label, cps, errs, flags, theta))
    return out
