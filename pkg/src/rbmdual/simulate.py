"""Path sampling for lattice chains, pathwise observables and the
Feynman-Kac reweighting of dual paths.

Ensembles are simulated vectorized over paths. Paths are grouped into blocks
of fixed size; block ``b`` draws from a Philox stream keyed by
``(root_seed, b)``, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numba
import numpy as np
import scipy.sparse as sp

from .lattice import ChainSpec, CompiledChain, compile_chain, sqrt_n
from .model import InvariantDensity

BLOCK_SIZE = 4096
THREADS_ENV = "RBMDUAL_THREADS"


class SupportMismatchError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def block_rng(root_seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(root_seed), int(block)])))


@dataclass(frozen=True)
class WeightTables:
    """Per-state and per-edge pieces of the dual-path log density.

    ``potential[s]`` is V at s; ``compensator[s]`` is
    ``sum_y (q^_{s,y} - q~_{s,y})`` on the boundary layer (zero elsewhere);
    ``log_ratio[s, k]`` is ``log(q^/q~)`` for the k-th dual jump out of s on
    the boundary layer (zero elsewhere, ``-inf`` when ``q^ = 0``).
    """

    potential: np.ndarray
    compensator: np.ndarray
    log_ratio: np.ndarray
    layer: np.ndarray


def weight_tables(primal: CompiledChain, dual: CompiledChain) -> WeightTables:
    S = primal.n_states
    rows = np.repeat(np.arange(S), primal.rate.shape[1])
    mask = primal.rate.ravel() > 0
    Q = sp.coo_matrix((primal.rate.ravel()[mask], (rows[mask], primal.dest.ravel()[mask])),
                      shape=(S, S)).tocsr()
    inflow = np.asarray(Q.sum(axis=0)).ravel()
    potential = inflow - primal.total

    # q^_{x,y} = q_{y,x} for each dual edge x -> y
    qhat = np.asarray(Q[dual.dest.ravel(), np.repeat(np.arange(S), dual.rate.shape[1])]).reshape(dual.rate.shape)
    qhat = np.where(dual.rate > 0, qhat, 0.0)
    matched = qhat.sum(axis=1)
    missing = inflow - matched
    bad = np.nonzero(missing > 1e-9 * np.maximum(1.0, inflow))[0]
    if bad.size:
        s = int(bad[0])
        raise SupportMismatchError(
            f"site {tuple(int(k) for k in primal.sites[s])}: primal inflow {inflow[s]!r} "
            f"not covered by dual jumps ({matched[s]!r})")

    layer = np.any(primal.sites <= 1, axis=1)
    compensator = np.where(layer, inflow - dual.total, 0.0)
    with np.errstate(divide="ignore"):
        lr = np.where(dual.rate > 0, np.log(qhat) - np.log(np.where(dual.rate > 0, dual.rate, 1.0)), 0.0)
    lr = np.where(layer[:, None], lr, 0.0)
    return WeightTables(potential, compensator, lr, layer)


@dataclass
class EnsembleResult:
    """Per-path summaries of an ensemble run (arrays indexed by path)."""

    horizon: float
    x0: np.ndarray
    final: np.ndarray
    Tn: np.ndarray
    L: np.ndarray
    pair_occ: np.ndarray
    upper_hits: np.ndarray
    n_jumps: np.ndarray
    logw: Optional[np.ndarray] = None
    snapshots: Optional[np.ndarray] = None
    snapshot_times: Optional[np.ndarray] = None
    events: Optional[list] = None

    @property
    def M(self) -> int:
        return self.x0.shape[0]

    @property
    def log_weight(self) -> np.ndarray:
        return self.logw.sum(axis=1)

    @property
    def weight(self) -> np.ndarray:
        return np.exp(self.log_weight)

    @staticmethod
    def concat(parts: Sequence["EnsembleResult"]) -> "EnsembleResult":
        first = parts[0]

        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if vals[0] is None else np.concatenate(vals, axis=0)

        events = None
        if first.events is not None:
            events = [e for p in parts for e in p.events]
        return EnsembleResult(first.horizon, cat("x0"), cat("final"), cat("Tn"), cat("L"),
                              cat("pair_occ"), cat("upper_hits"), cat("n_jumps"), cat("logw"),
                              cat("snapshots"), first.snapshot_times, events)


class _StateFlags:
    def __init__(self, compiled: CompiledChain):
        sites = compiled.sites
        m = compiled.chain.params.m
        d = sites.shape[1]
        self.zero = (sites == 0).astype(float)
        self.interior = np.all(sites > 0, axis=1).astype(float)
        pairs = list(itertools.combinations(range(d), 2))
        if pairs:
            self.pair = np.stack([(sites[:, i] == 0) & (sites[:, j] == 0) for i, j in pairs], axis=1).astype(float)
        else:
            self.pair = np.zeros((sites.shape[0], 0))
        self.upper = np.any(sites == m, axis=1).astype(np.int64)
        self.cum = np.cumsum(compiled.rate, axis=1)
        self.total = compiled.rate.sum(axis=1)
        if np.any(self.total <= 0):
            s = int(np.argmin(self.total))
            raise RuntimeError(f"absorbing site {tuple(sites[s])}")


def _kahan_add(acc, comp, idx, col, x):
    y = x - comp[idx, col]
    t = acc[idx, col] + y
    comp[idx, col] = (t - acc[idx, col]) - y
    acc[idx, col] = t


def run_paths(compiled: CompiledChain, x0: np.ndarray, horizon: float, rng: np.random.Generator,
              weights: Optional[WeightTables] = None, snapshot_times=None,
              record: bool = False, flags: Optional[_StateFlags] = None) -> EnsembleResult:
    """Simulate ``len(x0)`` independent paths of the chain up to ``horizon``."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    flags = flags or _StateFlags(compiled)
    x0 = np.asarray(x0, dtype=np.int64)
    M = x0.shape[0]
    d = compiled.sites.shape[1]
    rn = math.sqrt(compiled.chain.params.n)
    state = x0.copy()
    t = np.zeros(M)
    Tn = np.zeros(M)
    L = np.zeros((M, d))
    pair = np.zeros((M, flags.pair.shape[1]))
    hits = np.zeros(M, dtype=np.int64)
    njumps = np.zeros(M, dtype=np.int64)
    logw = np.zeros((M, 3)) if weights is not None else None
    comp = np.zeros((M, 3)) if weights is not None else None
    if snapshot_times is not None:
        snapshot_times = np.asarray(snapshot_times, dtype=float)
        if np.any(np.diff(snapshot_times) < 0) or np.any(snapshot_times > horizon) or np.any(snapshot_times < 0):
            raise ValueError("snapshot times must be sorted within [0, horizon]")
        J = snapshot_times.shape[0]
        snaps = np.full((M, J), -1, dtype=np.int64)
        nxt = np.zeros(M, dtype=np.int64)
    events = [[] for _ in range(M)] if record else None

    active = np.arange(M) if horizon > 0 else np.arange(0)
    if horizon == 0 and snapshot_times is not None:
        snaps[:] = state[:, None]
    while active.size:
        s = state[active]
        tot = flags.total[s]
        dt = rng.standard_exponential(active.size) / tot
        t0 = t[active]
        t1 = t0 + dt
        over = t1 >= horizon
        stay = np.where(over, horizon - t0, dt)

        Tn[active] += stay * flags.interior[s]
        L[active] += rn * stay[:, None] * flags.zero[s]
        if pair.shape[1]:
            pair[active] += rn * stay[:, None] * flags.pair[s]
        if weights is not None:
            _kahan_add(logw, comp, active, 0, stay * weights.potential[s])
            _kahan_add(logw, comp, active, 2, -stay * weights.compensator[s])
        if snapshot_times is not None:
            end = np.where(over, np.inf, t1)
            while True:
                p = nxt[active]
                hit = p < J
                if not hit.any():
                    break
                tau = snapshot_times[np.minimum(p, J - 1)]
                hit &= tau < end
                if not hit.any():
                    break
                rows = active[hit]
                snaps[rows, p[hit]] = s[hit]
                nxt[rows] += 1

        jump = ~over
        if jump.any():
            ja = active[jump]
            js = s[jump]
            u = rng.random(ja.size) * tot[jump]
            k = (u[:, None] >= flags.cum[js]).sum(axis=1)
            k = np.minimum(k, flags.cum.shape[1] - 1)
            new = compiled.dest[js, k]
            if weights is not None:
                _kahan_add(logw, comp, ja, 1, weights.log_ratio[js, k])
            hits[ja] += flags.upper[new]
            njumps[ja] += 1
            if record:
                for p_, tt, a, b_ in zip(ja, t1[jump], js, new):
                    events[p_].append((float(tt), int(a), int(b_)))
            state[ja] = new
            t[ja] = t1[jump]
        t[active[over]] = horizon
        active = active[jump]

    return EnsembleResult(horizon, x0, state, Tn, L, pair, hits, njumps, logw,
                          snaps if snapshot_times is not None else None, snapshot_times, events)


def _draw_initial(x0, M: int, rng: np.random.Generator) -> np.ndarray:
    if np.ndim(x0) == 0:
        return np.full(M, int(x0), dtype=np.int64)
    p = np.asarray(x0, dtype=float)
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, rng.random(M), side="right"), p.size - 1).astype(np.int64)


def run_ensemble(compiled: CompiledChain, x0, M: int, horizon: float, seed: int,
                 weights: Optional[WeightTables] = None, snapshot_times=None,
                 threads: Optional[int] = None, block_size: int = BLOCK_SIZE,
                 record: bool = False) -> EnsembleResult:
    """``M`` paths from ``x0`` (a state index, or a probability vector over
    states), split into seeded blocks and reduced in block order."""
    threads = threads or default_threads()
    flags = _StateFlags(compiled)
    nblocks = max(1, -(-M // block_size))

    def work(b):
        rng = block_rng(seed, b)
        size = min(block_size, M - b * block_size)
        start = _draw_initial(x0, size, rng)
        return run_paths(compiled, start, horizon, rng, weights, snapshot_times, record, flags)

    if threads == 1 or nblocks == 1:
        parts = [work(b) for b in range(nblocks)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(nblocks)))
    return EnsembleResult.concat(parts)


def mean_stderr(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        bad = int(np.nonzero(~np.isfinite(v))[0][0])
        raise NonFiniteError(f"non-finite functional value {v[bad]!r} on path {bad}")
    if v.size < 2:
        raise ValueError("need at least two paths")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def ensemble_estimate(compiled: CompiledChain, functional: Callable[[EnsembleResult], np.ndarray],
                      M: int, horizon: float, seed: int, x0=0, **kw) -> tuple:
    """(mean, stderr) of a per-path functional over ``M`` paths."""
    if M < 2:
        raise ValueError("M must be at least 2")
    res = run_ensemble(compiled, x0, M, horizon, seed, **kw)
    return mean_stderr(functional(res))


# --- single paths -----------------------------------------------------------

@dataclass
class TrajectoryRecord:
    seed: int
    x0: tuple
    horizon: float
    events: list
    compiled: CompiledChain = field(repr=False)

    def site(self, s: int) -> tuple:
        return tuple(int(k) for k in self.compiled.sites[s])


@dataclass
class TrajectoryObservables:
    Tn: float
    Ln: np.ndarray
    pair_occ: dict
    N_edges: dict
    T_sites: dict
    upper_hits: int


def sample_path(chain, x0, T: float, seed: int) -> TrajectoryRecord:
    compiled = chain if isinstance(chain, CompiledChain) else compile_chain(chain)
    if T < 0:
        raise ValueError("T must be nonnegative")
    start = compiled.index(x0)
    res = run_paths(compiled, np.array([start]), T, block_rng(seed, 0), record=True)
    return TrajectoryRecord(seed, tuple(int(k) for k in x0), T, res.events[0], compiled)


def _holding(traj: TrajectoryRecord, t: float):
    """Yield (state, duration) pieces of the path on [0, t]."""
    cur = traj.compiled.index(traj.x0)
    last = 0.0
    for time, a, b in traj.events:
        if time > t:
            break
        yield cur, time - last
        cur, last = b, time
    yield cur, t - last


def observables(traj: TrajectoryRecord, t: Optional[float] = None) -> TrajectoryObservables:
    """Pathwise clocks, local times and boundary-layer counts, evaluated
    directly from the event list."""
    t = traj.horizon if t is None else t
    chain = traj.compiled.chain
    d, m = chain.d, chain.params.m
    rn = math.sqrt(chain.params.n)
    Tn = 0.0
    Ln = np.zeros(d)
    pair = {pq: 0.0 for pq in itertools.combinations(range(d), 2)}
    T_sites: dict = {}
    for s, dur in _holding(traj, t):
        x = traj.site(s)
        if all(k > 0 for k in x):
            Tn += dur
        for i in range(d):
            if x[i] == 0:
                Ln[i] += rn * dur
        for i, j in pair:
            if x[i] == 0 and x[j] == 0:
                pair[(i, j)] += rn * dur
        if chain.in_boundary_layer(x):
            T_sites[x] = T_sites.get(x, 0.0) + dur
    N_edges: dict = {}
    hits = 0
    for time, a, b in traj.events:
        if time > t:
            break
        x, y = traj.site(a), traj.site(b)
        if chain.in_boundary_layer(x):
            N_edges[(x, y)] = N_edges.get((x, y), 0) + 1
        if any(k == m for k in y):
            hits += 1
    return TrajectoryObservables(Tn, Ln, pair, N_edges, T_sites, hits)


def fk_weight(traj: TrajectoryRecord, primal: ChainSpec, dual: ChainSpec, t: Optional[float] = None,
              components: bool = False):
    """Density of delta_x exp(t q') against the dual path law, evaluated on
    a dual path from the rate oracles (log space)."""
    t = traj.horizon if t is None else t
    if t > traj.horizon:
        raise ValueError("t exceeds the path horizon")
    d = primal.d

    def rates_at(chain, x):
        return chain.rates(x)

    def qhat(x, v):
        y = tuple(x[k] + v[k] for k in range(d))
        return primal.rates(y).get(tuple(-c for c in v), 0.0)

    def inflow(x):
        tot = 0.0
        for v in itertools.product((-1, 0, 1), repeat=d):
            if any(v) and all(0 <= x[k] + v[k] <= primal.params.m for k in range(d)):
                tot += qhat(x, v)
        return tot

    pot = 0.0
    comp = 0.0
    for s, dur in _holding(traj, t):
        x = traj.site(s)
        out = sum(rates_at(primal, x).values())
        pot += dur * (inflow(x) - out)
        if dual.in_boundary_layer(x):
            comp -= dur * (inflow(x) - sum(rates_at(dual, x).values()))
    jump = 0.0
    for time, a, b in traj.events:
        if time > t:
            break
        x, y = traj.site(a), traj.site(b)
        if not dual.in_boundary_layer(x):
            continue
        v = tuple(y[k] - x[k] for k in range(d))
        qt = rates_at(dual, x).get(v, 0.0)
        qh = qhat(x, v)
        if qt <= 0:
            raise SupportMismatchError(f"realized jump {x}->{y} has zero dual rate")
        jump += math.log(qh) - math.log(qt) if qh > 0 else -math.inf
    if components:
        return pot, jump, comp
    return math.exp(math.fsum([pot, jump, comp]))


# --- long single runs -------------------------------------------------------

@numba.njit(cache=True)
def _long_run_chunk(state, t, burn, horizon, dest, cum, total, occ, e, u):
    kmax = cum.shape[1]
    i = 0
    while i < e.shape[0]:
        dt = e[i] / total[state]
        tn = t + dt
        lo = t if t > burn else burn
        hi = tn if tn < horizon else horizon
        if hi > lo:
            occ[state] += hi - lo
        if tn >= horizon:
            return state, horizon, True
        x = u[i] * total[state]
        k = 0
        while k < kmax - 1 and x >= cum[state, k]:
            k += 1
        state = dest[state, k]
        t = tn
        i += 1
    return state, t, False


def occupation_times(compiled: CompiledChain, x0: int, T_burn: float, T_run: float, seed: int,
                     chunk: int = 1 << 20) -> tuple:
    """Time spent at each state during [T_burn, T_burn + T_run] by one path.

    Returns (occupation vector, final state).
    """
    flags = _StateFlags(compiled)
    rng = block_rng(seed, 0)
    occ = np.zeros(compiled.n_states)
    state, t, done = int(x0), 0.0, False
    horizon = T_burn + T_run
    while not done:
        e = rng.standard_exponential(chunk)
        u = rng.random(chunk)
        state, t, done = _long_run_chunk(state, t, T_burn, horizon, compiled.dest, flags.cum,
                                         flags.total, occ, e, u)
    return occ, int(state)


def stationary_histogram(compiled: CompiledChain, T_burn: Optional[float], T_run: float, grid=None,
                         seed: int = 0, x0=None) -> InvariantDensity:
    """Occupation-time estimate of the stationary density.

    ``grid`` is a list of per-axis bin edges in continuum units; by default
    each lattice site owns the cell ``[(k - 1/2) h, (k + 1/2) h)`` clipped to
    ``[0, K]``. Site mass is spread uniformly over its cell before binning.
    """
    chain = compiled.chain
    d, h, m = chain.d, chain.params.h, chain.params.m
    T_burn = 0.2 * T_run if T_burn is None else T_burn
    start = compiled.index(x0) if x0 is not None else 0
    occ, _ = occupation_times(compiled, start, T_burn, T_run, seed)
    mass = occ / occ.sum()
    upper = np.any(compiled.sites == m, axis=1)
    clamped = float(mass[upper].sum())
    return histogram_from_masses(compiled, mass, grid, counts=occ, clamped_mass=clamped)


def site_cells(m: int, h: float) -> tuple:
    lo = np.maximum((np.arange(m + 1) - 0.5) * h, 0.0)
    hi = np.minimum((np.arange(m + 1) + 0.5) * h, m * h)
    return lo, hi


def histogram_from_masses(compiled: CompiledChain, mass: np.ndarray, grid=None, counts=None,
                          clamped_mass: float = 0.0) -> InvariantDensity:
    chain = compiled.chain
    d, h, m = chain.d, chain.params.h, chain.params.m
    lo, hi = site_cells(m, h)
    if grid is None:
        grid = [np.concatenate([lo, hi[-1:]])] * d
    grid = [np.asarray(g, dtype=float) for g in grid]
    # fraction of each site cell falling in each bin, per axis
    overlap = []
    for g in grid:
        a = np.maximum(lo[:, None], g[None, :-1])
        b = np.minimum(hi[:, None], g[None, 1:])
        overlap.append(np.clip(b - a, 0.0, None) / (hi - lo)[:, None])
    M = mass.reshape((m + 1,) * d)
    H = M
    for axis, W in enumerate(overlap):
        H = np.moveaxis(np.tensordot(np.moveaxis(H, axis, -1), W, axes=([-1], [0])), -1, axis)
    widths = [np.diff(g) for g in grid]
    vol = widths[0]
    for w in widths[1:]:
        vol = np.multiply.outer(vol, w)
    C = None
    if counts is not None:
        C = counts.reshape((m + 1,) * d)
        for axis, W in enumerate(overlap):
            C = np.moveaxis(np.tensordot(np.moveaxis(C, axis, -1), W, axes=([-1], [0])), -1, axis)
    return InvariantDensity("histogram", edges=tuple(grid), values=H / vol, counts=C,
                            clamped_mass=clamped_mass)


def lattice_law_from_density(compiled: CompiledChain, p: InvariantDensity) -> np.ndarray:
    """Discretize a density onto the lattice: site mass ~ p(site) * cell volume."""
    chain = compiled.chain
    lo, hi = site_cells(chain.params.m, chain.params.h)
    w = hi - lo
    vol = np.prod(w[compiled.sites], axis=1)
    mass = p(compiled.points) * vol
    return mass / mass.sum()
