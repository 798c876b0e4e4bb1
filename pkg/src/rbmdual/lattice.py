"""Jump-rate tables for the lattice approximation of an RBM and for its dual.

Sites are integer multi-indices ``k`` in ``{0, ..., m}^d``; the continuum point
is ``k * h`` with ``h = 1/sqrt(n)``. Directions are integer vectors in
``{-1, 0, 1}^d`` (units of h). A rate table is a plain ``dict`` mapping a
direction tuple to a nonnegative rate per unit time.

All table builders use only ``+ - * /``, ``abs`` and comparisons on the RbmSpec
entries, so an RbmSpec built from ``fractions.Fraction`` gives exact tables when
``n`` is a perfect square.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .model import RbmSpec

DEFAULT_STATE_CAP = 200_000


class ScaleTooSmallError(ValueError):
    pass


class ConstantsError(ValueError):
    pass


class AssumptionViolation(ValueError):
    pass


class DomainError(ValueError):
    pass


class StateCapError(ValueError):
    def __init__(self, required: int, cap: int):
        super().__init__(f"lattice has {required} states, cap is {cap}")
        self.required = required
        self.cap = cap


def sqrt_n(n: int):
    """sqrt(n), exact (an int) when n is a perfect square."""
    r = math.isqrt(n)
    return r if r * r == n else math.sqrt(n)


def _pos(x):
    return x if x > 0 else 0 * x


def _neg(x):
    return -x if x < 0 else 0 * x


def unit(d: int, i: int, s: int = 1) -> tuple:
    v = [0] * d
    v[i] = s
    return tuple(v)


def _add(table: dict, v: tuple, rate) -> None:
    if rate < 0:
        raise ScaleTooSmallError(f"negative rate {rate!r} for direction {v}")
    if rate > 0:
        table[v] = table.get(v, 0) + rate


@dataclass(frozen=True)
class LatticeParams:
    """Scale ``n`` (step 1/sqrt(n)) and truncation ``K = m * h``."""

    n: int
    m: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be a positive integer")
        if self.m < 0:
            raise ValueError("m must be nonnegative")

    @classmethod
    def from_K(cls, n: int, K: float) -> "LatticeParams":
        steps = K * math.sqrt(n)
        m = int(round(steps))
        if abs(steps - m) > 1e-9 * max(1.0, steps):
            raise DomainError(f"K={K!r} is not a multiple of h=1/sqrt({n})")
        return cls(n, m)

    @property
    def h(self) -> float:
        return 1.0 / math.sqrt(self.n)

    @property
    def K(self) -> float:
        return self.m * self.h

    def n_states(self, d: int) -> int:
        return (self.m + 1) ** d


@dataclass(frozen=True)
class BoundaryConstants:
    """Free positive constants of the boundary rates.

    Face sites (|I| = 1) use ``c_{j,+} = c0 + (mu)_+`` and
    ``c_{j,-} = c0 + (mu)_-`` with ``mu = -r_ii a_ij / a_ii``, which fixes
    their difference as required while keeping both positive. Higher
    codimension sites use ``c_{j,+} = c_{j,-} = c0``. On two-dimensional
    faces with ``a_ij > 0`` the single diagonal jump ``e_i + e_j`` gets rate
    ``n * kappa`` with ``kappa = corner_share * min(s_i, s_j)``, where
    ``s_i`` is the row sum of R over I; the axis jumps get the remainder
    ``n * (s_i - kappa)``.
    """

    c0: float = 1.0
    corner_share: float = 0.5
    policy: str = "shifted-c0/min-split"

    def __post_init__(self):
        if not self.c0 > 0:
            raise ConstantsError(f"c0 must be positive, got {self.c0!r}")
        if not 0 < self.corner_share < 1:
            raise ConstantsError(f"corner_share must lie in (0, 1), got {self.corner_share!r}")

    def face(self, spec: RbmSpec, i: int, j: int) -> tuple:
        mu = -spec.R[i][i] * spec.A[i][j] / spec.A[i][i]
        return self.c0 + _pos(mu), self.c0 + _neg(mu)

    def corner_kappa(self, s_i, s_j):
        return self.corner_share * min(s_i, s_j)


def zeta(spec: RbmSpec, i: int):
    return spec.zeta(i)


def min_scale(spec: RbmSpec) -> int:
    """Smallest n with every interior (hence every) rate nonnegative."""
    need = 1
    for i in range(spec.d):
        b = float(spec.b[i])
        if b > 0:
            a = float(spec.A[i][i])
            z = float(spec.zeta(i))
            need = max(need, math.ceil((z * b / a) ** 2 - 1e-9))
    while need > 1 and _interior_ok(spec, need - 1):
        need -= 1
    while not _interior_ok(spec, need):
        need += 1
    return need


def _interior_ok(spec: RbmSpec, n: int) -> bool:
    rn = math.sqrt(n)
    return all(n * float(spec.A[i][i]) / float(spec.zeta(i)) - rn * float(spec.b[i]) >= -1e-12
               for i in range(spec.d))


def interior_rates(spec: RbmSpec, n: int, drift=None) -> dict:
    """Spatially homogeneous rates at sites with all coordinates positive.

    ``drift`` overrides b (pass zeros for the drift-free table).
    """
    d = spec.d
    A = spec.A
    b = spec.b if drift is None else drift
    rn = sqrt_n(n)
    t: dict = {}
    for i in range(d):
        base = n * A[i][i] / spec.zeta(i)
        _add(t, unit(d, i), base)
        _add(t, unit(d, i, -1), base - rn * b[i])
    for i, j in itertools.combinations(range(d), 2):
        up = n * _pos(A[i][j]) / 2
        dn = n * _neg(A[i][j]) / 2
        eij = tuple(unit(d, i)[k] + unit(d, j)[k] for k in range(d))
        fij = tuple(unit(d, i)[k] - unit(d, j)[k] for k in range(d))
        for s in (1, -1):
            _add(t, tuple(s * v for v in eij), up)
            _add(t, tuple(s * v for v in fij), dn)
    return t


def dual_interior_rates(spec: RbmSpec, n: int) -> dict:
    """Transpose of the homogeneous interior table: rate(v) = primal rate(-v)."""
    return {tuple(-x for x in v): r for v, r in interior_rates(spec, n).items()}


def _row_sums(R, I) -> list:
    return [sum(R[i][l] for l in I) for i in range(len(R))]


def _face_rates(spec: RbmSpec, n: int, i: int, R, constants: BoundaryConstants,
                raising: Optional[dict] = None) -> dict:
    d = spec.d
    A = spec.A
    t: dict = {}
    if raising is None:
        rii = R[i][i]
        for j in range(d):
            if j != i and A[i][j] != 0:
                v = list(unit(d, i))
                v[j] = 1 if A[i][j] >= 0 else -1
                _add(t, tuple(v), n * rii * abs(A[i][j]) / A[i][i])
        _add(t, unit(d, i), n * rii * 2 / spec.zeta(i))
    else:
        for v, r in raising.items():
            _add(t, v, r)
    for j in range(d):
        if j == i:
            continue
        cp, cm = constants.face(spec, i, j)
        _add(t, unit(d, j), n * _pos(R[j][i]) + n * cp)
        _add(t, unit(d, j, -1), n * _neg(R[j][i]) + n * cm)
    return t


def _corner_rates(spec: RbmSpec, n: int, I: tuple, R, constants: BoundaryConstants) -> dict:
    d = spec.d
    t: dict = {}
    s = _row_sums(R, I)
    for i in I:
        if not s[i] > 0:
            raise AssumptionViolation(f"row {i} of R restricted to {list(I)} sums to {s[i]!r} <= 0")
    share = {i: s[i] for i in I}
    if len(I) == 2:
        i, j = I
        if spec.A[i][j] > 0:
            kappa = constants.corner_kappa(s[i], s[j])
            v = tuple(1 if k in I else 0 for k in range(d))
            _add(t, v, n * kappa)
            share = {i: s[i] - kappa, j: s[j] - kappa}
    for i in I:
        _add(t, unit(d, i), n * share[i])
    c = constants.c0
    for j in range(d):
        if j in I:
            continue
        _add(t, unit(d, j), n * sum(_pos(R[j][l]) for l in I) + n * c)
        _add(t, unit(d, j, -1), n * sum(_neg(R[j][l]) for l in I) + n * c)
    return t


def boundary_rates(spec: RbmSpec, n: int, I, constants: BoundaryConstants = BoundaryConstants()) -> dict:
    """Rates at a site of the face {x_i = 0, i in I; x_j > 0 otherwise}."""
    I = tuple(sorted(I))
    if not I:
        raise ValueError("I must be nonempty")
    if len(I) == 1:
        return _face_rates(spec, n, I[0], spec.R, constants)
    return _corner_rates(spec, n, I, spec.R, constants)


def dual_raising_rates(spec: RbmSpec, n: int, i: int) -> dict:
    """Coordinate-raising rates of the dual chain on the face x_i = 0.

    Proportional to the primal rates of the reverse jumps from the interior,
    normalized to total ``n r_ii``.
    """
    d = spec.d
    A = spec.A
    rn = sqrt_n(n)
    down = n * A[i][i] / spec.zeta(i) - rn * spec.b[i]
    weights = {unit(d, i): down}
    for j in range(d):
        if j != i and A[i][j] != 0:
            v = list(unit(d, i))
            v[j] = 1 if A[i][j] >= 0 else -1
            weights[tuple(v)] = n * abs(A[i][j]) / 2
    total = sum(weights.values())
    rii = spec.R[i][i]
    if total == 0:
        return {unit(d, i): n * rii}
    return {v: n * rii * w / total for v, w in weights.items()}


def dual_boundary_rates(spec: RbmSpec, n: int, I, constants: BoundaryConstants = BoundaryConstants()) -> dict:
    I = tuple(sorted(I))
    Rs = spec.Rstar
    if len(I) == 1:
        i = I[0]
        return _face_rates(spec, n, i, Rs, constants, raising=dual_raising_rates(spec, n, i))
    return _corner_rates(spec, n, I, Rs, constants)


def table_drift(table: dict, n: int) -> list:
    """Sum of rate * direction in continuum units (lattice drift times h)."""
    d = len(next(iter(table))) if table else 0
    rn = sqrt_n(n)
    return [sum(r * v[k] for v, r in table.items()) / rn for k in range(d)]


def table_second_moment(table: dict, n: int) -> list:
    """Sum of rate * v v' * h^2."""
    d = len(next(iter(table))) if table else 0
    return [[sum(r * v[k] * v[l] for v, r in table.items()) / n for l in range(d)] for k in range(d)]


@dataclass(frozen=True)
class ChainSpec:
    """Truncated lattice chain, primal or dual, given as a rate oracle."""

    spec: RbmSpec
    params: LatticeParams
    constants: BoundaryConstants = field(default_factory=BoundaryConstants)
    kind: str = "primal"

    def __post_init__(self):
        if self.kind not in ("primal", "dual"):
            raise ValueError(f"unknown chain kind {self.kind!r}")
        if self.params.n < min_scale(self.spec):
            raise ScaleTooSmallError(f"n={self.params.n} below min_scale={min_scale(self.spec)}")
        if self.params.m < 1:
            raise ValueError("lattice must have at least two sites per axis (K >= h)")

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def n(self) -> int:
        return self.params.n

    def classify(self, site) -> tuple:
        """(zero coordinates, clamped coordinates) of a site."""
        m = self.params.m
        return (tuple(i for i, k in enumerate(site) if k == 0),
                tuple(i for i, k in enumerate(site) if k == m))

    def in_boundary_layer(self, site) -> bool:
        return any(k <= 1 for k in site)

    def rates(self, site) -> dict:
        site = tuple(int(k) for k in site)
        m = self.params.m
        if len(site) != self.d or any(k < 0 or k > m for k in site):
            raise DomainError(f"site {site} outside the lattice {{0..{m}}}^{self.d}")
        I, upper = self.classify(site)
        return dict(_class_table(self, I, upper))

    def dual(self) -> "ChainSpec":
        return build_dual_chain(self)


@lru_cache(maxsize=4096)
def _class_table(chain: ChainSpec, I: tuple, upper: tuple) -> tuple:
    spec, n, c = chain.spec, chain.params.n, chain.constants
    if chain.kind == "primal":
        t = boundary_rates(spec, n, I, c) if I else interior_rates(spec, n)
    else:
        t = dual_boundary_rates(spec, n, I, c) if I else dual_interior_rates(spec, n)
    out = []
    for v, r in sorted(t.items()):
        if any(v[i] < 0 for i in I) or any(v[i] > 0 for i in upper):
            continue
        out.append((v, r))
    return tuple(out)


def build_chain(spec: RbmSpec, params: LatticeParams,
                constants: BoundaryConstants = BoundaryConstants()) -> ChainSpec:
    return ChainSpec(spec, params, constants, "primal")


def build_dual_chain(primal: ChainSpec) -> ChainSpec:
    """Dual chain: transposed interior rates (drift -b), reflection R*, face
    raising rates from the proportionality system, same boundary constants."""
    return ChainSpec(primal.spec, primal.params, primal.constants, "dual")


def enumerate_sites(params: LatticeParams, d: int, cap: int = DEFAULT_STATE_CAP) -> np.ndarray:
    S = params.n_states(d)
    if S > cap:
        raise StateCapError(S, cap)
    grids = np.meshgrid(*[np.arange(params.m + 1)] * d, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


@dataclass(frozen=True)
class CompiledChain:
    """Array form of a chain over the enumerated lattice.

    ``dest[s, k]`` / ``rate[s, k]`` list the jumps out of state ``s`` (padded
    with ``dest = s``, ``rate = 0``); ``dirs[s, k]`` is the direction.
    States are in lexicographic order of the multi-index.
    """

    chain: ChainSpec
    sites: np.ndarray
    dest: np.ndarray
    rate: np.ndarray
    dirs: np.ndarray

    @property
    def n_states(self) -> int:
        return self.sites.shape[0]

    @property
    def total(self) -> np.ndarray:
        return self.rate.sum(axis=1)

    def index(self, site) -> int:
        m1 = self.chain.params.m + 1
        idx = 0
        for k in site:
            idx = idx * m1 + int(k)
        return idx

    def indices(self, sites: np.ndarray) -> np.ndarray:
        sites = np.asarray(sites, dtype=np.int64)
        m1 = self.chain.params.m + 1
        idx = np.zeros(sites.shape[0], dtype=np.int64)
        for k in range(sites.shape[1]):
            idx = idx * m1 + sites[:, k]
        return idx

    @property
    def points(self) -> np.ndarray:
        return self.sites * self.chain.params.h


def compile_chain(chain: ChainSpec, cap: int = DEFAULT_STATE_CAP) -> CompiledChain:
    d = chain.d
    sites = enumerate_sites(chain.params, d, cap)
    rows = [list(_class_table(chain, *chain.classify(tuple(s)))) for s in sites]
    kmax = max(1, max(len(r) for r in rows))
    S = sites.shape[0]
    dest = np.tile(np.arange(S, dtype=np.int64)[:, None], (1, kmax))
    rate = np.zeros((S, kmax))
    dirs = np.zeros((S, kmax, d), dtype=np.int64)
    m1 = chain.params.m + 1
    stride = m1 ** np.arange(d - 1, -1, -1)
    for s, row in enumerate(rows):
        for k, (v, r) in enumerate(row):
            dest[s, k] = s + int(np.dot(v, stride))
            rate[s, k] = float(r)
            dirs[s, k] = v
    return CompiledChain(chain, sites, dest, rate, dirs)


def potential(primal: CompiledChain) -> np.ndarray:
    """V(x) = sum_y (q_{y,x} - q_{x,y}): inflow minus outflow at each site."""
    inflow = np.zeros(primal.n_states)
    np.add.at(inflow, primal.dest.ravel(), primal.rate.ravel())
    return inflow - primal.total


def dump_rows(compiled: CompiledChain):
    """(site, direction, rate) rows, lexicographic by site then direction."""
    for s in range(compiled.n_states):
        site = tuple(int(k) for k in compiled.sites[s])
        row = sorted((tuple(int(x) for x in compiled.dirs[s, k]), compiled.rate[s, k])
                     for k in range(compiled.rate.shape[1]) if compiled.rate[s, k] > 0)
        for v, r in row:
            yield site, v, r
