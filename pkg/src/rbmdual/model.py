"""RBM problem data: the triple (b, A, R), its validity checks, and the
small dense linear algebra used by the lattice and verification code."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SYM_TOL = 1e-9
DET_REL_TOL = 1e-12
SQRT_TOL = 1e-10


class SpecError(ValueError):
    """Structural problem with an RBM specification (shapes, symmetry)."""


class InvalidDensityError(ValueError):
    pass


class SPDError(ValueError):
    pass


def _as_matrix(rows, d: int, name: str) -> tuple:
    rows = tuple(tuple(r) for r in rows)
    if len(rows) != d:
        raise SpecError(f"{name}: expected {d} rows, got {len(rows)}")
    for i, r in enumerate(rows):
        if len(r) != d:
            raise SpecError(f"{name}: row {i} has length {len(r)}, expected {d}")
    return rows


@dataclass(frozen=True)
class RbmSpec:
    """Drift ``b``, covariance ``A`` and reflection matrix ``R`` of an RBM in
    the orthant.

    Entries are kept exactly as given (floats, ints or ``Fraction``), so the
    rate tables built from a spec can be evaluated in exact arithmetic.
    """

    b: tuple
    A: tuple
    R: tuple

    def __post_init__(self):
        b = tuple(self.b)
        d = len(b)
        if d < 1:
            raise SpecError("b: dimension must be at least 1")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "A", _as_matrix(self.A, d, "A"))
        object.__setattr__(self, "R", _as_matrix(self.R, d, "R"))
        A = self.A_arr
        if not np.all(np.isfinite(A)) or not np.all(np.isfinite(self.R_arr)):
            raise SpecError("A and R must be finite")
        if np.max(np.abs(A - A.T)) > SYM_TOL:
            i, j = np.unravel_index(np.argmax(np.abs(A - A.T)), A.shape)
            raise SpecError(f"A: not symmetric (a[{i}][{j}]={A[i, j]!r}, a[{j}][{i}]={A[j, i]!r})")

    @property
    def d(self) -> int:
        return len(self.b)

    @property
    def b_arr(self) -> np.ndarray:
        return np.array([float(v) for v in self.b])

    @property
    def A_arr(self) -> np.ndarray:
        return np.array([[float(v) for v in r] for r in self.A])

    @property
    def R_arr(self) -> np.ndarray:
        return np.array([[float(v) for v in r] for r in self.R])

    @property
    def Rstar(self) -> tuple:
        return dual_reflection(self.R)

    def zeta(self, i: int):
        """Constant making the +e_i interior rate equal ``n a_ii / zeta_i``."""
        a = self.A
        off = sum(abs(a[i][j]) for j in range(self.d) if j != i)
        return 2 * a[i][i] / (a[i][i] - off)

    def with_(self, b=None, R=None) -> "RbmSpec":
        return RbmSpec(self.b if b is None else tuple(b), self.A, self.R if R is None else R)


@dataclass
class Condition:
    name: str
    passed: bool
    witness: str = ""


@dataclass
class ValidationReport:
    conditions: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def failed(self) -> list:
        return [c for c in self.conditions if not c.passed]

    def lines(self) -> list:
        return [f"{'PASS' if c.passed else 'FAIL'}  {c.name}  {c.witness}".rstrip()
                for c in self.conditions]


def principal_subsets(d: int):
    for k in range(1, d + 1):
        yield from itertools.combinations(range(d), k)


def _row_sum_condition(M: np.ndarray, label: str) -> Condition:
    for I in principal_subsets(M.shape[0]):
        sub = M[np.ix_(I, I)]
        sums = sub.sum(axis=1)
        if np.any(sums <= 0):
            k = int(np.argmin(sums))
            return Condition(f"row sums of principal submatrices of {label} > 0", False,
                             f"subset {list(I)}: row {I[k]} sums to {fmt_num(sums[k])}")
    return Condition(f"row sums of principal submatrices of {label} > 0", True)


def validate_assumption(spec: RbmSpec) -> ValidationReport:
    """Check the standing assumption: strict diagonal dominance of A, R
    invertible with R^{-1} b < 0, and positive row sums for every principal
    submatrix of R and of its dual."""
    A, R, b = spec.A_arr, spec.R_arr, spec.b_arr
    d = spec.d
    rep = ValidationReport()

    off = np.abs(A).sum(axis=1) - np.abs(np.diag(A))
    bad = np.nonzero(np.diag(A) <= off)[0]
    if bad.size:
        i = int(bad[0])
        rep.conditions.append(Condition("A strictly diagonally dominant", False,
                                        f"a[{i}][{i}]={fmt_num(A[i, i])} <= {fmt_num(off[i])}"))
    else:
        rep.conditions.append(Condition("A strictly diagonally dominant", True))

    det = float(np.linalg.det(R))
    scale = float(np.abs(R).sum(axis=1).max()) ** d
    invertible = abs(det) > DET_REL_TOL * scale
    rep.conditions.append(Condition("R invertible", invertible, f"det={fmt_num(det)}"))

    if invertible:
        w = np.linalg.solve(R, b)
        rep.conditions.append(Condition("R^-1 b < 0", bool(np.all(w < 0)),
                                        "R^-1 b = " + fmt_vec(w)))
    else:
        rep.conditions.append(Condition("R^-1 b < 0", False, "R singular"))

    rep.conditions.append(_row_sum_condition(R, "R"))
    rep.conditions.append(_row_sum_condition(np.array(dual_reflection(R), dtype=float), "R*"))
    return rep


def dual_reflection(R):
    """Reflect column j of R about e_j: keeps the diagonal, negates the rest.

    Accepts a nested sequence or an array and returns the same kind.
    """
    if isinstance(R, np.ndarray):
        out = -R.copy()
        np.fill_diagonal(out, np.diag(R))
        return out
    d = len(R)
    return tuple(tuple(R[i][j] if i == j else -R[i][j] for j in range(d)) for i in range(d))


@dataclass(frozen=True)
class InvariantDensity:
    """Stationary density of the RBM.

    ``kind == "product-exponential"`` carries ``eta`` and ``normalizer``;
    ``kind == "histogram"`` carries per-axis bin ``edges`` and ``values``
    (density per unit volume), plus the raw ``counts`` (occupation time per
    cell) for error assessment.
    """

    kind: str
    eta: Optional[np.ndarray] = None
    Dmat: Optional[np.ndarray] = None
    normalizer: float = 1.0
    edges: Optional[tuple] = None
    values: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    clamped_mass: float = 0.0

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "product-exponential":
            return self.normalizer * np.exp(-x @ self.eta)
        idx = []
        inside = np.ones(x.shape[0], dtype=bool)
        for k, e in enumerate(self.edges):
            j = np.searchsorted(e, x[:, k], side="right") - 1
            inside &= (j >= 0) & (j < len(e) - 1)
            idx.append(np.clip(j, 0, len(e) - 2))
        out = self.values[tuple(idx)]
        return np.where(inside, out, 0.0)

    def mean(self) -> np.ndarray:
        if self.kind == "product-exponential":
            return 1.0 / self.eta
        means = []
        d = len(self.edges)
        for k, e in enumerate(self.edges):
            axes = tuple(a for a in range(d) if a != k)
            widths = [np.diff(ee) for ee in self.edges]
            mass = self.values * _outer(widths)
            marg = mass.sum(axis=axes) if axes else mass
            means.append(float(np.sum(marg * 0.5 * (e[1:] + e[:-1]))))
        return np.array(means)


def _outer(vectors):
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def skew_check(spec: RbmSpec, tol: float = SYM_TOL) -> Optional[InvariantDensity]:
    """Return the product-exponential stationary density when 2A = RD + DR'.

    Returns None when the skew-symmetry condition fails.
    """
    A, R, b = spec.A_arr, spec.R_arr, spec.b_arr
    D = np.diag(np.diag(A))
    if np.max(np.abs(2 * A - R @ D - D @ R.T)) > tol:
        return None
    eta = -2.0 * np.linalg.solve(R @ D, b)
    if np.any(eta <= 0):
        raise InvalidDensityError(f"eta = {fmt_vec(eta)} has a nonpositive component")
    return InvariantDensity("product-exponential", eta=eta, Dmat=D, normalizer=float(np.prod(eta)))


def sym_sqrt(A) -> np.ndarray:
    """Symmetric positive-definite square root via eigendecomposition."""
    A = np.asarray(A, dtype=float)
    lam, U = np.linalg.eigh(0.5 * (A + A.T))
    if np.any(lam <= 0):
        raise SPDError(f"matrix is not positive definite (eigenvalues {fmt_vec(lam)})")
    M = (U * np.sqrt(lam)) @ U.T
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class DualData:
    Rstar: np.ndarray
    Ahalf: np.ndarray
    U: np.ndarray
    eigenvalues: np.ndarray


def dual_data(spec: RbmSpec) -> DualData:
    A = spec.A_arr
    lam, U = np.linalg.eigh(A)
    return DualData(dual_reflection(spec.R_arr), sym_sqrt(A), U, lam)


def reversed_drift_candidates(spec: RbmSpec) -> dict:
    """Both signs of -b +/- 2 A^{1/2} (RD)^{-1} b for the skew-symmetric case."""
    A, R, b = spec.A_arr, spec.R_arr, spec.b_arr
    D = np.diag(np.diag(A))
    corr = 2.0 * sym_sqrt(A) @ np.linalg.solve(R @ D, b)
    return {"+": -b + corr, "-": -b - corr}


def fmt_num(v) -> str:
    return format(float(v), ".17g")


def fmt_vec(v: Sequence) -> str:
    return "(" + ", ".join(fmt_num(x) for x in v) + ")"


def fmt_matrix(M) -> str:
    return "[" + "; ".join(" ".join(fmt_num(x) for x in row) for row in np.asarray(M, dtype=float)) + "]"
