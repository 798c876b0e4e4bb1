"""Exact computations on small truncated lattices: generator assembly,
uniformization, stationary laws, time reversal and the discrete duality
identity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla
from scipy.stats import poisson

from .lattice import DEFAULT_STATE_CAP, ChainSpec, CompiledChain, compile_chain

POISSON_TAIL = 1e-13
DENSE_CAP = 500


class ReducibleError(ValueError):
    def __init__(self, msg, witness=()):
        super().__init__(msg)
        self.witness = witness


@dataclass(frozen=True)
class GeneratorMatrix:
    """Sparse Q-matrix over an enumerated state space (row sums zero)."""

    Q: sp.csr_matrix
    sites: Optional[np.ndarray] = None
    compiled: Optional[CompiledChain] = None

    @property
    def n_states(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def from_dense(cls, Q, sites=None) -> "GeneratorMatrix":
        Q = np.array(Q, dtype=float)
        np.fill_diagonal(Q, 0.0)
        if np.any(Q < 0):
            raise ValueError("off-diagonal rates must be nonnegative")
        np.fill_diagonal(Q, -Q.sum(axis=1))
        return cls(sp.csr_matrix(Q), sites)

    def dense(self) -> np.ndarray:
        return self.Q.toarray()

    def index(self, site) -> int:
        return self.compiled.index(site)


def check_irreducible(Q: sp.spmatrix) -> None:
    ncomp, labels = csgraph.connected_components(Q, directed=True, connection="strong")
    if ncomp > 1:
        a = int(np.nonzero(labels == labels[0])[0][0])
        b = int(np.nonzero(labels != labels[0])[0][0])
        raise ReducibleError(f"generator has {ncomp} communicating classes", witness=(a, b))


def assemble_generator(chain, cap: int = DEFAULT_STATE_CAP) -> GeneratorMatrix:
    compiled = chain if isinstance(chain, CompiledChain) else compile_chain(chain, cap)
    S = compiled.n_states
    rows = np.repeat(np.arange(S), compiled.rate.shape[1])
    mask = compiled.rate.ravel() > 0
    Q = sp.coo_matrix((compiled.rate.ravel()[mask], (rows[mask], compiled.dest.ravel()[mask])),
                      shape=(S, S)).tocsr()
    Q = (Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())).tocsr()
    check_irreducible(Q)
    return GeneratorMatrix(Q, compiled.sites, compiled)


def _exp_apply(M: sp.spmatrix, v: np.ndarray, t: float, norm: str, tol: float = POISSON_TAIL) -> np.ndarray:
    """exp(t M) v for M with nonnegative off-diagonal, by uniformization.

    ``norm`` picks the operator norm ("inf" or "1") used to bound the
    truncated Poisson tail.
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t!r}")
    v = np.asarray(v, dtype=float)
    if t == 0:
        return v.copy()
    lam = float(max(-M.diagonal().min(), 0.0))
    if lam == 0.0:
        lam = 1.0
    B = (M / lam + sp.identity(M.shape[0], format="csr")).tocsr()
    absB = abs(B)
    beta = float(np.asarray(absB.sum(axis=1 if norm == "inf" else 0)).max())
    mu = lam * t
    # tail of sum_k e^{-mu} (mu beta)^k / k! is e^{mu(beta-1)} times a
    # Poisson(mu beta) tail; search for the cutoff in log space
    nu = mu * max(beta, 1.0)
    log_target = np.log(tol) - mu * max(beta - 1.0, 0.0)
    lo, hi = int(nu), int(nu + 10.0 * np.sqrt(nu) + 50)
    while poisson.logsf(hi, nu) > log_target:
        lo, hi = hi, 2 * hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if poisson.logsf(mid, nu) > log_target:
            lo = mid
        else:
            hi = mid
    N = hi + 2
    w = poisson.pmf(np.arange(N + 1), mu)
    out = w[0] * v
    term = v
    for k in range(1, N + 1):
        term = B @ term
        out = out + w[k] * term
    return out


def transient(G: GeneratorMatrix, mu0, t: float) -> np.ndarray:
    """Row vector mu0 exp(tQ)."""
    return _exp_apply(G.Q.T.tocsr(), mu0, t, norm="1")


def expect(G: GeneratorMatrix, f, t: float) -> np.ndarray:
    """Column vector exp(tQ) f, i.e. x -> E^x[f(Y(t))]."""
    return _exp_apply(G.Q, f, t, norm="inf")


def fk_semigroup_apply(G: GeneratorMatrix, g, t: float) -> np.ndarray:
    """exp(t Q') g: the value at x is sum_y exp(tQ)_{y,x} g(y)."""
    return _exp_apply(G.Q.T.tocsr(), g, t, norm="inf")


def dense_expm(G: GeneratorMatrix, t: float) -> np.ndarray:
    if G.n_states > DENSE_CAP:
        raise ValueError(f"dense exponential limited to {DENSE_CAP} states")
    return scipy.linalg.expm(t * G.dense())


def stationary_solve(G: GeneratorMatrix, refine: int = 3) -> np.ndarray:
    check_irreducible(G.Q)
    S = G.n_states
    A = G.Q.T.tolil()
    A[S - 1, :] = np.ones(S)
    A = A.tocsc()
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    lu = spla.splu(A)
    pi = lu.solve(rhs)
    for _ in range(refine):
        r = rhs - A @ pi
        if np.max(np.abs(r)) < 1e-15:
            break
        pi = pi + lu.solve(r)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def stationary_residual(G: GeneratorMatrix, pi) -> float:
    return float(np.max(np.abs(G.Q.T @ pi)))


def reversal_generator(G: GeneratorMatrix, pi) -> GeneratorMatrix:
    """Generator of the stationary chain run backwards: pi_y q_{y,x} / pi_x."""
    pi = np.asarray(pi, dtype=float)
    if np.any(pi <= 0):
        raise ValueError(f"stationary law has a zero entry at state {int(np.argmin(pi))}")
    Qt = G.Q.T.tocsr()
    off = Qt - sp.diags(Qt.diagonal())
    Qs = sp.diags(1.0 / pi) @ off @ sp.diags(pi)
    Qs = (Qs - sp.diags(np.asarray(Qs.sum(axis=1)).ravel())).tocsr()
    return GeneratorMatrix(Qs, G.sites, G.compiled)


def duality_check_exact(G: GeneratorMatrix, f, g, t: float) -> float:
    """|sum_x f(x) (P^_t g)(x) - sum_x E^x[f(Y(t))] g(x)|."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    return float(abs(f @ fk_semigroup_apply(G, g, t) - g @ expect(G, f, t)))


def write_coo(G: GeneratorMatrix, path) -> None:
    Q = G.Q.tocoo()
    order = np.lexsort((Q.col, Q.row))
    with open(path, "w") as fh:
        fh.write(f"% {G.n_states} {G.n_states} {Q.nnz}\n")
        for k in order:
            fh.write(f"{Q.row[k]} {Q.col[k]} {Q.data[k]:.17g}\n")


def write_distribution(G: GeneratorMatrix, pi, path) -> None:
    d = G.sites.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join([f"k{i + 1}" for i in range(d)] + ["probability"]) + "\n")
        for site, p in zip(G.sites, pi):
            fh.write(",".join([str(int(k)) for k in site] + [format(float(p), ".17g")]) + "\n")
