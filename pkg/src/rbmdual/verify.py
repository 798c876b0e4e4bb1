"""Statistical and exact checks of the duality and time-reversal identities.

Every check returns a :class:`VerificationReport`; pass/fail is recomputed
from the recorded numbers and tolerance rule.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exact import (assemble_generator, fk_semigroup_apply, reversal_generator, stationary_solve,
                    duality_check_exact)
from .lattice import (BoundaryConstants, LatticeParams, build_chain, build_dual_chain, compile_chain,
                      min_scale, table_drift)
from .model import InvariantDensity, RbmSpec, reversed_drift_candidates, skew_check
from .simulate import (lattice_law_from_density, mean_stderr, run_ensemble, stationary_histogram,
                       weight_tables)

Z = 4.0


class InconclusiveError(RuntimeError):
    pass


@dataclass
class VerificationReport:
    name: str
    passed: Optional[bool]
    reference: dict = field(default_factory=dict)
    estimate: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)
    tolerance: str = ""
    provenance: str = ""
    seeds: list = field(default_factory=list)
    runtime: float = 0.0
    skipped: str = ""
    details: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        if self.passed is None:
            return "SKIP"
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["status"] = self.status
        return out

    def summary(self) -> str:
        parts = [f"{self.status:4s} {self.name}"]
        if self.skipped:
            parts.append(f"skipped: {self.skipped}")
        for k, v in self.estimate.items():
            se = self.stderr.get(k)
            ref = self.reference.get(k)
            s = f"{k}={_f(v)}"
            if se is not None:
                s += f"+-{_f(se)}"
            if ref is not None:
                s += f" (ref {_f(ref)})"
            parts.append(s)
        if self.tolerance:
            parts.append(f"[{self.tolerance}]")
        return "  ".join(parts)


def _f(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return "(" + ", ".join(_f(x) for x in v) + ")"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def _site(point, n: int) -> tuple:
    rn = math.sqrt(n)
    out = []
    for x in point:
        k = x * rn
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"point {tuple(point)} is not on the lattice with h=1/sqrt({n})")
        out.append(int(round(k)))
    return tuple(out)


def _values(fn, points: np.ndarray) -> np.ndarray:
    if callable(fn):
        return np.asarray(fn(points), dtype=float)
    return np.asarray(fn, dtype=float)


def bump(center, radius: float) -> Callable:
    """Smooth bump supported on the open ball of given radius."""
    c = np.asarray(center, dtype=float)

    def f(x):
        r2 = np.sum((np.atleast_2d(x) - c) ** 2, axis=1) / radius ** 2
        out = np.zeros(r2.shape)
        inside = r2 < 1
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
        return out

    return f


def continuum_weight(spec: RbmSpec, L: np.ndarray) -> np.ndarray:
    """exp(-2 sum_i b_i r_ii / a_ii * L_i) per path."""
    b, A, R = spec.b_arr, spec.A_arr, spec.R_arr
    coef = -2.0 * b * np.diag(R) / np.diag(A)
    return np.exp(L @ coef)


def lattice_weight(spec: RbmSpec, n: int, L: np.ndarray) -> np.ndarray:
    """prod_i (1 - 2 b_i / (sqrt(n) a_ii))^(sqrt(n) r_ii L_i): the finite-n
    form that tends to the continuum weight."""
    b, A, R = spec.b_arr, spec.A_arr, spec.R_arr
    rn = math.sqrt(n)
    base = np.log1p(-2.0 * b / (rn * np.diag(A)))
    return np.exp(L @ (base * rn * np.diag(R)))


def _pass_rule(gap, se, allowance=0.0):
    return bool(abs(gap) <= Z * se + allowance)


# --- lattice Feynman-Kac weight ---------------------------------------------

def test_fk_vs_exact(spec: RbmSpec, n: int, K: float, x0, g, t: float, M: int, seed: int = 0,
                     constants: BoundaryConstants = BoundaryConstants(), threads=None) -> VerificationReport:
    """Monte Carlo mean of weight * g(dual(t)) against exp(t q') g."""
    t_start = time.perf_counter()
    params = LatticeParams.from_K(n, K)
    primal = build_chain(spec, params, constants)
    cp, cd = compile_chain(primal), compile_chain(build_dual_chain(primal))
    G = assemble_generator(cp)
    gv = _values(g, cp.points)
    s0 = cp.index(_site(x0, n))
    exact = float(fk_semigroup_apply(G, gv, t)[s0])
    res = run_ensemble(cd, s0, M, t, seed, weights=weight_tables(cp, cd), threads=threads)
    est, se = mean_stderr(res.weight * gv[res.final])
    diff = est - exact
    if exact == 0.0 and se == 0.0:
        ok = est == 0.0
    else:
        ok = abs(diff) <= Z * se and se <= 0.05 * abs(exact)
    return VerificationReport(
        "fk_vs_exact", ok, reference={"value": exact}, estimate={"value": est}, stderr={"value": se},
        tolerance="|diff| <= 4 se and se <= 5% |exact|", provenance="uniformization of exp(t q') g",
        seeds=[seed], runtime=time.perf_counter() - t_start,
        details={"n": n, "K": K, "x0": list(x0), "t": t, "M": M, "diff": diff})


def test_duality_exact(spec: RbmSpec, n: int, K: float, ts: Sequence[float], trials: int = 20,
                       seed: int = 0, tol: float = 1e-9,
                       constants: BoundaryConstants = BoundaryConstants()) -> VerificationReport:
    """Max residual of the discrete duality over random f, g."""
    t_start = time.perf_counter()
    G = assemble_generator(build_chain(spec, LatticeParams.from_K(n, K), constants))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in ts:
        for _ in range(trials):
            f, g = rng.random(G.n_states), rng.random(G.n_states)
            worst = max(worst, duality_check_exact(G, f, g, t))
    return VerificationReport("duality_exact", worst <= tol, reference={"residual": 0.0},
                              estimate={"residual": worst}, tolerance=f"max residual <= {tol:g}",
                              seeds=[seed], runtime=time.perf_counter() - t_start,
                              details={"n": n, "K": K, "t": list(ts), "trials": trials,
                                       "states": G.n_states})


# --- continuum duality ------------------------------------------------------

def _importance_start(values: np.ndarray):
    w = np.abs(values)
    if w.sum() == 0:
        return None, 0.0
    return w / w.sum(), float(w.sum())


def test_continuum_duality(spec: RbmSpec, n_list: Sequence[int], f, g, t: float, M: int, K: float = 4.0,
                           seed: int = 0, bias_coef: float = 1.0,
                           constants: BoundaryConstants = BoundaryConstants(),
                           threads=None) -> VerificationReport:
    """Lattice estimates of int f P^_t g dx and int (P_t f) g dx for each n.

    The bias allowance for scale n is ``bias_coef * h * max(|lhs|, |rhs|)``.
    """
    t_start = time.perf_counter()
    rows = []
    for k, n in enumerate(n_list):
        params = LatticeParams.from_K(n, K)
        primal = build_chain(spec, params, constants)
        cp, cd = compile_chain(primal), compile_chain(build_dual_chain(primal))
        vol = params.h ** spec.d
        fv, gv = _values(f, cp.points), _values(g, cp.points)
        pf, mf = _importance_start(fv)
        pg, mg = _importance_start(gv)
        if pf is None or pg is None:
            lhs = rhs = se_l = se_r = 0.0
        else:
            rd = run_ensemble(cd, pf, M, t, seed + 2 * k, threads=threads)
            w = continuum_weight(spec, rd.L)
            lhs, se_l = mean_stderr(np.sign(fv[rd.x0]) * w * gv[rd.final])
            rp = run_ensemble(cp, pg, M, t, seed + 2 * k + 1, threads=threads)
            rhs, se_r = mean_stderr(np.sign(gv[rp.x0]) * fv[rp.final])
            lhs, se_l, rhs, se_r = lhs * mf * vol, se_l * mf * vol, rhs * mg * vol, se_r * mg * vol
        gap = lhs - rhs
        se = math.hypot(se_l, se_r)
        allow = bias_coef * params.h * max(abs(lhs), abs(rhs))
        rows.append({"n": n, "lhs": lhs, "rhs": rhs, "se_lhs": se_l, "se_rhs": se_r, "gap": gap,
                     "se": se, "allowance": allow, "ok": _pass_rule(gap, se, allow)})
    gaps = [abs(r["gap"]) for r in rows]
    shrinking = all(gaps[i + 1] <= gaps[i] + Z * rows[i + 1]["se"] for i in range(len(gaps) - 1))
    ok = all(r["ok"] for r in rows) and shrinking
    return VerificationReport(
        "continuum_duality", ok,
        estimate={"gap": [r["gap"] for r in rows]}, stderr={"gap": [r["se"] for r in rows]},
        reference={"gap": [0.0] * len(rows)},
        tolerance="per n: |gap| <= 4 se + bias_coef*h*|value|; |gap| non-increasing up to 4 se",
        seeds=[seed + i for i in range(2 * len(n_list))], runtime=time.perf_counter() - t_start,
        details={"rows": rows, "t": t, "M": M, "K": K, "shrinking": shrinking})


# --- time reversal ----------------------------------------------------------

def floored(p: InvariantDensity, values: np.ndarray) -> tuple:
    floor = 1e-12 * float(np.max(values))
    return np.maximum(values, floor), values < floor


def test_time_reversal_fdd(spec: RbmSpec, p: Optional[InvariantDensity], n: int, T: float,
                           times: Sequence[float], fs: Sequence, M: int, K: float = 4.0, seed: int = 0,
                           weight: str = "continuum", start: str = "density", bias_allowance: float = 0.0,
                           constants: BoundaryConstants = BoundaryConstants(),
                           threads=None) -> VerificationReport:
    """Compare E[prod f_j(X(T - t_j))] for the stationary primal chain with the
    reweighted dual expectation.

    ``times`` are 0 = t_0 < ... < t_l <= T paired with ``fs``. ``weight`` is
    "continuum" (exp of local times), "lattice" (its finite-n form) or
    "exact" (the lattice Feynman-Kac density). ``start="density"`` draws both
    starts from p discretized on the lattice; ``start="lattice"`` uses the
    exact stationary law of the truncated chain for the start and for the
    density ratio.
    """
    t_start = time.perf_counter()
    times = np.asarray(times, dtype=float)
    if times[0] != 0.0 or times[-1] > T or np.any(np.diff(times) <= 0):
        raise ValueError("times must increase from 0 and stay within [0, T]")
    if len(fs) != times.size:
        raise ValueError(f"{len(fs)} functions for {times.size} times")
    params = LatticeParams.from_K(n, K)
    primal = build_chain(spec, params, constants)
    cp, cd = compile_chain(primal), compile_chain(build_dual_chain(primal))
    if start == "lattice":
        law = stationary_solve(assemble_generator(cp))
        pv, low = floored(None, law)
    else:
        if p is None:
            raise ValueError("density required for start='density'")
        law = lattice_law_from_density(cp, p)
        pv, low = floored(p, p(cp.points))
    fv = [_values(fn, cp.points) for fn in fs]

    rp = run_ensemble(cp, law, M, T, seed, snapshot_times=T - times[::-1], threads=threads)
    snaps_p = rp.snapshots[:, ::-1]
    prod_p = np.ones(M)
    for j, v in enumerate(fv):
        prod_p *= v[snaps_p[:, j]]
    rhs, se_r = mean_stderr(prod_p)

    need_tables = weight == "exact"
    rd = run_ensemble(cd, law, M, T, seed + 1, snapshot_times=times, threads=threads,
                      weights=weight_tables(cp, cd) if need_tables else None)
    if weight == "continuum":
        w = continuum_weight(spec, rd.L)
    elif weight == "lattice":
        w = lattice_weight(spec, n, rd.L)
    elif weight == "exact":
        w = rd.weight
    else:
        raise ValueError(f"unknown weight kind {weight!r}")
    ratio = pv[rd.final] / pv[rd.x0]
    ww = w * ratio
    # share of the path weight that visits a floored cell at either end; the
    # ratio itself is unreliable there, so it is left out of this measure
    floored_mass = float(w[low[rd.final] | low[rd.x0]].sum() / max(w.sum(), 1e-300))
    if floored_mass >= 1e-3:
        raise InconclusiveError(f"{floored_mass:.3%} of the weight mass sits on floored density cells")
    prod_d = ww.copy()
    for j, v in enumerate(fv):
        prod_d *= v[rd.snapshots[:, j]]
    lhs, se_l = mean_stderr(prod_d)
    norm, se_n = mean_stderr(ww)

    gap = lhs - rhs
    se = math.hypot(se_l, se_r)
    ok_id = _pass_rule(gap, se, bias_allowance * abs(rhs))
    ok_norm = _pass_rule(norm - 1.0, se_n, bias_allowance)
    return VerificationReport(
        "time_reversal_fdd", ok_id and ok_norm,
        reference={"identity": rhs, "normalization": 1.0},
        estimate={"identity": lhs, "normalization": norm},
        stderr={"identity": se, "normalization": se_n},
        tolerance=f"|gap| <= 4 combined se + {bias_allowance:g}*|ref|; |norm-1| <= 4 se + {bias_allowance:g}",
        provenance="primal stationary chain read backwards",
        seeds=[seed, seed + 1], runtime=time.perf_counter() - t_start,
        details={"n": n, "K": K, "T": T, "times": times.tolist(), "M": M, "weight": weight,
                 "start": start, "identity_ok": ok_id, "normalization_ok": ok_norm,
                 "primal_estimate": rhs, "primal_se": se_r, "dual_se": se_l,
                 "floored_mass": floored_mass, "density": p.kind if p is not None else "lattice"})


def _ks(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample sup-CDF distance for samples on a common discrete grid."""
    vals = np.union1d(a, b)
    ca = np.searchsorted(np.sort(a), vals, side="right") / a.size
    cb = np.searchsorted(np.sort(b), vals, side="right") / b.size
    return float(np.max(np.abs(ca - cb)))


def reversal_oracle_drift(spec: RbmSpec, n: int, K: float,
                          constants: BoundaryConstants = BoundaryConstants()) -> np.ndarray:
    """Drift of the exactly reversed truncated chain at the central site."""
    cp = compile_chain(build_chain(spec, LatticeParams.from_K(n, K), constants))
    G = assemble_generator(cp)
    Gs = reversal_generator(G, stationary_solve(G))
    s = cp.index(tuple([cp.chain.params.m // 2] * spec.d))
    row = Gs.Q.getrow(s).tocoo()
    table = {}
    for j, r in zip(row.col, row.data):
        if j != s:
            table[tuple(int(v) for v in cp.sites[j] - cp.sites[s])] = float(r)
    return np.array(table_drift(table, n), dtype=float)


def reversal_frequency_tv(spec: RbmSpec, n: int, K: float, T: float, M: int, seed: int = 0,
                          constants: BoundaryConstants = BoundaryConstants(), threads=None) -> tuple:
    """Total variation between the empirical reversed jump law at the most
    visited interior site and the normalized row of the exact reversal generator.

    A forward jump y -> x read backwards is a jump x -> y, so the predecessors
    of x are sampled with probabilities pi_y q_yx / sum.
    Returns (tv, number of jumps counted).
    """
    cp = compile_chain(build_chain(spec, LatticeParams.from_K(n, K), constants))
    G = assemble_generator(cp)
    pi = stationary_solve(G)
    m = cp.chain.params.m
    interior = np.all((cp.sites >= 1) & (cp.sites <= m - 1), axis=1)
    x = int(np.argmax(np.where(interior, pi, -1.0)))
    row = reversal_generator(G, pi).Q.getrow(x).toarray().ravel()
    row[x] = 0.0
    target = row / row.sum()
    res = run_ensemble(cp, pi, M, T, seed, threads=threads, record=True)
    counts = np.zeros(G.n_states)
    for ev in res.events:
        for _, a, b in ev:
            if b == x:
                counts[a] += 1
    total = counts.sum()
    if total == 0:
        return 1.0, 0
    return float(0.5 * np.abs(counts / total - target).sum()), int(total)


def test_reversed_rbm(spec: RbmSpec, n: int, T: float, M: int, K: float = 4.0, seed: int = 0,
                      n_snap: int = 5, tol: float = 0.05, oracle_n: int = 16, oracle_K: float = 3.0,
                      constants: BoundaryConstants = BoundaryConstants(), threads=None) -> VerificationReport:
    """Which drift sign makes an RBM(d, A, R*) chain reproduce the reversed
    stationary primal path."""
    t_start = time.perf_counter()
    if skew_check(spec) is None:
        return VerificationReport("reversed_rbm", None, skipped="spec is not skew-symmetric")
    params = LatticeParams.from_K(n, K)
    cp = compile_chain(build_chain(spec, params, constants))
    pi = stationary_solve(assemble_generator(cp))
    taus = np.linspace(0.0, T, n_snap)
    rp = run_ensemble(cp, pi, M, T, seed, snapshot_times=T - taus[::-1], threads=threads)
    rev = rp.snapshots[:, ::-1]  # rev[:, k] = X(T - tau_k)
    start = rev[:, 0]

    cands = reversed_drift_candidates(spec)
    dist = {}
    for k, (sign, drift) in enumerate(sorted(cands.items())):
        cspec = RbmSpec(tuple(float(v) for v in drift), spec.A, spec.Rstar)
        if n < min_scale(cspec):
            dist[sign] = math.inf
            continue
        cc = compile_chain(build_chain(cspec, params, constants))
        # same start states as the reversed paths, fresh randomness
        rc_snaps = _restart(cc, start, T, seed + 1 + k, taus, threads)
        worst = 0.0
        for j in range(1, n_snap):
            for i in range(spec.d):
                a = cp.sites[rev[:, j], i]
                b = cc.sites[rc_snaps[:, j], i]
                worst = max(worst, _ks(a, b))
                da = a - cp.sites[rev[:, 0], i]
                db = b - cc.sites[rc_snaps[:, 0], i]
                worst = max(worst, _ks(da, db))
        dist[sign] = worst
    matches = [s for s, v in dist.items() if v <= tol]
    oracle = reversal_oracle_drift(spec, oracle_n, oracle_K, constants)
    oracle_sign = min(cands, key=lambda s: float(np.linalg.norm(cands[s] - oracle)))
    tv, n_jumps = reversal_frequency_tv(spec, oracle_n, oracle_K, 2.0, 2000, seed + 3, constants, threads)
    ok = len(matches) == 1 and matches[0] == oracle_sign and tv <= 0.02
    return VerificationReport(
        "reversed_rbm", ok,
        reference={"oracle_sign": oracle_sign, "oracle_drift": oracle.tolist()},
        estimate={"distance+": dist["+"], "distance-": dist["-"],
                  "matching_sign": matches[0] if len(matches) == 1 else ",".join(matches) or "none"},
        tolerance=f"exactly one candidate with sup-CDF distance <= {tol:g}, agreeing with the reversal oracle; "
                  "oracle jump-law TV <= 0.02",
        provenance="reversal generator of the truncated chain at small n",
        seeds=[seed, seed + 1, seed + 2, seed + 3], runtime=time.perf_counter() - t_start,
        details={"oracle_tv": tv, "oracle_jumps": n_jumps, "candidates": {s: v.tolist() for s, v in cands.items()}, "n": n, "K": K, "T": T, "M": M,
                 "oracle_n": oracle_n})


def _restart(cc, start: np.ndarray, T: float, seed: int, taus, threads) -> np.ndarray:
    """Run chain ``cc`` from the given per-path start states."""
    from .simulate import BLOCK_SIZE, block_rng, run_paths
    parts = []
    for b in range(0, start.size, BLOCK_SIZE):
        rng = block_rng(seed, b // BLOCK_SIZE)
        parts.append(run_paths(cc, start[b:b + BLOCK_SIZE], T, rng, snapshot_times=taus).snapshots)
    return np.concatenate(parts, axis=0)


def test_boundary_pair_decay(spec: RbmSpec, n_list: Sequence[int], T: float, M: int, K: float = 4.0,
                             x0=None, seed: int = 0, constants: BoundaryConstants = BoundaryConstants(),
                             threads=None) -> VerificationReport:
    """sqrt(n) * time with two coordinates at zero should vanish as n grows."""
    t_start = time.perf_counter()
    if spec.d < 2:
        return VerificationReport("boundary_pair_decay", None, skipped="needs d >= 2")
    x0 = [0.5] * spec.d if x0 is None else list(x0)
    means, ses = [], []
    for k, n in enumerate(n_list):
        cp = compile_chain(build_chain(spec, LatticeParams.from_K(n, K), constants))
        res = run_ensemble(cp, cp.index(_site(x0, n)), M, T, seed + k, threads=threads)
        ms = [mean_stderr(res.pair_occ[:, c]) for c in range(res.pair_occ.shape[1])]
        means.append([m for m, _ in ms])
        ses.append([s for _, s in ms])
    arr = np.array(means)
    decreasing = bool(np.all(np.diff(arr, axis=0) < 0))
    halved = bool(np.all(arr[-1] <= 0.5 * arr[0]))
    return VerificationReport(
        "boundary_pair_decay", decreasing and halved,
        estimate={"pair_occupation": arr.tolist()}, stderr={"pair_occupation": ses},
        tolerance="strictly decreasing in n and last <= first / 2",
        seeds=[seed + k for k in range(len(n_list))], runtime=time.perf_counter() - t_start,
        details={"n": list(n_list), "T": T, "M": M, "K": K, "x0": x0})


def test_stationary(spec: RbmSpec, n: int, T_run: float, K: float = 4.0, seed: int = 0,
                    sup_tol: float = 0.1, mean_rel_tol: float = 0.05, window: float = 2.0,
                    constants: BoundaryConstants = BoundaryConstants()) -> VerificationReport:
    """Occupation-time histogram against the product-exponential density."""
    t_start = time.perf_counter()
    p = skew_check(spec)
    if p is None:
        return VerificationReport("stationary", None, skipped="no closed-form density")
    cp = compile_chain(build_chain(spec, LatticeParams.from_K(n, K), constants))
    hist = stationary_histogram(cp, None, T_run, seed=seed)
    mean = hist.mean()
    ref_mean = p.mean()
    rel = np.abs(mean - ref_mean) / ref_mean
    est = {"mean": mean.tolist(), "clamped_mass": hist.clamped_mass}
    ref = {"mean": ref_mean.tolist()}
    ok = bool(np.all(rel <= mean_rel_tol)) and hist.clamped_mass < 1e-3
    if spec.d == 1:
        e = hist.edges[0]
        centers = 0.5 * (e[1:] + e[:-1])
        keep = centers <= window
        sup = float(np.max(np.abs(hist.values[keep] - p(centers[keep, None]))))
        est["sup_density_gap"] = sup
        ref["sup_density_gap"] = 0.0
        ok = ok and sup <= sup_tol
    return VerificationReport(
        "stationary", ok, reference=ref, estimate=est,
        tolerance=f"marginal means within {mean_rel_tol:.0%}; sup density gap on [0,{window:g}] <= {sup_tol:g} (d=1); "
                  "clamped mass < 1e-3",
        provenance="product-exponential density", seeds=[seed], runtime=time.perf_counter() - t_start,
        details={"n": n, "K": K, "T_run": T_run, "relative_mean_error": rel.tolist()})
