"""Acceptance criteria 1-8 at their pinned scales and tolerances.

Each criterion prints one PASS/FAIL line (collected in the pytest terminal
summary). Run directly with ``python3 tests/test_acceptance.py`` to get the
lines without pytest.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, SPEC_1D, SPEC_GEN, SPEC_GEN_Q, SPEC_SKEW, SPEC_SKEW_Q  # noqa: E402
from rbmdual import verify  # noqa: E402
from rbmdual.cli import main as cli_main  # noqa: E402
from rbmdual.lattice import (BoundaryConstants, LatticeParams, boundary_rates, build_chain,  # noqa: E402
                             compile_chain, interior_rates, table_drift, table_second_moment)
from rbmdual.model import skew_check  # noqa: E402
from rbmdual.simulate import stationary_histogram  # noqa: E402

BUMP = verify.bump((0.5, 0.5), 0.4)


def record(k, ok: bool, detail: str):
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def criterion_1():
    from fractions import Fraction as F
    t0 = time.perf_counter()
    c = BoundaryConstants(F(1), F(1, 2))
    bad = []
    for name, spec in (("SKEW", SPEC_SKEW_Q), ("GEN", SPEC_GEN_Q)):
        for n in (4, 16, 100):
            if table_drift(interior_rates(spec, n), n) != list(spec.b):
                bad.append(f"{name} n={n} interior mean")
            t0b = interior_rates(spec.with_(b=(F(0), F(0))), n)
            if table_second_moment(t0b, n) != [list(r) for r in spec.A]:
                bad.append(f"{name} n={n} covariance")
            for I in ((0,), (1,), (0, 1)):
                want = [math.isqrt(n) * sum(spec.R[i][l] for l in I) for i in range(2)]
                if table_drift(boundary_rates(spec, n, I, c), n) != want:
                    bad.append(f"{name} n={n} boundary {I}")
    dt = time.perf_counter() - t0
    ok = not bad and dt < 1.0
    return record(1, ok, f"rate-table identities in exact arithmetic; failures={bad or 'none'}; runtime {dt:.2f}s (< 1 s)")


def criterion_2():
    t0 = time.perf_counter()
    r = verify.test_duality_exact(SPEC_GEN, 4, 1.5, [0.1, 1.0], trials=20, seed=0, tol=1e-9)
    dt = time.perf_counter() - t0
    ok = bool(r.passed) and dt < 10
    return record(2, ok, f"max duality residual {r.estimate['residual']:.3g} (<= 1e-9); runtime {dt:.1f}s (< 10 s)")


def criterion_3():
    t0 = time.perf_counter()
    g = lambda x: np.all((x >= 0.5) & (x <= 1.0), axis=1).astype(float)
    parts, ok = [], True
    for name, spec, seed in (("SKEW", SPEC_SKEW, 31), ("GEN", SPEC_GEN, 32)):
        r = verify.test_fk_vs_exact(spec, 4, 2.0, (1.0, 1.0), g, 0.5, 200000, seed=seed)
        ok &= bool(r.passed)
        e, s, x = r.estimate["value"], r.stderr["value"], r.reference["value"]
        parts.append(f"{name} mc={e:.5f}+-{s:.5f} exact={x:.5f} z={(e - x) / s:+.2f} se/val={s / x:.1%}")
    dt = time.perf_counter() - t0
    ok &= dt < 300
    return record(3, ok, "; ".join(parts) + f"; rule |diff|<=4se, se<=5%; runtime {dt:.0f}s (< 5 min)")


def criterion_4():
    t0 = time.perf_counter()
    r1 = verify.test_stationary(SPEC_1D, 64, 5e4, K=4.0, seed=41, sup_tol=0.1, window=2.0)
    sup = r1.estimate["sup_density_gap"]
    r2 = verify.test_stationary(SPEC_SKEW, 64, 5e4, K=4.0, seed=42, mean_rel_tol=0.05)
    means = r2.estimate["mean"]
    dt = time.perf_counter() - t0
    ok = sup <= 0.1 and all(abs(m - 0.5) <= 0.025 for m in means) and dt < 600
    return record(4, ok, f"d=1 sup|hist-Exp(2)| on [0,2] = {sup:.3f} (<= 0.1); SKEW marginal means "
                         f"({means[0]:.4f}, {means[1]:.4f}) vs 0.5 (+-5%); runtime {dt:.0f}s (< 10 min)")


def _fdd_line(tag, r):
    e, s = r.estimate, r.stderr
    return (f"{tag}: dual={e['identity']:.5f} primal={r.reference['identity']:.5f} "
            f"gap/se={(e['identity'] - r.reference['identity']) / s['identity']:+.2f}, "
            f"norm={e['normalization']:.3f}+-{s['normalization']:.3f}")


def criterion_5():
    t0 = time.perf_counter()
    p = skew_check(SPEC_SKEW)
    r1 = verify.test_time_reversal_fdd(SPEC_SKEW, p, 64, 1.0, [0.0, 0.5], [BUMP, BUMP], 200000, K=4.0, seed=51)
    cp = compile_chain(build_chain(SPEC_GEN, LatticeParams.from_K(64, 4.0)))
    hist = stationary_histogram(cp, None, 5e4, seed=52)
    try:
        r2 = verify.test_time_reversal_fdd(SPEC_GEN, hist, 64, 1.0, [0.0, 0.5], [BUMP, BUMP], 200000, K=4.0,
                                           seed=53, bias_allowance=0.1)
        gen_ok, gen_line = bool(r2.passed), _fdd_line("GEN histogram p, +10%", r2)
    except verify.InconclusiveError as exc:
        gen_ok, gen_line = False, f"GEN inconclusive: {exc}"
    dt = time.perf_counter() - t0
    ok = bool(r1.passed) and gen_ok and dt < 1200
    return record(5, ok, _fdd_line("SKEW exact p", r1) + "; " + gen_line + f"; runtime {dt:.0f}s (< 20 min)")


def criterion_5_lattice_variant():
    """Same identity with the exact lattice Feynman-Kac weight and the exact
    lattice stationary law; reported alongside criterion 5, not part of it."""
    r = verify.test_time_reversal_fdd(SPEC_SKEW, None, 64, 1.0, [0.0, 0.5], [BUMP, BUMP], 200000, K=4.0,
                                      seed=54, weight="exact", start="lattice")
    line = f"criterion 5 (lattice-exact variant, informational): {r.status}  " + _fdd_line("SKEW", r)
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return bool(r.passed)


def criterion_6():
    t0 = time.perf_counter()
    r = verify.test_reversed_rbm(SPEC_SKEW, 64, 1.0, 100000, K=4.0, seed=61)
    dt = time.perf_counter() - t0
    e = r.estimate
    ok = bool(r.passed) and dt < 600
    return record(6, ok, f"distance(+)={e['distance+']:.4f} distance(-)={e['distance-']:.4f} (<= 0.05); "
                         f"matching sign {e['matching_sign']}, oracle sign {r.reference['oracle_sign']} "
                         f"(drift {np.round(r.reference['oracle_drift'], 3).tolist()}), "
                         f"oracle TV {r.details['oracle_tv']:.4f}; runtime {dt:.0f}s (< 10 min)")


def criterion_7():
    t0 = time.perf_counter()
    r = verify.test_boundary_pair_decay(SPEC_SKEW, [16, 64, 256], 10.0, 10000, K=4.0, seed=71)
    dt = time.perf_counter() - t0
    vals = [v[0] for v in r.estimate["pair_occupation"]]
    ok = bool(r.passed) and dt < 600
    return record(7, ok, "pair occupation at n=16,64,256: " + ", ".join(f"{v:.4f}" for v in vals)
                  + f" (strictly decreasing, last <= {vals[0] / 2:.4f}); runtime {dt:.0f}s (< 10 min)")


DET_YAML = """\
name: determinism
spec:
  b: [-1, -1]
  A: [[1, 0.2], [0.2, 1]]
  R: [[1, 0.5], [-0.3, 1]]
lattice:
  n: [16, 64]
  K: 2.0
run:
  T: 0.5
  M: 20000
  seed: 8
tests:
  - {name: duality_exact, n: 4, K: 1.5}
  - {name: fk_vs_exact, n: 4, K: 2.0, x0: [1.0, 1.0]}
  - {name: time_reversal_fdd, n: 16, times: [0.0, 0.25], weight: exact, start: lattice}
  - {name: continuum_duality, n: [16], t: 0.25}
  - {name: boundary_pair_decay, T: 1.0, M: 5000}
"""


def criterion_8(tmp: Path):
    import os
    cfg = tmp / "det.yaml"
    cfg.write_text(DET_YAML)
    a, b = tmp / "t1", tmp / "t8"
    cli_main(["run", "--config", str(cfg), "--threads", "1", "--out", str(a)])
    old = os.environ.get("RBMDUAL_THREADS")
    os.environ["RBMDUAL_THREADS"] = "8"
    try:
        cli_main(["run", "--config", str(cfg), "--out", str(b)])
    finally:
        if old is None:
            os.environ.pop("RBMDUAL_THREADS")
        else:
            os.environ["RBMDUAL_THREADS"] = old
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "manifest.json")
    same = [f for f in files if (a / f).read_bytes() == (b / f).read_bytes()]
    ok = len(files) > 0 and len(same) == len(files)
    return record(8, ok, f"{len(same)}/{len(files)} report/aggregate files byte-identical for threads 1 vs 8")


def test_criterion_1():
    assert criterion_1()


def test_criterion_2():
    assert criterion_2()


def test_criterion_3():
    assert criterion_3()


def test_criterion_4():
    assert criterion_4()


def test_criterion_5():
    assert criterion_5()


def test_criterion_5_lattice_variant():
    assert criterion_5_lattice_variant()


def test_criterion_6():
    assert criterion_6()


def test_criterion_7():
    assert criterion_7()


def test_criterion_8(tmp_path):
    assert criterion_8(tmp_path)


if __name__ == "__main__":
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(),
                   criterion_5_lattice_variant(), criterion_6(), criterion_7(), criterion_8(Path(d))]
    sys.exit(0 if all(results) else 1)
