"""Command line front end: validate, dump-chain, run, stationary, report."""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import verify
from .config import ConfigError, ExperimentConfig, load_config, make_function
from .exact import assemble_generator, stationary_solve
from .lattice import (DomainError, LatticeParams, ScaleTooSmallError, StateCapError, build_chain,
                      build_dual_chain, compile_chain, dump_rows)
from .model import InvalidDensityError, fmt_num, skew_check, validate_assumption
from .simulate import stationary_histogram

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3
THREADS_ENV = "RBMDUAL_THREADS"


# --- serialization ----------------------------------------------------------

def _num(v) -> str:
    v = float(v)
    if math.isnan(v) or math.isinf(v):
        return json.dumps(str(v))
    return fmt_num(v)


def dumps(obj, indent: int = 0) -> str:
    """JSON with sorted keys and floats written to 17 significant digits."""
    pad, pad1 = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad1}{json.dumps(str(k))}: {dumps(obj[k], indent + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(x, (dict, list, tuple, np.ndarray)) for x in seq):
            return "[" + ", ".join(dumps(x) for x in seq) + "]"
        return "[\n" + ",\n".join(pad1 + dumps(x, indent + 1) for x in seq) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return json.dumps(str(obj))


def _flatten(prefix, v, out):
    if isinstance(v, (list, tuple, np.ndarray)):
        for i, x in enumerate(v):
            _flatten(f"{prefix}[{i}]", x, out)
    else:
        out[prefix] = v


def aggregate_rows(rep: verify.VerificationReport) -> list:
    """(quantity, estimate, stderr, reference) rows, flattened per index."""
    rows = []
    for key in rep.estimate:
        est, se, ref = {}, {}, {}
        _flatten(key, rep.estimate[key], est)
        if key in rep.stderr:
            _flatten(key, rep.stderr[key], se)
        if key in rep.reference:
            _flatten(key, rep.reference[key], ref)
        for q, v in est.items():
            rows.append((q, v, se.get(q, ""), ref.get(q, "")))
    return rows


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return fmt_num(v)
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_cell(v) for v in r) + "\n")


# --- test dispatch ----------------------------------------------------------

def _center_point(n: int, K: float, d: int) -> list:
    p = LatticeParams.from_K(n, K)
    return [(p.m // 2) * p.h] * d


def _fn(desc, d, default):
    return make_function(desc if desc is not None else default, d)


def run_test(cfg: ExperimentConfig, name: str, params: dict, seed: int, threads) -> verify.VerificationReport:
    spec, d, c = cfg.spec, cfg.spec.d, cfg.constants
    P = dict(params)
    K = P.get("K") or cfg.K
    M = P.get("M") or cfg.M
    T = P.get("T") or cfg.T
    n_list = P.get("n") or cfg.n
    bump = {"kind": "bump", "center": [0.5] * d, "radius": 0.4}
    if name == "fk_vs_exact":
        x0 = P["x0"] or _center_point(P["n"], K, d)
        return verify.test_fk_vs_exact(spec, P["n"], K, x0, _fn(P["g"], d, None), P["t"], M, seed, c, threads)
    if name == "duality_exact":
        return verify.test_duality_exact(spec, P["n"], K, P["t"], P["trials"], seed, P["tol"], c)
    if name == "continuum_duality":
        n_list = n_list if isinstance(n_list, list) else [n_list]
        return verify.test_continuum_duality(spec, n_list, _fn(P["f"], d, bump), _fn(P["g"], d, bump), P["t"], M,
                                             K, seed, P["bias_coef"], c, threads)
    if name == "time_reversal_fdd":
        times = P["times"]
        fs = P["f"] if isinstance(P["f"], list) else [P["f"]] * len(times)
        fs = [_fn(f, d, bump) for f in fs]
        start = P["start"]
        p = None
        kind = P["density"]
        if start == "density":
            p = skew_check(spec) if kind in ("auto", "exact") else None
            if p is None and kind == "exact":
                return verify.VerificationReport(name, None, skipped="no closed-form density for this spec")
            if p is None:
                cp = compile_chain(build_chain(spec, LatticeParams.from_K(P["n"], K), c))
                p = stationary_histogram(cp, cfg.burn_in, P["T_hist"], seed=seed + 7)
        try:
            return verify.test_time_reversal_fdd(spec, p, P["n"], T, times, fs, M, K, seed, P["weight"], start,
                                                 P["bias_allowance"], c, threads)
        except verify.InconclusiveError as exc:
            return verify.VerificationReport(name, False, details={"inconclusive": str(exc)})
    if name == "reversed_rbm":
        return verify.test_reversed_rbm(spec, P["n"], T, M, K, seed, P["snapshots"], P["tol"], P["oracle_n"],
                                        P["oracle_K"], c, threads)
    if name == "boundary_pair_decay":
        n_list = n_list if isinstance(n_list, list) else [n_list]
        return verify.test_boundary_pair_decay(spec, n_list, P["T"], P["M"], K, P["x0"], seed, c, threads)
    if name == "stationary":
        return verify.test_stationary(spec, P["n"], P["T_run"], K, seed, P["sup_tol"], P["mean_rel_tol"],
                                      constants=c)
    raise ValueError(f"unknown test {name!r}")


# --- verbs ------------------------------------------------------------------

def _threads(args, cfg=None):
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        return int(env)
    return cfg.threads if cfg is not None and cfg.threads else 1


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir or f"rbmdual-out/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    rep = validate_assumption(cfg.spec)
    for line in rep.lines():
        print(line)
    try:
        p = skew_check(cfg.spec)
    except InvalidDensityError as exc:
        print(f"FAIL  product-exponential density  {exc}")
        return EXIT_FAIL
    if p is not None:
        print("skew-symmetric: eta = " + " ".join(fmt_num(v) for v in p.eta))
    return EXIT_OK if rep.passed else EXIT_FAIL


def _dump_one(compiled, path: Path) -> None:
    d = compiled.chain.d
    header = [f"k{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)] + ["rate"]
    write_csv(path, header, ([*site, *v, float(r)] for site, v, r in dump_rows(compiled)))


def cmd_dump_chain(args) -> int:
    cfg = load_config(args.config)
    n = args.n or cfg.n[0]
    K = args.K if args.K is not None else cfg.K
    if K < 1.0 / math.sqrt(n):
        raise ConfigError("lattice.K", f"K={K!r} is below the mesh h={1 / math.sqrt(n)!r}: empty lattice")
    primal = build_chain(cfg.spec, LatticeParams.from_K(n, K), cfg.constants)
    out = _out_dir(args, cfg)
    _dump_one(compile_chain(primal), out / f"chain_primal_n{n}.csv")
    _dump_one(compile_chain(build_dual_chain(primal)), out / f"chain_dual_n{n}.csv")
    print(f"wrote {out / f'chain_primal_n{n}.csv'} and {out / f'chain_dual_n{n}.csv'}")
    return EXIT_OK


def cmd_stationary(args) -> int:
    cfg = load_config(args.config)
    n = args.n or cfg.n[0]
    cp = compile_chain(build_chain(cfg.spec, LatticeParams.from_K(n, cfg.K), cfg.constants))
    out = _out_dir(args, cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    d = cfg.spec.d
    if args.method == "exact":
        mass = stationary_solve(assemble_generator(cp))
    else:
        from .simulate import occupation_times
        T_run = args.T_run
        burn = cfg.burn_in if cfg.burn_in is not None else 0.2 * T_run
        occ, _ = occupation_times(cp, 0, burn, T_run, seed)
        mass = occ / occ.sum()
    header = [f"k{i + 1}" for i in range(d)] + [f"x{i + 1}" for i in range(d)] + ["probability"]
    path = out / f"stationary_{args.method}_n{n}.csv"
    write_csv(path, header, ([*map(int, s), *map(float, x), float(q)]
                             for s, x, q in zip(cp.sites, cp.points, mass)))
    means = mass @ cp.points
    print("marginal means: " + " ".join(fmt_num(v) for v in means))
    print(f"wrote {path}")
    return EXIT_OK


def _versions() -> dict:
    import numba
    import scipy
    return {"rbmdual": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    threads = _threads(args, cfg)
    if args.seed is not None:
        base = cfg.seed
        for sel in cfg.tests:
            sel.seed = sel.seed - base + args.seed
        cfg.seed = args.seed
    out = _out_dir(args, cfg)
    (out / "reports").mkdir(exist_ok=True)
    (out / "aggregates").mkdir(exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    validity = validate_assumption(cfg.spec)
    manifest_tests, lines, any_fail = [], [], False
    for k, sel in enumerate(cfg.tests):
        stem = f"{k:02d}_{sel.name}"
        t0 = time.perf_counter()
        if not validity.passed:
            why = "; ".join(f"{c.name} ({c.witness})" for c in validity.failed())
            rep = verify.VerificationReport(sel.name, None, skipped=f"spec fails the standing assumption: {why}")
        else:
            try:
                rep = run_test(cfg, sel.name, sel.params, sel.seed, threads)
            except (ScaleTooSmallError, StateCapError, DomainError) as exc:
                raise ConfigError(f"tests.{k}", str(exc))
        elapsed = time.perf_counter() - t0
        rep.name = sel.name
        d = rep.to_dict()
        d.pop("runtime", None)
        d["seed"] = sel.seed
        d["params"] = sel.params
        if "json" in cfg.formats:
            (out / "reports" / f"{stem}.json").write_text(dumps(d) + "\n")
        if "csv" in cfg.formats:
            write_csv(out / "aggregates" / f"{stem}.csv", ["quantity", "estimate", "stderr", "reference"],
                      aggregate_rows(rep))
        line = rep.summary()
        lines.append(line)
        print(line, flush=True)
        any_fail |= rep.passed is False
        manifest_tests.append({"name": sel.name, "seed": sel.seed, "status": rep.status, "runtime_s": elapsed})
    if "text" in cfg.formats:
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
    manifest = {"config": str(args.config), "config_sha256": cfg.digest, "name": cfg.name, "base_seed": cfg.seed,
                "threads": threads, "versions": _versions(), "started": started,
                "finished": datetime.now(timezone.utc).isoformat(), "tests": manifest_tests}
    (out / "manifest.json").write_text(dumps(manifest) + "\n")
    return EXIT_FAIL if any_fail else EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out or ".")
    files = sorted((out / "reports").glob("*.json"))
    if not files:
        raise ConfigError("--out", f"no reports under {out / 'reports'}")
    any_fail = False
    for f in files:
        d = json.loads(f.read_text())
        rep = verify.VerificationReport(d["name"], d["passed"], d["reference"], d["estimate"], d["stderr"],
                                        d["tolerance"], d["provenance"], d["seeds"], 0.0, d["skipped"],
                                        d["details"])
        print(rep.summary())
        any_fail |= rep.passed is False
    return EXIT_FAIL if any_fail else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbmdual", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML file or bundled config name")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None, help=f"overrides ${THREADS_ENV}")
        p.add_argument("--out", default=None, help="artifact directory")
        return p

    common(sub.add_parser("validate", help="check the standing assumption"))
    p = common(sub.add_parser("dump-chain", help="write primal and dual rate tables as CSV"))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--K", type=float, default=None)
    common(sub.add_parser("run", help="run the configured verification tests"))
    p = common(sub.add_parser("stationary", help="stationary law of the truncated chain"))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--method", choices=("exact", "histogram"), default="exact")
    p.add_argument("--T-run", dest="T_run", type=float, default=5e4)
    common(sub.add_parser("report", help="summarize reports in an artifact directory"), config=False)
    return ap


VERBS = {"validate": cmd_validate, "dump-chain": cmd_dump_chain, "run": cmd_run,
         "stationary": cmd_stationary, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return VERBS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScaleTooSmallError, StateCapError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
