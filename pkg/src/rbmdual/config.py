"""YAML experiment configuration.

Units: rates per unit time, lengths (``K``, points, bump centers) in
continuum units. Lattice sites in CSV output are integer multiples of h.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .lattice import BoundaryConstants, ConstantsError
from .model import RbmSpec, SpecError

TEST_NAMES = ("fk_vs_exact", "duality_exact", "continuum_duality", "time_reversal_fdd",
              "reversed_rbm", "boundary_pair_decay", "stationary")

# accepted per-test parameters and their defaults (None: taken from lattice/run)
TEST_PARAMS = {
    "fk_vs_exact": {"n": 4, "K": 2.0, "x0": None, "g": {"kind": "one"}, "t": 0.5, "M": None},
    "duality_exact": {"n": 4, "K": 1.5, "t": [0.1, 1.0], "trials": 20, "tol": 1e-9},
    "continuum_duality": {"n": None, "K": None, "f": None, "g": None, "t": 0.25, "M": None,
                          "bias_coef": 1.0},
    "time_reversal_fdd": {"n": 64, "K": None, "T": None, "times": [0.0, 0.5], "f": None, "M": None,
                          "weight": "continuum", "start": "density", "bias_allowance": 0.0,
                          "density": "auto", "T_hist": 20000.0},
    "reversed_rbm": {"n": 64, "K": None, "T": None, "M": None, "snapshots": 5, "tol": 0.05,
                     "oracle_n": 16, "oracle_K": 3.0},
    "boundary_pair_decay": {"n": None, "K": None, "T": 10.0, "M": 10000, "x0": None},
    "stationary": {"n": 64, "K": None, "T_run": 50000.0, "sup_tol": 0.1, "mean_rel_tol": 0.05},
}

FUNCTION_KINDS = ("one", "zero", "bump", "indicator", "linear")


class ConfigError(ValueError):
    """Bad configuration; ``field`` is a dotted path, ``line`` 1-based or None."""

    def __init__(self, field: str, msg: str, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{field}: {msg}")


def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _line_map(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


@dataclass
class TestSelection:
    name: str
    params: dict
    seed: int


@dataclass
class ExperimentConfig:
    name: str
    spec: RbmSpec
    n: list
    K: float
    constants: BoundaryConstants
    T: float
    M: int
    burn_in: Optional[float]
    seed: int
    tests: list = field(default_factory=list)
    out_dir: Optional[str] = None
    formats: tuple = ("json", "csv", "text")
    threads: Optional[int] = None
    digest: str = ""
    raw: dict = field(default_factory=dict)


class _Reader:
    def __init__(self, lines: dict):
        self.lines = lines

    def error(self, path: tuple, msg: str):
        line = None
        for k in range(len(path), -1, -1):
            if path[:k] in self.lines:
                line = self.lines[path[:k]]
                break
        raise ConfigError(".".join(str(p) for p in path) or "<root>", msg, line)

    def get(self, d: dict, path: tuple, key: str, kind, default=..., check=None):
        p = path + (key,)
        if key not in d or d[key] is None:
            if default is ...:
                self.error(p, "missing required field")
            return default
        v = d[key]
        try:
            v = kind(v)
        except (TypeError, ValueError):
            self.error(p, f"expected {kind.__name__}, got {v!r}")
        if check is not None and not check(v):
            self.error(p, f"invalid value {v!r}")
        return v

    def number(self, v, path):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.error(path, f"expected a number, got {v!r}")
        return float(v) if isinstance(v, float) else v

    def vector(self, v, path, d=None):
        if not isinstance(v, list):
            self.error(path, f"expected a list, got {v!r}")
        if d is not None and len(v) != d:
            self.error(path, f"expected length {d}, got {len(v)}")
        return [self.number(x, path + (i,)) for i, x in enumerate(v)]

    def matrix(self, v, path, d):
        if not isinstance(v, list) or len(v) != d:
            self.error(path, f"expected {d} rows")
        return [self.vector(r, path + (i,), d) for i, r in enumerate(v)]


def make_function(desc: Any, d: int, path: str = "function"):
    """Build a vectorized test function from a config mapping."""
    from .verify import bump
    if not isinstance(desc, dict) or desc.get("kind") not in FUNCTION_KINDS:
        raise ConfigError(path, f"expected a mapping with kind in {FUNCTION_KINDS}")
    kind = desc["kind"]
    if kind == "one":
        return lambda x: np.ones(np.atleast_2d(x).shape[0])
    if kind == "zero":
        return lambda x: np.zeros(np.atleast_2d(x).shape[0])
    if kind == "bump":
        c = desc.get("center", [0.5] * d)
        if len(c) != d:
            raise ConfigError(path + ".center", f"expected length {d}")
        r = float(desc.get("radius", 0.4))
        if r <= 0:
            raise ConfigError(path + ".radius", "must be positive")
        return bump(c, r)
    if kind == "indicator":
        lo = np.asarray(desc.get("lo"), dtype=float)
        hi = np.asarray(desc.get("hi"), dtype=float)
        if lo.shape != (d,) or hi.shape != (d,):
            raise ConfigError(path, f"indicator needs lo and hi of length {d}")
        return lambda x: np.all((np.atleast_2d(x) >= lo) & (np.atleast_2d(x) <= hi), axis=1).astype(float)
    coef = np.asarray(desc.get("coef", [1.0] * d), dtype=float)
    const = float(desc.get("const", 0.0))
    if coef.shape != (d,):
        raise ConfigError(path + ".coef", f"expected length {d}")
    return lambda x: np.atleast_2d(x) @ coef + const


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<yaml>", str(getattr(exc, "problem", exc)), mark.line + 1 if mark else None)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    rd = _Reader(_line_map(node) if node is not None else {})

    known = {"name", "spec", "lattice", "run", "tests", "output"}
    for k in raw:
        if k not in known:
            rd.error((k,), "unknown section")

    spec_d = raw.get("spec")
    if not isinstance(spec_d, dict):
        rd.error(("spec",), "missing or not a mapping")
    b = rd.vector(spec_d.get("b"), ("spec", "b"))
    d = len(b)
    if d == 0:
        rd.error(("spec", "b"), "empty drift")
    A = rd.matrix(spec_d.get("A"), ("spec", "A"), d)
    R = rd.matrix(spec_d.get("R"), ("spec", "R"), d)
    try:
        spec = RbmSpec(tuple(b), A, R)
    except SpecError as exc:
        rd.error(("spec",), str(exc))

    lat = raw.get("lattice") or {}
    n_raw = lat.get("n", [64])
    n_list = [n_raw] if isinstance(n_raw, int) else n_raw
    if not isinstance(n_list, list) or not n_list or not all(isinstance(v, int) and v >= 1 for v in n_list):
        rd.error(("lattice", "n"), "expected a positive integer or a list of them")
    if n_list != sorted(n_list):
        rd.error(("lattice", "n"), "n-list must be sorted ascending")
    K = rd.get(lat, ("lattice",), "K", float, 4.0, lambda v: v > 0)
    try:
        constants = BoundaryConstants(rd.get(lat, ("lattice",), "c0", float, 1.0),
                                      rd.get(lat, ("lattice",), "corner_share", float, 0.5))
    except ConstantsError as exc:
        rd.error(("lattice",), str(exc))

    run = raw.get("run") or {}
    T = rd.get(run, ("run",), "T", float, 1.0, lambda v: v > 0)
    M = rd.get(run, ("run",), "M", int, 100000, lambda v: v >= 2)
    burn = rd.get(run, ("run",), "burn_in", float, None, lambda v: v >= 0)
    seed = rd.get(run, ("run",), "seed", int, 0, lambda v: v >= 0)
    threads = rd.get(run, ("run",), "threads", int, None, lambda v: v >= 1)

    tests = []
    for i, t in enumerate(raw.get("tests") or []):
        path = ("tests", i)
        if isinstance(t, str):
            t = {"name": t}
        if not isinstance(t, dict) or "name" not in t:
            rd.error(path, "expected a test name or a mapping with 'name'")
        name = t["name"]
        if name not in TEST_NAMES:
            rd.error(path + ("name",), f"unknown test {name!r}; choose from {', '.join(TEST_NAMES)}")
        params = dict(TEST_PARAMS[name])
        for k, v in t.items():
            if k in ("name", "seed"):
                continue
            if k not in params:
                rd.error(path + (k,), f"unknown parameter for {name}")
            params[k] = v
        for k in ("tol", "sup_tol", "mean_rel_tol"):
            if k in params and not (isinstance(params[k], (int, float)) and params[k] > 0):
                rd.error(path + (k,), "tolerance must be positive")
        for k in ("bias_allowance", "bias_coef"):
            if k in params and not (isinstance(params[k], (int, float)) and params[k] >= 0):
                rd.error(path + (k,), "allowance must be nonnegative")
        for k in ("f", "g"):
            if params.get(k) is not None:
                try:
                    make_function(params[k], d, ".".join(map(str, path + (k,))))
                except ConfigError as exc:
                    rd.error(path + (k,), str(exc).split(": ", 1)[-1])
        tseed = t.get("seed", seed + 1000 * i)
        if not isinstance(tseed, int) or tseed < 0:
            rd.error(path + ("seed",), "seed must be a nonnegative integer")
        tests.append(TestSelection(name, params, tseed))

    out = raw.get("output") or {}
    formats = tuple(out.get("formats", ["json", "csv", "text"]))
    for f in formats:
        if f not in ("json", "csv", "text"):
            rd.error(("output", "formats"), f"unknown format {f!r}")
    digest = hashlib.sha256(text.encode()).hexdigest()
    return ExperimentConfig(str(raw.get("name", Path(source).stem)), spec, list(n_list), K, constants, T, M,
                            burn, seed, tests, out.get("dir"), formats, threads, digest, raw)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        bundled = bundled_config_path(str(path))
        if bundled is None:
            raise ConfigError("--config", f"no such file or bundled config: {path}")
        p = bundled
    return parse_config(p.read_text(), str(p))


def bundled_config_path(name: str) -> Optional[Path]:
    p = Path(__file__).parent / "configs" / f"{name}.yaml"
    return p if p.exists() else None


def bundled_configs() -> list:
    return sorted(p.stem for p in (Path(__file__).parent / "configs").glob("*.yaml"))
