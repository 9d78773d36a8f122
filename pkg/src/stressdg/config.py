"""TOML run configuration: parsing, validation with line numbers, and hashing."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .assembly import FACET_SIZES, NEUMANN_AVERAGES, PENALTY_RULES, PenaltyConfig
from .eigen import DEFAULT_CLUSTER_TOL, DEFAULT_DENSE_CAP, DEFAULT_SHIFT_DELTA
from .problems import DOMAINS, Problem, SolverSettings, as_sides

OUTPUT_ENV = "STRESSDG_OUTPUT_DIR"

_SECTIONS = {
    "mesh": {"domain", "n", "barycentric", "perturb", "seed", "file", "dirichlet"},
    "material": {"id", "rho", "E", "nu", "lambda", "mu"},
    "discretization": {"k", "penalty_rule", "a0", "margin", "facet_size", "neumann_average"},
    "solver": {"nev", "dense_cap", "cluster_tol", "shift_delta", "method", "backend", "count_kernel"},
    "study": {
        "ns",
        "references",
        "reference_k",
        "reference_n",
        "n_eigs",
        "scale",
        "a0s",
        "drift_tol",
        "degrees",
        "infsup_ns",
        "zero_on",
    },
    "output": {"dir", "plots", "prefix"},
}


class ConfigError(ValueError):
    """Invalid configuration; the message carries the file and line when known."""


@dataclass(frozen=True)
class StudySettings:
    ns: tuple[int, ...] = (4, 8, 16)
    references: tuple[float, ...] | None = None
    reference_k: int | None = None
    reference_n: int | None = None
    n_eigs: int = 3
    scale: float = 1.0
    a0s: tuple[float, ...] = (2.0, 4.0, 8.0)
    drift_tol: float = 0.02
    degrees: tuple[int, ...] = (1, 2, 3, 4)
    infsup_ns: tuple[int, ...] = (4, 8)
    zero_on: str = "all"


@dataclass(frozen=True)
class RunConfig:
    problem: Problem
    study: StudySettings = field(default_factory=StudySettings)
    output_dir: Path = Path("output")
    plots: bool = False
    prefix: str = ""
    source: str = "<defaults>"
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def seed(self) -> int:
        return self.problem.seed

    def config_hash(self) -> str:
        """Short SHA-256 of the canonical (sorted-key JSON) parsed configuration."""
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _key_line(text: str, section: str | None, key: str) -> int | None:
    """Line number of ``key = ...`` inside ``[section]`` (or ``[[section]]``)."""
    current = None
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), start=1):
        head = re.match(r"^\s*\[\[?\s*([A-Za-z0-9_.]+)\s*\]?\]", line)
        if head:
            current = head.group(1)
            if section is not None and current == section and key == "":
                return i
            continue
        if current == section and pattern.match(line):
            return i
    return None


class _Reader:
    def __init__(self, data: dict, text: str, source: str):
        self.data, self.text, self.source = data, text, source

    def fail(self, section: str | None, key: str, msg: str):
        line = _key_line(self.text, section, key) if self.text else None
        where = f"{self.source}:{line}" if line else self.source
        name = f"{section}.{key}" if section else key
        raise ConfigError(f"{where}: {name}: {msg}")

    def get(self, table: dict, section: str, key: str, kind, default, check=None, msg: str = ""):
        if key not in table:
            return default
        value = table[key]
        try:
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
                out = value
            elif kind is int:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise TypeError
                out = value
            elif kind is float:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise TypeError
                out = float(value)
            elif kind is str:
                if not isinstance(value, str):
                    raise TypeError
                out = value
            else:
                out = kind(value)
        except (TypeError, ValueError):
            self.fail(section, key, f"expected {getattr(kind, '__name__', kind)}, got {value!r}")
        if check is not None and not check(out):
            self.fail(section, key, msg or f"invalid value {value!r}")
        return out


def _tuple_of(kind):
    def conv(value):
        if not isinstance(value, list):
            raise TypeError
        if kind is float:
            if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
                raise TypeError
            return tuple(float(v) for v in value)
        if any(isinstance(v, bool) or not isinstance(v, kind) for v in value):
            raise TypeError
        return tuple(value)

    conv.__name__ = f"list of {kind.__name__}"
    return conv


def parse_config(text: str, source: str = "<string>", base_dir: Path | None = None) -> RunConfig:
    """Parse and validate a TOML configuration string."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    r = _Reader(data, text, source)
    base_dir = base_dir or Path(".")

    for sec, value in data.items():
        if sec not in _SECTIONS:
            r.fail(None, sec, f"unknown section; expected one of {sorted(_SECTIONS)}")
        tables = value if isinstance(value, list) else [value]
        for t in tables:
            if not isinstance(t, dict):
                r.fail(None, sec, "expected a table")
            for key in t:
                if key not in _SECTIONS[sec]:
                    r.fail(sec, key, f"unknown key; expected one of {sorted(_SECTIONS[sec])}")

    mesh = data.get("mesh", {})
    domain = r.get(mesh, "mesh", "domain", str, "square", lambda v: v in DOMAINS, f"must be one of {DOMAINS}")
    n = r.get(mesh, "mesh", "n", int, 4, lambda v: v >= 1, "must be >= 1")
    bary = r.get(mesh, "mesh", "barycentric", bool, False)
    perturb = r.get(mesh, "mesh", "perturb", float, 0.0, lambda v: 0 <= v < 0.5, "must lie in [0, 0.5)")
    seed = r.get(mesh, "mesh", "seed", int, 0)
    mesh_file = r.get(mesh, "mesh", "file", str, None)
    if mesh_file is not None:
        path = Path(mesh_file)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            r.fail("mesh", "file", f"file not found: {path}")
        mesh_file = str(path)
    if domain == "file" and mesh_file is None:
        r.fail("mesh", "domain", "domain 'file' needs mesh.file")
    dirichlet = mesh.get("dirichlet", ["all"])
    if isinstance(dirichlet, str):
        dirichlet = as_sides(dirichlet)
    elif not isinstance(dirichlet, list) or not all(isinstance(s, str) for s in dirichlet):
        r.fail("mesh", "dirichlet", "expected a list of side names")
    valid_sides = {"all", "none", "x0", "x1", "y0", "y1", "z0", "z1"}
    bad = [s for s in dirichlet if s not in valid_sides]
    if bad:
        r.fail("mesh", "dirichlet", f"unknown side(s) {bad}; expected any of {sorted(valid_sides)}")

    records = data.get("material", [{"id": 0, "rho": 1.0, "E": 1.0, "nu": 0.35}])
    if isinstance(records, dict):
        records = [records]
    materials = []
    for rec in records:
        sid = r.get(rec, "material", "id", int, 0)
        rho = r.get(rec, "material", "rho", float, 1.0, lambda v: v > 0, "density must be positive")
        if "E" in rec or "nu" in rec:
            E = r.get(rec, "material", "E", float, 1.0, lambda v: v > 0, "Young's modulus must be positive")
            nu = r.get(rec, "material", "nu", float, 0.35, lambda v: -1 < v < 0.5, "Poisson ratio must lie in (-1, 0.5)")
            materials.append({"id": sid, "rho": rho, "E": E, "nu": nu})
        else:
            lam = r.get(rec, "material", "lambda", float, None)
            mu = r.get(rec, "material", "mu", float, None, lambda v: v > 0, "mu must be positive")
            if lam is None or mu is None:
                r.fail("material", "id", "give either E and nu, or lambda and mu")
            materials.append({"id": sid, "rho": rho, "lambda": lam, "mu": mu})

    disc = data.get("discretization", {})
    k = r.get(disc, "discretization", "k", int, 1, lambda v: v >= 1, "polynomial degree k must be >= 1")
    penalty = PenaltyConfig(
        rule=r.get(disc, "discretization", "penalty_rule", str, "k_squared", lambda v: v in PENALTY_RULES, f"must be one of {PENALTY_RULES}"),
        a0=r.get(disc, "discretization", "a0", float, 8.0, lambda v: v > 0, "must be positive"),
        computed_margin=r.get(disc, "discretization", "margin", float, 1.0, lambda v: v >= 1, "must be >= 1"),
        facet_size=r.get(disc, "discretization", "facet_size", str, "height", lambda v: v in FACET_SIZES, f"must be one of {FACET_SIZES}"),
        neumann_average=r.get(
            disc, "discretization", "neumann_average", str, "one_sided", lambda v: v in NEUMANN_AVERAGES, f"must be one of {tuple(NEUMANN_AVERAGES)}"
        ),
    )

    sol = data.get("solver", {})
    solver = SolverSettings(
        nev=r.get(sol, "solver", "nev", int, 6, lambda v: v >= 1, "must be >= 1"),
        dense_cap=r.get(sol, "solver", "dense_cap", int, DEFAULT_DENSE_CAP, lambda v: v >= 0, "must be >= 0"),
        cluster_tol=r.get(sol, "solver", "cluster_tol", float, DEFAULT_CLUSTER_TOL, lambda v: 0 < v < 1, "must lie in (0, 1)"),
        shift_delta=r.get(sol, "solver", "shift_delta", float, DEFAULT_SHIFT_DELTA, lambda v: 0 < v < 1, "must lie in (0, 1)"),
        method=r.get(sol, "solver", "method", str, "auto", lambda v: v in ("auto", "dense", "shift_invert"), "must be auto, dense or shift_invert"),
        backend=r.get(sol, "solver", "backend", str, "auto", lambda v: v in ("auto", "pardiso", "superlu"), "must be auto, pardiso or superlu"),
        count_kernel=r.get(sol, "solver", "count_kernel", bool, False),
    )

    st = data.get("study", {})
    study = StudySettings(
        ns=r.get(st, "study", "ns", _tuple_of(int), (4, 8, 16), lambda v: len(v) >= 1 and min(v) >= 1, "must be positive integers"),
        references=r.get(st, "study", "references", _tuple_of(float), None),
        reference_k=r.get(st, "study", "reference_k", int, None, lambda v: v >= 1, "must be >= 1"),
        reference_n=r.get(st, "study", "reference_n", int, None, lambda v: v >= 1, "must be >= 1"),
        n_eigs=r.get(st, "study", "n_eigs", int, 3, lambda v: v >= 1, "must be >= 1"),
        scale=r.get(st, "study", "scale", float, 1.0),
        a0s=r.get(st, "study", "a0s", _tuple_of(float), (2.0, 4.0, 8.0), lambda v: all(a > 0 for a in v), "must be positive"),
        drift_tol=r.get(st, "study", "drift_tol", float, 0.02, lambda v: v > 0, "must be positive"),
        degrees=r.get(st, "study", "degrees", _tuple_of(int), (1, 2, 3, 4), lambda v: len(v) >= 1 and min(v) >= 1, "degrees must be >= 1"),
        infsup_ns=r.get(st, "study", "infsup_ns", _tuple_of(int), (4, 8), lambda v: len(v) >= 1 and min(v) >= 1, "must be positive integers"),
        zero_on=r.get(st, "study", "zero_on", str, "all", lambda v: v in ("all", "dirichlet", "neumann"), "must be all, dirichlet or neumann"),
    )

    out = data.get("output", {})
    out_dir = Path(os.environ.get(OUTPUT_ENV) or r.get(out, "output", "dir", str, "output"))
    plots = r.get(out, "output", "plots", bool, False)
    prefix = r.get(out, "output", "prefix", str, "")

    try:
        problem = Problem(
            domain=domain,
            n=n,
            barycentric=bary,
            perturb=perturb,
            seed=seed,
            dirichlet=tuple(dirichlet),
            mesh_file=mesh_file,
            materials=tuple(materials),
            k=k,
            penalty=penalty,
            solver=solver,
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(problem, study, out_dir, plots, prefix, source, data)


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: configuration file not found")
    return parse_config(path.read_text(), str(path), path.parent)


def describe(config: RunConfig, extra: dict[str, Any] | None = None) -> str:
    """Plain-text header lines (without comment markers) for output files."""
    from . import __version__

    p = config.problem
    lines = [
        f"stressdg {__version__}",
        f"config {config.source} sha256:{config.config_hash()}",
        f"seed {p.seed}",
        f"domain {p.domain} n={p.n} barycentric={p.barycentric} perturb={p.perturb} dirichlet={','.join(p.dirichlet)}",
        f"k {p.k} penalty_rule={p.penalty.rule} a0={p.penalty.a0} facet_size={p.penalty.facet_size} neumann_average={p.penalty.neumann_average}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} {value}")
    return "\n".join(lines)
