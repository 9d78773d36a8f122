"""Command-line front end: ``stressdg {solve,study,spurious,infsup,traceconst} CONFIG``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .analysis import infsup_constant, run_rate_study, spurious_scan
from .assembly import penalty_lower_bound, trace_constant
from .config import ConfigError, RunConfig, describe, load_config
from .eigen import EigenSolveError
from .pardiso import PardisoError

log = logging.getLogger("stressdg")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4


class CheckFailed(Exception):
    pass


def _out(config: RunConfig, name: str) -> Path:
    config.output_dir.mkdir(parents=True, exist_ok=True)
    return config.output_dir / f"{config.prefix}{name}"


def _write_table(path: Path, header: str, columns: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        for line in header.splitlines():
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def _write_text(path: Path, header: str, body: str) -> None:
    path.write_text("".join(f"# {line}\n" for line in header.splitlines()) + body + "\n")


def _plot(fn, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path.name)
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    fn(ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _close(values, expected, tol) -> bool:
    values, expected = np.asarray(values, float), np.asarray(expected, float)
    return len(values) >= len(expected) and bool(np.all(np.abs(values[: len(expected)] - expected) <= tol))


# -- commands --------------------------------------------------------------------------


def cmd_solve(config: RunConfig, expected: dict | None = None) -> dict:
    p = config.problem
    mesh = p.mesh()
    forms = p.forms(mesh)
    a = forms.penalty_used
    extra = {"mesh": mesh.describe(), "penalty_used": f"{a:.12g}", "dofs": forms.total_dofs}
    if p.penalty.rule == "computed":
        c = trace_constant(mesh, p.k)
        extra["trace_constant"] = f"{c:.10g}"
        extra["a_star"] = f"{penalty_lower_bound(c):.10g}"
    res = p.solve(forms)
    extra["method"] = res.method
    extra["kernel_count"] = res.kernel_count if res.kernel_count is not None else "not computed"
    header = describe(config, extra)
    res.write_csv(_out(config, "spectrum.csv"), header)
    om = res.omegas[: p.solver.nev]
    print(header)
    print("omega: " + " ".join(f"{w:.6f}" for w in om))
    if res.violations.size:
        print(f"warning: {res.violations.size} eigenvalues below the kernel cluster (penalty too small?)")
    if config.plots:
        _plot(lambda ax: (ax.plot(np.arange(1, len(om) + 1), om, "o"), ax.set_xlabel("index"), ax.set_ylabel("omega")), _out(config, "spectrum.svg"))
    if expected is not None and "omega" in expected:
        tol = float(expected.get("tolerance", 1e-6))
        if not _close(om, expected["omega"], tol):
            raise CheckFailed(f"omega {np.round(om, 6).tolist()} differs from expected {expected['omega']} by more than {tol}")
    return {"omega": om, "result": res}


def cmd_study(config: RunConfig, expected: dict | None = None) -> dict:
    p, s = config.problem, config.study
    ref_problem = None
    if s.references is None:
        if s.reference_k is None or s.reference_n is None:
            raise ConfigError(f"{config.source}: study needs study.references or study.reference_k and study.reference_n")
        ref_problem = p.replace(k=s.reference_k, n=s.reference_n)
    study = run_rate_study(p, s.ns, s.references, ref_problem, n_eigs=s.n_eigs, scale=s.scale)
    header = describe(config, {"ns": ",".join(map(str, s.ns)), "reference": study.provenance})
    study.write_csv(_out(config, "study.csv"), header)
    _write_text(_out(config, "study.txt"), header, study.summary())
    print(study.summary())
    if config.plots:

        def draw(ax):
            for j in range(study.values.shape[1]):
                ax.loglog(study.h, study.errors[:, j], "o-", label=f"eig {j + 1}")
            ax.set_xlabel("h")
            ax.set_ylabel("error")
            ax.legend()

        _plot(draw, _out(config, "study.svg"))
    if expected is not None and "min_average_rate" in expected:
        rates = study.average_rates
        if not np.all(rates >= float(expected["min_average_rate"])):
            raise CheckFailed(f"average rates {np.round(rates, 3).tolist()} below {expected['min_average_rate']}")
    return {"study": study}


def cmd_spurious(config: RunConfig, expected: dict | None = None) -> dict:
    p, s = config.problem, config.study
    report = spurious_scan(p, s.a0s, n_eigs=s.n_eigs, drift_tol=s.drift_tol)
    header = describe(config, {"a0s": ",".join(map(str, s.a0s)), "drift_tol": s.drift_tol})
    report.write_csv(_out(config, "spurious.csv"), header)
    _write_text(_out(config, "spurious.txt"), header, report.table())
    print(report.table())
    for w in report.warnings:
        print(f"warning: {w}")
    if config.plots:

        def draw(ax):
            for a0, om, fl in zip(report.a0s, report.omegas, report.flags):
                ax.scatter(np.full(len(om), a0), om, c=np.where(fl, "red", "black"), s=12)
            ax.set_xscale("log", base=2)
            ax.set_xlabel("a0")
            ax.set_ylabel("omega")

        _plot(draw, _out(config, "spurious.svg"))
    if expected is not None and "flagged" in expected:
        if bool(report.flagged) != bool(expected["flagged"]):
            raise CheckFailed(f"flagged set is {'nonempty' if report.flagged else 'empty'}, expected otherwise")
    return {"report": report}


def cmd_infsup(config: RunConfig, expected: dict | None = None) -> dict:
    p, s = config.problem, config.study
    rows = []
    for n in s.infsup_ns:
        for bary in (False, True):
            mesh = p.replace(n=n, barycentric=bary).mesh()
            beta = infsup_constant(mesh, p.k, zero_on=s.zero_on)
            rows.append([n, f"{mesh.mesh_size:.6g}", int(bary), p.k, f"{beta:.10g}"])
    header = describe(config, {"zero_on": s.zero_on})
    _write_table(_out(config, "infsup.csv"), header, ["n", "h", "barycentric", "k", "beta"], rows)
    text = "\n".join(f"n={r[0]:<4} h={r[1]:<10} {'barycentric' if r[2] else 'plain':<12} k={r[3]} beta={r[4]}" for r in rows)
    _write_text(_out(config, "infsup.txt"), header, text)
    print(text)
    betas = {(r[0], r[2]): float(r[4]) for r in rows}
    if expected is not None and "beta_min" in expected:
        bary = [b for (n, is_b), b in betas.items() if is_b]
        if min(bary) < float(expected["beta_min"]):
            raise CheckFailed(f"barycentric beta {min(bary):.4g} below {expected['beta_min']}")
    return {"betas": betas}


def cmd_traceconst(config: RunConfig, expected: dict | None = None) -> dict:
    p, s = config.problem, config.study
    mesh = p.mesh()
    rows, values = [], []
    for k in s.degrees:
        c = trace_constant(mesh, k)
        values.append(c)
        rows.append([k, f"{c:.10g}", f"{penalty_lower_bound(c):.10g}"])
    header = describe(config, {"mesh": mesh.describe()})
    _write_table(_out(config, "traceconst.csv"), header, ["k", "trace_constant", "a_star"], rows)
    text = "\n".join(f"k={r[0]}  C_tr={r[1]}  a*={r[2]}" for r in rows)
    _write_text(_out(config, "traceconst.txt"), header, text)
    print(text)
    if expected is not None and "trace_constant" in expected:
        tol = float(expected.get("tolerance", 1e-8))
        if not _close(values, expected["trace_constant"], tol):
            raise CheckFailed(f"trace constants {values} differ from expected {expected['trace_constant']}")
    return {"trace_constants": values}


COMMANDS = {
    "solve": cmd_solve,
    "study": cmd_study,
    "spurious": cmd_spurious,
    "infsup": cmd_infsup,
    "traceconst": cmd_traceconst,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stressdg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"stressdg {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="TOML run configuration")
    parser.add_argument("--output-dir", help="override output.dir (also STRESSDG_OUTPUT_DIR)")
    parser.add_argument("--threads", type=int, default=None, help="BLAS/LAPACK threads (default: all cores)")
    parser.add_argument("--check", metavar="EXPECTED", help="TOML file of expected values; exit 4 on mismatch")
    parser.add_argument("--plots", action="store_true", help="write SVG plots")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        changes = {}
        if args.output_dir:
            changes["output_dir"] = Path(args.output_dir)
        if args.plots:
            changes["plots"] = True
        if changes:
            import dataclasses

            config = dataclasses.replace(config, **changes)
        expected = None
        if args.check:
            try:
                expected = tomllib.loads(Path(args.check).read_text())
            except (OSError, tomllib.TOMLDecodeError) as exc:
                raise ConfigError(f"{args.check}: {exc}") from None
        with _thread_limit(args.threads):
            COMMANDS[args.command](config, expected)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (EigenSolveError, PardisoError, np.linalg.LinAlgError, MemoryError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
