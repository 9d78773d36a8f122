import csv

import numpy as np
import pytest

from stressdg.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main

BASE = """
[mesh]
domain = "square"
n = {n}
barycentric = true
dirichlet = ["y0"]

[discretization]
k = {k}
a0 = 8.0

[solver]
nev = 4
method = "{method}"
dense_cap = {cap}

[study]
degrees = [1, 2, 3]
infsup_ns = [2, 4]
a0s = [4.0, 8.0]
n_eigs = 4

[output]
dir = "{out}"
"""


def write_config(tmp_path, name="run.toml", n=2, k=1, method="auto", cap=6000):
    path = tmp_path / name
    path.write_text(BASE.format(n=n, k=k, method=method, cap=cap, out=(tmp_path / "out").as_posix()))
    return path


def read_rows(path):
    lines = path.read_text().splitlines()
    header = [line for line in lines if line.startswith("# ")]
    rows = list(csv.DictReader(line for line in lines if not line.startswith("#")))
    return header, rows


def test_solve_writes_spectrum_csv_with_header(tmp_path, capsys):
    assert main(["solve", str(write_config(tmp_path))]) == EXIT_OK
    header, rows = read_rows(tmp_path / "out" / "spectrum.csv")
    text = "\n".join(header)
    assert header[0].startswith("# stressdg ")
    assert "sha256:" in text and "seed 0" in text and "penalty_used" in text and "cells" in text
    assert set(rows[0]) == {"index", "kappa", "omega", "is_kernel", "residual"}
    assert "omega:" in capsys.readouterr().out


def test_k_zero_exits_with_config_error(tmp_path, capsys):
    assert main(["solve", str(write_config(tmp_path, k=0))]) == EXIT_CONFIG
    assert "k must be >= 1" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["solve", str(tmp_path / "nothing.toml")]) == EXIT_CONFIG


def test_solver_failure_exits_3(tmp_path, capsys):
    assert main(["solve", str(write_config(tmp_path, method="dense", cap=10))]) == EXIT_SOLVER
    assert "dense cap" in capsys.readouterr().err


def test_check_mode(tmp_path):
    cfg = write_config(tmp_path)
    main(["solve", str(cfg)])
    _, rows = read_rows(tmp_path / "out" / "spectrum.csv")
    omegas = [float(r["omega"]) for r in rows if r["is_kernel"] in ("0", "False")][:2]
    good = tmp_path / "good.toml"
    good.write_text(f"omega = {omegas}\ntolerance = 1e-8\n")
    bad = tmp_path / "bad.toml"
    bad.write_text(f"omega = {[w + 1e-3 for w in omegas]}\ntolerance = 1e-8\n")
    assert main(["solve", str(cfg), "--check", str(good)]) == EXIT_OK
    assert main(["solve", str(cfg), "--check", str(bad)]) == EXIT_CHECK


def test_rerun_and_thread_count_reproduce_csv_bitwise(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out" / "spectrum.csv"
    assert main(["solve", str(cfg)]) == EXIT_OK
    first = out.read_bytes()
    assert main(["solve", str(cfg)]) == EXIT_OK
    assert out.read_bytes() == first
    assert main(["solve", str(cfg), "--threads", "1"]) == EXIT_OK
    assert out.read_bytes() == first


def test_output_dir_flag_and_env(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    assert main(["solve", str(cfg), "--output-dir", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "flag" / "spectrum.csv").exists()
    monkeypatch.setenv("STRESSDG_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["solve", str(cfg)]) == EXIT_OK
    assert (tmp_path / "env" / "spectrum.csv").exists()


def test_traceconst_is_monotone_in_k(tmp_path):
    cfg = write_config(tmp_path, n=4)
    assert main(["traceconst", str(cfg)]) == EXIT_OK
    header, rows = read_rows(tmp_path / "out" / "traceconst.csv")
    c = np.array([float(r["trace_constant"]) for r in rows])
    assert [int(r["k"]) for r in rows] == [1, 2, 3]
    assert np.all(np.diff(c) > 0)
    assert (tmp_path / "out" / "traceconst.txt").read_text().startswith("# stressdg")


def test_infsup_command_table(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["infsup", str(cfg)]) == EXIT_OK
    _, rows = read_rows(tmp_path / "out" / "infsup.csv")
    beta = {(int(r["n"]), int(r["barycentric"])): float(r["beta"]) for r in rows}
    assert len(beta) == 4
    assert beta[(4, 1)] > 10 * max(beta[(4, 0)], 1e-12)


def test_spurious_command_writes_report(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["spurious", str(cfg)]) == EXIT_OK
    header, rows = read_rows(tmp_path / "out" / "spurious.csv")
    assert header and rows
    assert (tmp_path / "out" / "spurious.txt").exists()


def test_study_needs_reference(tmp_path):
    assert main(["study", str(write_config(tmp_path))]) == EXIT_CONFIG


def test_unknown_command_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", str(write_config(tmp_path))])
    assert exc.value.code == 2
