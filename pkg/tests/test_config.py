from pathlib import Path

import pytest

from stressdg.config import OUTPUT_ENV, ConfigError, describe, load_config, parse_config

GOOD = """
[mesh]
domain = "square"
n = 4
barycentric = true
dirichlet = ["y0"]

[[material]]
id = 0
rho = 1.0
E = 1.0
nu = 0.35

[discretization]
k = 1
a0 = 2.0

[solver]
nev = 6
"""


def test_parse_good_config():
    cfg = parse_config(GOOD)
    p = cfg.problem
    assert p.domain == "square" and p.n == 4 and p.barycentric
    assert p.dirichlet == ("y0",)
    assert p.k == 1 and p.penalty.a0 == 2.0 and p.penalty.rule == "k_squared"
    assert p.solver.nev == 6


def test_k_zero_rejected_with_line_number():
    text = GOOD.replace("k = 1", "k = 0")
    line = text.splitlines().index("k = 0") + 1
    with pytest.raises(ConfigError, match=rf"cfg.toml:{line}: discretization.k: .*k must be >= 1"):
        parse_config(text, "cfg.toml")


@pytest.mark.parametrize(
    "old,new,fragment",
    [
        ('domain = "square"', 'domain = "torus"', "mesh.domain"),
        ("nu = 0.35", "nu = 0.5", "material.nu"),
        ("nev = 6", 'nev = "six"', "solver.nev: expected int"),
        ('dirichlet = ["y0"]', 'dirichlet = ["top"]', "mesh.dirichlet: unknown side"),
    ],
)
def test_invalid_values_cite_line(old, new, fragment):
    text = GOOD.replace(old, new)
    line = text.splitlines().index(new) + 1
    with pytest.raises(ConfigError, match=rf"^c\.toml:{line}: {fragment}"):
        parse_config(text, "c.toml")


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(GOOD + "\n[output]\ncolour = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(GOOD + "\n[extras]\nx = 1\n")


def test_toml_syntax_error():
    with pytest.raises(ConfigError):
        parse_config("[mesh\nn = 1")


def test_missing_mesh_file(tmp_path):
    with pytest.raises(ConfigError, match="file not found"):
        parse_config('[mesh]\ndomain = "file"\nfile = "nope.msh"\n', "c.toml", tmp_path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")


def test_lame_material_record():
    cfg = parse_config('[[material]]\nid = 0\nrho = 2.0\nlambda = 1.0\nmu = 0.5\n')
    assert cfg.problem.materials[0]["lambda"] == 1.0


def test_hash_is_stable_and_sensitive():
    a, b = parse_config(GOOD), parse_config(GOOD)
    assert a.config_hash() == b.config_hash()
    assert parse_config(GOOD.replace("a0 = 2.0", "a0 = 4.0")).config_hash() != a.config_hash()


def test_describe_header_contents():
    cfg = parse_config(GOOD.replace("n = 4", "n = 4\nseed = 7\nperturb = 0.1"), "x.toml")
    head = describe(cfg, {"penalty_used": 2.0})
    assert "seed 7" in head and "sha256:" in head and "a0=2.0" in head and "penalty_used 2.0" in head


def test_output_dir_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert parse_config(GOOD + '\n[output]\ndir = "elsewhere"\n').output_dir == tmp_path


SHIPPED = sorted(p for p in (Path(__file__).parents[1] / "configs").glob("*.toml") if not p.name.startswith("check_"))


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.problem.k >= 1
