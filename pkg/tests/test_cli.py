"""End-to-end runs of the command line against its reproducibility contract."""

import csv
import json
import os

import numpy as np
import pytest

from fbsdelab import cli
from fbsdelab.errors import ConfigError

FAST = ["--set", "n_t=81", "--set", "n_x=61", "--set", "paths=100"]


@pytest.fixture(autouse=True)
def no_env_outdir(monkeypatch):
    monkeypatch.delenv("FBSDELAB_OUT", raising=False)


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(c) for c in r] for r in rows[1:]]


def test_load_config_precedence(tmp_path):
    schema = cli._schema("simulate")
    cfg = cli.load_config(schema, None, [])
    assert cfg["paths"] == 2000 and cfg["problem"] == "linear"
    f = tmp_path / "run.cfg"
    f.write_text("paths = 500\nepsilon = 0.3   # trailing comment\n")
    cfg = cli.load_config(schema, str(f), ["paths=250"])
    assert cfg["paths"] == 250        # --set beats the file
    assert cfg["epsilon"] == 0.3
    with pytest.raises(ConfigError):
        cli.load_config(schema, str(f), ["nonsense=1"])
    bad = tmp_path / "bad.cfg"
    bad.write_text("paths\n")
    with pytest.raises(ConfigError):
        cli.load_config(schema, str(bad), [])


def test_unknown_key_exits_with_config_code(capsys):
    code = cli.main(["simulate", "--set", "wibble=3"])
    assert code == 2
    assert "unknown configuration key" in capsys.readouterr().err


def test_missing_out_dir_is_a_config_error(capsys):
    code = cli.main(["simulate"])
    assert code == 2
    assert "--out" in capsys.readouterr().err


def test_check_assumptions_runs_without_output_dir(capsys):
    code = cli.main(["check-assumptions", "--set", "samples=512"])
    assert code == 0
    assert "all structural checks passed" in capsys.readouterr().out


def test_limit_output_is_stable_across_reruns(tmp_path, capsys):
    d1, d2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    assert cli.main(["limit", "--out", d1]) == 0
    assert cli.main(["limit", "--out", d2]) == 0
    b1 = open(os.path.join(d1, "limit-solution.txt"), "rb").read()
    b2 = open(os.path.join(d2, "limit-solution.txt"), "rb").read()
    assert b1 == b2
    m1 = json.load(open(os.path.join(d1, "manifest.json")))
    m2 = json.load(open(os.path.join(d2, "manifest.json")))
    assert m1 == m2
    assert "limit-solution.txt" in m1["files"]


def test_simulate_writes_bundle_and_residual_table(tmp_path):
    d = str(tmp_path / "sim")
    code = cli.main(["simulate", "--out", d, *FAST, "--set", "epsilon=0.1"])
    assert code == 0
    names = sorted(os.listdir(d))
    assert names == ["bundle.txt", "manifest.json", "residual.csv", "run.log"]
    header, rows = read_csv(os.path.join(d, "residual.csv"))
    assert header == ["t", "mean", "rms", "max"]
    assert len(rows) == 80
    assert max(r[3] for r in rows) < 1e-10   # identity field: algebraic residual


def test_noise_gap_sweep_constants(tmp_path):
    d = str(tmp_path / "gap")
    code = cli.main(["sweep-noise-gap", "--out", d, *FAST,
                     "--set", "epsilons=0.8,0.4,0.2,0.1"])
    assert code == 0
    header, rows = read_csv(os.path.join(d, "noise-gap.csv"))
    assert header[:2] == ["epsilon_1", "epsilon_2"]
    assert [r[0] for r in rows] == [0.8, 0.4, 0.2]   # descending pairs
    sup = header.index("sup_dx2")
    assert rows[0][sup] / rows[1][sup] == pytest.approx(2.0, rel=1e-9)
    assert rows[1][sup] / rows[2][sup] == pytest.approx(2.0, rel=1e-9)
    con = header.index("constant")
    for r in rows:
        scale = np.sqrt(r[0]) - np.sqrt(r[1])
        assert r[con] == pytest.approx(max(r[sup], r[header.index("sup_dy2")],
                                           r[header.index("int_dz2")]) / scale)


def test_solve_field_threads_do_not_change_output(tmp_path):
    base = ["solve-field", "--set", "n_t=81", "--set", "n_x=61",
            "--set", "epsilons=0.3,0.1"]
    d1, d2 = str(tmp_path / "t1"), str(tmp_path / "t8")
    assert cli.main([*base, "--out", d1, "--threads", "1"]) == 0
    assert cli.main([*base, "--out", d2, "--threads", "2"]) == 0
    m1 = open(os.path.join(d1, "manifest.json"), "rb").read()
    m2 = open(os.path.join(d2, "manifest.json"), "rb").read()
    assert m1 == m2
    files = json.load(open(os.path.join(d1, "manifest.json")))["files"]
    assert set(files) == {"field-0.3.txt", "field-0.1.txt",
                          "field-limit.txt", "fields.csv"}


def test_failed_run_cleans_its_output_directory(tmp_path, capsys):
    d = str(tmp_path / "doomed")
    code = cli.main(["sweep-time-gap", "--out", d, *FAST,
                     "--set", "t_a=0.1234"])
    assert code == 10   # start time off the grid: shape error
    assert not os.path.exists(d)
    assert "error:" in capsys.readouterr().err


def test_seed_flag_controls_the_noise(tmp_path):
    base = ["sweep-noise-gap", *FAST, "--set", "epsilons=0.4,0.2"]
    d1, d2, d3 = (str(tmp_path / n) for n in ("s1", "s2", "s1again"))
    assert cli.main([*base, "--out", d1, "--seed", "1"]) == 0
    assert cli.main([*base, "--out", d2, "--seed", "2"]) == 0
    assert cli.main([*base, "--out", d3, "--seed", "1"]) == 0
    get = lambda d: open(os.path.join(d, "noise-gap.csv"), "rb").read()
    assert get(d1) != get(d2)
    assert get(d1) == get(d3)


def test_env_var_supplies_output_directory(tmp_path, monkeypatch):
    d = str(tmp_path / "envout")
    monkeypatch.setenv("FBSDELAB_OUT", d)
    assert cli.main(["sweep-moments", *FAST, "--set", "epsilons=0.3"]) == 0
    assert os.path.exists(os.path.join(d, "moments.csv"))
