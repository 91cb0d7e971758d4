import json

import numpy as np
import pytest

from brwre import cli
from brwre.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main, read_csv
from brwre.config import ConfigError, RunConfig, build_config, parse_sites, read_config_file, write_config_file


def run(args, capsys):
    code = main(args)
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------------------
# configuration


def test_parse_sites():
    assert parse_sites("1,0,0; 0,2,1") == [[1, 0, 0], [0, 2, 1]]


def test_config_file_roundtrip(tmp_path):
    cfg = build_config({"command": "snake", "d": 2, "M": 4, "m_grid": "2,4", "sites": "1,0;0,1", "quenched": "yes"})
    path = tmp_path / "run.cfg"
    write_config_file(cfg, path)
    back = build_config({"command": "snake"}, read_config_file(path))
    assert back.resolved() == cfg.resolved()


def test_cli_beats_file_beats_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("schema_version = 1\nd = 2\nM = 5\nseed = 9\n")
    cfg = build_config({"command": "snake", "seed": 3}, read_config_file(path))
    assert (cfg.d, cfg.M, cfg.seed, cfg.law) == (2, 5, 3, "binary")


@pytest.mark.parametrize("text,field", [
    ("d = 2\n", "schema_version"),
    ("schema_version = 2\n", "schema_version"),
    ("schema_version = 1\nbogus = 1\n", "bogus"),
    ("schema_version = 1\nworkers = 4\n", "workers"),
    ("schema_version = 1\nd = three\n", "d"),
])
def test_bad_config_files(tmp_path, text, field):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError) as exc:
        read_config_file(path)
    assert any(d["field"] == field for d in exc.value.diagnostics)


@pytest.mark.parametrize("values,field", [
    ({"d": 0}, "d"),
    ({"M": 3, "m": 5}, "m"),
    ({"kind": "weird"}, "kind"),
    ({"kind": "conductances", "edges": "uniform(0,1)"}, "edges"),
    ({"law": "0.3,0.3,0.3"}, "law"),
    ({"m_grid": "8,4"}, "m_grid"),
    ({"x": "1,0"}, "x"),
    ({"kill": "sometimes"}, "kill"),
])
def test_validation_diagnostics(values, field):
    with pytest.raises(ConfigError) as exc:
        build_config({"command": "snake"} | values)
    assert any(field in d["field"] for d in exc.value.diagnostics)


def test_resolved_config_omits_workers(monkeypatch):
    monkeypatch.setenv("BRWRE_WORKERS", "3")
    cfg = build_config({"command": "snake"})
    assert cfg.workers == 3
    assert "workers" not in cfg.resolved()


def test_bad_worker_variable(monkeypatch, capsys):
    monkeypatch.setenv("BRWRE_WORKERS", "many")
    code, _, err = run(["snake", "--d", "1", "--m", "1", "--replicates", "5"], capsys)
    assert code == EXIT_CONFIG
    assert "BRWRE_WORKERS" in err


def test_run_config_defaults():
    cfg = RunConfig()
    assert cfg.replicates == [100_000] and cfg.z_tol == 3.0


# ---------------------------------------------------------------------------
# commands


def test_env_sample_load_verify(tmp_path, capsys):
    path = str(tmp_path / "e.env")
    code, out, _ = run(["env", "sample", path, "--d", "2", "--M", "3", "--kind", "mixed", "--seed", "4"], capsys)
    assert code == EXIT_OK and json.loads(out)["written"] == path
    code, out, _ = run(["env", "load", path], capsys)
    assert code == EXIT_OK and json.loads(out)["kind"] == "mixed"
    code, out, _ = run(["env", "verify", path], capsys)
    assert code == EXIT_OK and json.loads(out)["verified"]
    data = bytearray(open(path, "rb").read())
    data[-1] ^= 0x55
    open(path, "wb").write(bytes(data))
    code, out, _ = run(["env", "verify", path], capsys)
    assert code == EXIT_FAIL and not json.loads(out)["verified"]


def test_green_csv_traps_equal_homogeneous(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["green", "--d", "2", "--m", "3", "--kind", "traps", "--seed", "1", "--out", str(a)], capsys)[0] == 0
    assert run(["green", "--d", "2", "--m", "3", "--out", str(b)], capsys)[0] == 0
    ra, rb = read_csv(a), read_csv(b)
    assert list(ra[0]) == ["x1", "x2", "y1", "y2", "g_value"]
    assert len(ra) == 49
    assert max(abs(float(p["g_value"]) - float(q["g_value"])) for p, q in zip(ra, rb)) < 1e-12
    header = a.read_text().splitlines()[:3]
    assert header[0] == f"# brwre-csv schema={cli.CSV_SCHEMA}"
    assert header[1].startswith("# config=") and header[2].startswith("# versions=")


def test_series_csv(tmp_path, capsys):
    out = tmp_path / "s.csv"
    code, _, err = run(["series", "--d", "3", "--M", "1", "--n-max", "100", "--out", str(out)], capsys)
    assert code == EXIT_OK
    rows = read_csv(out)
    assert list(rows[0]) == ["n", "P_n", "S_n", "contamination"]
    assert float(rows[2]["P_n"]) == pytest.approx(1 / 6)
    assert json.loads(err)["route"] == "exact-homogeneous"


def test_snake_csv(tmp_path, capsys):
    out = tmp_path / "snake.csv"
    code, _, _ = run(["snake", "--d", "2", "--m", "2", "--replicates", "50", "--seed", "2", "--out", str(out)], capsys)
    assert code == EXIT_OK
    rows = read_csv(out)
    assert len(rows) == 50
    assert list(rows[0]) == ["replicate", "value", "particle_count", "spine_exit_step", "censored"]


def test_experiment_json_and_csv(tmp_path, capsys):
    out, csv_path = tmp_path / "r.json", tmp_path / "r.csv"
    code, _, _ = run(["experiment", "first-moment", "--d", "2", "--m", "3", "--kind", "conductances",
                      "--replicates", "5000", "--out", str(out), "--csv", str(csv_path)], capsys)
    assert code == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["report"]["schema_version"] == 1 and doc["report"]["passed"]
    assert doc["config"]["edges"] is None and doc["config"]["env"]["edges"] == "uniform(0.5,2.0)"
    assert {"brwre", "numpy", "scipy", "backend"} <= set(doc["versions"])
    rows = read_csv(csv_path)
    assert list(rows[0]) == ["experiment", "m", "statistic", "value"]


def test_experiment_failure_exit_code(capsys):
    code, _, err = run(["experiment", "first-moment", "--d", "2", "--m", "3", "--replicates", "500",
                        "--z-tol", "1e-9"], capsys)
    assert code == EXIT_FAIL
    assert err.startswith("FAILED:")


def test_scaling_bounded_verdict(capsys):
    code, _, err = run(["experiment", "scaling", "--d", "5", "--m-grid", "1,2,3", "--replicates", "2000"], capsys)
    assert code == EXIT_OK
    assert "verdict: bounded" in err


def test_config_error_exit_code(capsys):
    code, _, err = run(["snake", "--d", "3", "--M", "2", "--m", "5"], capsys)
    assert code == EXIT_CONFIG
    diag = json.loads(err)
    assert diag["error"] == "config" and diag["diagnostics"][0]["field"] == "m"


def test_config_file_option(tmp_path, capsys):
    cfgf = tmp_path / "c.cfg"
    cfgf.write_text("schema_version = 1\nd = 1\nm = 4\nreplicates = 10\n")
    code, out, _ = run(["snake", "--config", str(cfgf)], capsys)
    assert code == EXIT_OK
    assert out.count("\n") == 3 + 1 + 10


def test_conductance_commands(tmp_path, capsys):
    out = tmp_path / "c.csv"
    code, _, _ = run(["conductance", "--d", "2", "--kind", "conductances", "--m-grid", "2,4", "--out", str(out)], capsys)
    assert code == EXIT_OK
    rows = read_csv(out)
    assert [int(r["m"]) for r in rows] == [2, 4]
    assert all(float(r["duality_defect"]) < 1e-9 for r in rows)
    code, out, _ = run(["conductance", "--recurrence", "--d", "1", "--m-grid", "4,8"], capsys)
    assert code == EXIT_OK and json.loads(out)["report"]["passed"]


def test_reroot_demo(capsys):
    code, out, _ = run(["reroot-demo", "--d", "2", "--m", "5", "--kind", "conductances", "--steps", "2"], capsys)
    assert code == EXIT_OK
    doc = json.loads(out)
    assert not doc["problems"]
    spine = np.array(doc["spine"])
    np.testing.assert_array_equal(np.array(doc["rerooted_spine"]), spine[2:] - spine[2])
