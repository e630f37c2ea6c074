"""Configuration validation, reports and the command line."""

import csv
import json

import pytest

from crlab.cli import main
from crlab.errors import ConfigInvalid
from crlab.suites import SUITE_NAMES, load_config, run_suite

FAST = {"params": {"count": 2, "dims": [2]}}


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def test_all_suites_have_defaults():
    assert len(SUITE_NAMES) == 11
    for s in SUITE_NAMES:
        assert load_config(s).suite == s


@pytest.mark.parametrize(
    "data, path",
    [
        ({"bogus": 1}, "bogus"),
        ({"epsilon_ladder": [0.1, 0.2, 0.05]}, "epsilon_ladder[1]"),
        ({"epsilon_ladder": [0.1, "a", 0.05]}, "epsilon_ladder[1]"),
        ({"grid": [12, 12, 20]}, "grid[1]"),
        ({"seed": -1}, "seed"),
        ({"params": {"samples": "two"}}, "params.samples"),
        ({"params": {"nope": 1}}, "params.nope"),
        ({"tolerances": {"finest": 0}}, "tolerances.finest"),
        ({"manifold": {"n": 2, "m": 1, "rho": [[{"coeff": 1.0, "exponents": [1, 0]}]]}}, "manifold.rho[0][0].exponents"),
        ({"manifold": {"n": 2, "m": 2, "rho": []}}, "manifold.m"),
        ({"suite": "bm"}, "suite"),
    ],
)
def test_config_errors_name_the_field(tmp_path, data, path):
    with pytest.raises(ConfigInvalid) as e:
        load_config("homotopy-residual", _write(tmp_path, data))
    assert e.value.path == path


def test_homotopy_ladder_needs_three_rungs():
    with pytest.raises(ConfigInvalid) as e:
        load_config("homotopy-residual", overrides={"epsilon_ladder": [0.03, 0.01], "grid": [12, 16]})
    assert e.value.path == "epsilon_ladder"


def test_grid_must_match_ladder():
    with pytest.raises(ConfigInvalid) as e:
        load_config("homotopy-residual", overrides={"grid": [8, 10]})
    assert e.value.path == "grid"


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigInvalid):
        load_config("bm", str(p))


def test_manifold_file_relative_to_config(tmp_path, bundled):
    (tmp_path / "m.json").write_text(json.dumps(bundled("hyperquadric").to_dict()))
    cfg = load_config("pseudoconcavity", _write(tmp_path, {"manifold": "m.json"}))
    assert cfg.manifold_data["n"] == 3


def test_config_hash_tracks_content(tmp_path):
    a = load_config("invert-map", _write(tmp_path, FAST))
    b = load_config("invert-map", _write(tmp_path, FAST, "other.json"), {"out": str(tmp_path)})
    c = load_config("invert-map", _write(tmp_path, FAST), {"seed": 5})
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_reports_are_deterministic_and_runs_get_new_dirs(tmp_path):
    cfg = load_config("invert-map", _write(tmp_path, FAST), {"out": str(tmp_path / "out")})
    s1, d1, r1 = run_suite(cfg)
    s2, d2, r2 = run_suite(cfg)
    assert s1 == s2 == 0
    assert d1 != d2
    assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()
    assert r1["config_hash"] == cfg.config_hash() and r1["anchors"]


def test_csv_outputs_have_headers(tmp_path):
    cfg = load_config("discrete-algebra", overrides={"out": str(tmp_path)})
    _, d, report = run_suite(cfg)
    for name in ("criteria.csv", "timings.csv", "neumann.csv"):
        with open(d / name, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) >= 2 and all(rows[0])
    with open(d / "criteria.csv", encoding="utf-8") as fh:
        assert len(list(csv.DictReader(fh))) == len(report["criteria"])
    assert "seconds" not in (d / "report.json").read_text()


def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["invert-map", "--config", _write(tmp_path, FAST), "--out", out]) == 0
    assert "PASS" in capsys.readouterr().out
    strict = _write(tmp_path, {"tolerances": {"neumann": 1e-30}}, "strict.json")
    assert main(["discrete-algebra", "--config", strict, "--out", out]) == 1
    assert main(["homotopy-residual", "--epsilon-ladder", "0.1,0.05", "--grid", "4,5"]) == 2
    assert "epsilon_ladder" in capsys.readouterr().err
    big = _write(tmp_path, {"params": {"norm": 0.4, "count": 1, "dims": [2]}}, "big.json")
    assert main(["invert-map", "--config", big, "--out", out]) == 3


def test_cli_rejects_unknown_suite():
    with pytest.raises(SystemExit):
        main(["no-such-suite"])


def test_inline_manifold_runs(tmp_path, bundled):
    data = {"manifold": dict(bundled("hyperquadric").to_dict(), q=1), "params": {"samples": 16}}
    status, d, report = run_suite(load_config("pseudoconcavity", _write(tmp_path, data), {"out": str(tmp_path)}))
    assert status == 0 and report["config"]["manifold"] == "inline"
