import csv
import json
import os

import numpy as np
import pytest

from gmlimits import cli, maps
from gmlimits.errors import ConfigError

MINIMAL = {
    "model": {"kind": "finite_markov", "transition": [[0.9, 0.1], [0.2, 0.8]]},
    "observable": {"kind": "table", "values": [1.0, -1.0]},
    "run": {"n_list": [10, 100], "samples": 500, "seed": 7},
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(tmp_path, *args, cfg=MINIMAL, out="out"):
    return cli.main([*args, "--config", _write(tmp_path, cfg), "--out", str(tmp_path / out)])


# ------------------------------------------------------------------ config


def test_minimal_config_parses(tmp_path):
    cfg = cli.parse_config(_write(tmp_path, MINIMAL))
    assert cfg.model.n_cells == 2 and cfg.observable.depth == 1
    assert cfg.run["n_list"] == [10, 100] and cfg.target == {"classify": True}
    assert len(cfg.digest) == 16


def test_row_sum_error_names_location(tmp_path, capsys):
    bad = json.loads(json.dumps(MINIMAL))
    bad["model"]["transition"] = [[0.9, 0.09], [0.2, 0.8]]
    with pytest.raises(ConfigError, match=r"model\.transition row 0"):
        cli.parse_config(_write(tmp_path, bad))
    assert _run(tmp_path, "classify", cfg=bad) == 2
    assert "model.transition row 0" in capsys.readouterr().err


def test_unknown_key_suggestion(tmp_path):
    bad = dict(MINIMAL)
    bad["observabel"] = bad["observable"]
    with pytest.raises(ConfigError, match="did you mean 'observable'"):
        cli.parse_config(_write(tmp_path, bad))


def test_nested_unknown_key(tmp_path):
    bad = json.loads(json.dumps(MINIMAL))
    bad["run"]["sampels"] = 10
    with pytest.raises(ConfigError, match="in run.*'samples'"):
        cli.parse_config(_write(tmp_path, bad))


@pytest.mark.parametrize("patch, msg", [
    ({"model": {"kind": "finite_markof"}}, "finite_markov"),
    ({"observable": {"kind": "table"}}, "observable.values"),
    ({"run": {"n_list": [100, 10]}}, "strictly increasing"),
    ({"run": {"n_list": [10], "seed": -3}}, "run.seed"),
    ({"observable": {"kind": "table", "values": [[1.0, 2.0], [3.0, 4.0]], "depth": 1}}, "depth"),
])
def test_validation_errors(tmp_path, patch, msg):
    cfg = json.loads(json.dumps(MINIMAL))
    cfg.update(patch)
    with pytest.raises(ConfigError, match=msg):
        cli.parse_config(_write(tmp_path, cfg))


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        cli.parse_config(str(tmp_path / "nope.json"))
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        cli.parse_config(str(p))
    assert cli.main(["classify", "--config", str(p)]) == 2


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["classify"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate", "--preset", "clt_markov"])
    assert info.value.code == 2
    assert cli.main(["classify", "--preset", "clt_markovv", "--out", str(tmp_path)]) == 2


def test_all_presets_parse():
    names = cli.preset_names()
    for required in ("clt_markov", "stable_p15", "d2_boundary", "coboundary", "induced_doubling",
                     "berry_esseen_d05"):
        assert required in names
    for name in names:
        cfg = cli.load_preset(name)
        assert cfg.source == f"preset:{name}"


def test_table_depth_two(tmp_path):
    cfg = json.loads(json.dumps(MINIMAL))
    cfg["observable"] = {"kind": "table", "values": [[0.0, 1.0], [2.0, 3.0]]}
    assert cli.parse_config(_write(tmp_path, cfg)).observable.depth == 2


# ---------------------------------------------------------------- commands


def test_spectrum_rows(tmp_path):
    assert _run(tmp_path, "spectrum", "--t-min", "-1", "--t-max", "1", "--t-steps", "201") == 0
    rows = list(csv.reader(open(tmp_path / "out" / "spectrum.csv")))
    assert rows[0] == ["t", "re_lambda", "im_lambda", "abs_lambda", "re_mu", "im_mu", "gap"]
    assert len(rows) == 202


def test_simulate_deterministic(tmp_path):
    assert _run(tmp_path, "simulate", "--seed", "42", out="a") in (0, 1)
    assert _run(tmp_path, "simulate", "--seed", "42", "--threads", "1", out="b") in (0, 1)
    files = sorted(f for f in os.listdir(tmp_path / "a") if f.endswith(".csv"))
    assert files == ["ecdf_n10.csv", "ecdf_n100.csv"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert _run(tmp_path, "simulate", "--seed", "43", out="c") in (0, 1)
    assert (tmp_path / "a" / files[0]).read_bytes() != (tmp_path / "c" / files[0]).read_bytes()


def test_norming_d1(tmp_path, capsys):
    assert _run(tmp_path, "norming", "--n", "100") == 0
    out = capsys.readouterr().out
    mean = maps.observable_mean(*maps_pair())
    assert f"A_100 = {100 * mean!r}" in out and "B_100 = 10.0" in out
    rows = list(csv.reader(open(tmp_path / "out" / "norming.csv")))
    assert rows[0] == ["n", "a_n", "b_n"] and rows[1][0] == "100"


def maps_pair():
    m = maps.build_finite_markov([[0.9, 0.1], [0.2, 0.8]])
    return m, maps.depth_table(m, [1.0, -1.0])


def test_classify_report(tmp_path):
    assert _run(tmp_path, "classify") == 0
    rep = json.load(open(tmp_path / "out" / "classification.json"))
    assert set(rep) == {"variant", "p", "c1", "c2", "beta", "c", "diagnostics"}
    assert rep["variant"] == "D1"


def test_run_report_lists_existing_files(tmp_path):
    _run(tmp_path, "classify")
    rep = json.load(open(tmp_path / "out" / "run_report.json"))
    assert rep["command"] == "classify" and rep["seed"] == 7
    for path in rep["outputs"]:
        assert os.path.getsize(path) > 0


def test_coboundary_command(tmp_path):
    assert cli.main(["coboundary", "--preset", "coboundary", "--out", str(tmp_path)]) == 0
    rep = json.load(open(tmp_path / "run_report.json"))
    assert rep["verdicts"]["coboundary"] == "Coboundary"
    assert abs(rep["details"]["c"] - 3.0) < 1e-10
    assert _run(tmp_path, "coboundary", out="neg") == 1


def test_expansion_and_equivalence(tmp_path):
    assert _run(tmp_path, "expansion", "--t-min", "1e-3", "--t-max", "1", "--t-steps", "13") == 0
    rows = list(csv.reader(open(tmp_path / "out" / "expansion.csv")))
    assert rows[0] == ["t", "re_residual", "im_residual", "abs_residual"] and len(rows) == 14
    code = _run(tmp_path, "equivalence", "--samples", "2000", out="eq")
    assert code in (0, 1)
    assert (tmp_path / "eq" / "equivalence.csv").exists()


def test_berry_esseen_command(tmp_path):
    code = _run(tmp_path, "berry-esseen", "--samples", "2000", "--n", "10,100")
    assert code in (0, 1)
    rows = list(csv.reader(open(tmp_path / "out" / "berry_esseen.csv")))
    assert rows[0] == ["n", "delta_n", "noise_floor"] and len(rows) == 3
    assert (tmp_path / "out" / "berry_esseen.gp").read_text().startswith("# gnuplot")


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("GML_THREADS", "1")
    assert _run(tmp_path, "simulate", "--samples", "200") in (0, 1)


def test_threshold_verdict_noise_band():
    assert cli._threshold_verdict(0.01, 0.02, 0.005) == "Pass"
    assert cli._threshold_verdict(0.03, 0.02, 0.005) == "Inconclusive"
    assert cli._threshold_verdict(0.04, 0.02, 0.005) == "Fail"


def test_induced_d1_needs_sigma2(tmp_path):
    cfg = {"model": {"kind": "induced_doubling", "a": 0.3}, "observable": {"kind": "induced"},
           "run": {"n_list": [10], "samples": 200}}
    assert _run(tmp_path, "simulate", cfg=cfg) == 2
    cfg["target"] = {"variant": "D1", "sigma2": 1.0}
    assert _run(tmp_path, "simulate", cfg=cfg) in (0, 1)
