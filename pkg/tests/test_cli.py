import csv
import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from dqlambda.cli import OUT_ENV, main

SMALL = ["--states", "3", "--actions", "3", "--k-max", "4", "--oracle", "dp", "--refine", "1"]


def _rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.reader(lines))


def test_gen_mdp_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen-mdp", "--seed", "4", "--file", str(a)]) == 0
    assert main(["gen-mdp", "--seed", "4", "--file", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert len(doc["reward"]) == 5 and len(doc["reward"][0]) == 20


def test_gen_mdp_default_name_uses_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert main(["gen-mdp", "--seed", "2"]) == 0
    assert (tmp_path / "env" / "mdp_seed2.json").exists()


def test_sweep_outputs(tmp_path):
    code = main(["sweep", *SMALL, "--seeds", "0,1", "--variants", "one-step,retrace,qlambda",
                 "--cbar", "1", "--lambdas", "0.2,0.8", "--out", str(tmp_path)])
    assert code == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert rows[0][:3] == ["variant", "hyperparam", "seed"]
    # 2 seeds x 4 variants x 4 iterations
    assert len(rows) == 1 + 2 * 4 * 4
    assert (tmp_path / "sweep.csv").read_text().startswith("# dqlambda sweep csv v1")
    ET.parse(tmp_path / "sweep.svg")
    summary = json.loads((tmp_path / "sweep_summary.json").read_text())
    assert summary["cells"] == 8 and summary["failed_cells"] == []


def test_sweep_deterministic(tmp_path):
    args = ["sweep", *SMALL, "--seeds", "3", "--variants", "qlambda", "--lambdas", "0.5",
            "--oracle", "mc", "--oracle-traj", "40"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


@pytest.mark.parametrize("extra", [["--seeds", ""], ["--lambdas", ""], ["--variants", "nope"],
                                   ["--lambdas", "a,b"], ["--bogus"]])
def test_sweep_usage_errors(tmp_path, extra):
    assert main(["sweep", *SMALL, "--variants", "qlambda", "--out", str(tmp_path), *extra]) == 1


def test_uncovered_grid_is_runtime_error(tmp_path, capsys):
    code = main(["sweep", *SMALL, "--seeds", "0", "--variants", "one-step", "--v-min", "0", "--v-max", "0.1",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "does not cover" in capsys.readouterr().err
    with pytest.warns(UserWarning, match="clipped"):
        assert main(["sweep", *SMALL, "--seeds", "0", "--variants", "one-step", "--v-min", "0", "--v-max", "0.1",
                     "--allow-uncovered", "--out", str(tmp_path)]) == 0


def test_spec_file_and_override(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"seeds": [0], "variants": ["qlambda"], "lambdas": [0.3, 0.6], "k_max": 3,
                                "states": 3, "actions": 2, "oracle": "dp", "refine": 1}))
    assert main(["sweep", "--spec", str(spec), "--k-max", "2", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert len(rows) == 1 + 2 * 2
    spec.write_text(json.dumps({"unknown_key": 1}))
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path)]) == 1


def test_figure1(tmp_path):
    code = main(["figure1", "--m", "11", "--k-max", "6", "--panels", "0,1,6", "--out", str(tmp_path)])
    assert code == 0
    rows = _rows(tmp_path / "figure1.csv")
    assert len(rows) == 1 + 7 * 11
    root = ET.parse(tmp_path / "figure1.svg").getroot()
    assert root.tag.endswith("svg")


def test_analyze_closed_form(capsys):
    assert main(["analyze", "--gamma", "0.9", "--lambda", "0.5", "--epsilon", "0.2"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["beta_1"] == pytest.approx(0.98181818, abs=1e-8)
    assert doc["contractive_l1"] is True


def test_analyze_domain_error(capsys):
    assert main(["analyze", "--gamma", "0.9", "--lambda", "1.0", "--epsilon", "0.2"]) == 2
    assert "error" in capsys.readouterr().err


def test_analyze_mdp(tmp_path, capsys):
    path = tmp_path / "m.json"
    main(["gen-mdp", "--states", "3", "--actions", "2", "--file", str(path)])
    capsys.readouterr()
    assert main(["analyze", "--mdp", str(path), "--lambda", "0.3", "--pi", "mix:0.1", "--empirical", "3",
                 "--m", "7"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert "empirical_beta_2" in doc


def test_analyze_missing_inputs():
    assert main(["analyze", "--lambda", "0.5"]) == 1


def test_learn(tmp_path):
    assert main(["learn", "--states", "3", "--steps", "200", "--m", "7", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "learn.csv")
    assert rows[0][0] == "step"
    assert json.loads((tmp_path / "params.json").read_text())["atoms"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dqlambda", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "dqlambda" in res.stdout
