import json
import os
import subprocess
import sys

import pytest

from lambdatree.cli import main


def run(*argv):
    return main([str(a) for a in argv])


class TestClassify:
    def test_kingman(self, capsys):
        assert run("classify", "--measure", "kingman", "--bmax", 2000) == 0
        assert "ComesDownFromInfinity" in capsys.readouterr().out

    def test_json(self, capsys):
        assert run("classify", "--measure", "bolthausen-sznitman", "--format", "json") == 0
        assert json.loads(capsys.readouterr().out)["combined"] == "DustFreeStaysInfinite"

    def test_atom_at_one_is_validation_error(self, capsys):
        assert run("classify", "--measure", "atom:1.0,0.3") == 2
        assert "validation error" in capsys.readouterr().err

    def test_usage_errors(self, capsys):
        assert run("classify") == 1
        assert run("bogus") == 1
        assert run("simulate", "--measure", "bs", "--n", "x") == 1

    def test_to_directory(self, tmp_path):
        target = tmp_path / "deep" / "k"
        assert run("classify", "--measure", "kingman", "--out", target) == 0
        assert "class: ComesDownFromInfinity" in (target / "classification.txt").read_text()
        manifest = json.loads((target / "manifest.json").read_text())
        assert manifest["command"] == "classify" and manifest["config"]["measure"] == "kingman"


class TestSimulate:
    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert run("simulate", "--measure", "bs", "--n", 50, "--seed", 3,
                       "--out", tmp_path / d) == 0
        assert (tmp_path / "a" / "history.json").read_bytes() == \
            (tmp_path / "b" / "history.json").read_bytes()
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert ma["outputs"].keys() == {"history.json"} and ma["seed"] == 3

    def test_single_leaf(self, tmp_path):
        assert run("simulate", "--measure", "kingman", "--n", 1, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "history.json").read_text())["events"] == []

    def test_poisson_atom_at_zero_noted(self, tmp_path):
        assert run("simulate", "--measure", "0.5*kingman + uniform:0.2,1", "--n", 10,
                   "--scheme", "poisson", "--out", tmp_path) == 0
        cfg = json.loads((tmp_path / "manifest.json").read_text())["config"]
        assert cfg["resolved_scheme"] == "poisson"
        assert cfg["scheme_metadata"]["kingman_superposition"] is True

    def test_replicates(self, tmp_path):
        assert run("simulate", "--measure", "bs", "--n", 5, "--replicates", 3,
                   "--out", tmp_path) == 0
        assert sorted(p.name for p in tmp_path.glob("history_*.json")) == \
            ["history_00000.json", "history_00001.json", "history_00002.json"]

    def test_stdout(self, capsys):
        assert run("simulate", "--measure", "bs", "--n", 4) == 0
        assert json.loads(capsys.readouterr().out)["n"] == 4

    def test_config_precedence(self, tmp_path, capsys):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"measure": "kingman", "n": 7, "seed": 11}))
        assert run("simulate", "--config", conf, "--seed", 12) == 0
        data = json.loads(capsys.readouterr().out)
        assert (data["n"], data["seed"]) == (7, 12)
        conf.write_text(json.dumps({"colour": "red"}))
        assert run("simulate", "--config", conf) == 1

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable(self, tmp_path):
        locked = tmp_path / "locked"
        locked.mkdir()
        locked.chmod(0o500)
        try:
            assert run("simulate", "--measure", "bs", "--n", 5, "--out", locked / "x") == 2
        finally:
            locked.chmod(0o700)

    def test_output_path_is_a_file(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run("simulate", "--measure", "bs", "--n", 5, "--out", blocker / "sub") == 2
        assert "cannot write output" in capsys.readouterr().err


class TestAnalyze:
    def test_from_history(self, tmp_path):
        assert run("simulate", "--measure", "bs", "--n", 30, "--seed", 1, "--out", tmp_path / "s") == 0
        assert run("analyze", "--history", tmp_path / "s" / "history.json", "--matrix",
                   "--out", tmp_path / "a") == 0
        data = json.loads((tmp_path / "a" / "functionals.json").read_text())
        assert data["n"] == 30 and not data["censored"]
        names = {r["functional"] for r in data["functionals"]}
        assert names == {"xi", "v_delta", "v_tilde_delta"}
        lines = (tmp_path / "a" / "distances.csv").read_text().splitlines()
        assert lines[0] == "i,j,point_i,point_j,r" and len(lines) == 1 + 30 * 29 // 2

    def test_censored_csv(self, capsys):
        assert run("analyze", "--measure", "kingman", "--n", 40, "--horizon", 0.01,
                   "--format", "csv") == 0
        assert capsys.readouterr().out.startswith("functional,parameter,value")


class TestReportAndReproduce:
    ARGS = ("--n", "20,40", "--replicates", 6, "--seed", 5, "--delta-grid", "0.4")

    def test_report_and_reproduce(self, tmp_path, capsys):
        out = tmp_path / "rep"
        code = run("report", "--measure", "kingman", *self.ARGS, "--out", out)
        assert code in (0, 4)
        assert {p.name for p in out.iterdir()} == {"report.json", "report.csv", "manifest.json"}
        capsys.readouterr()
        assert run("reproduce", out / "manifest.json", "--out", tmp_path / "again") == 0
        assert capsys.readouterr().out.count("identical") == 2

    def test_report_requires_out(self):
        assert run("report", "--measure", "kingman", *self.ARGS) == 1

    def test_reproduce_detects_tampering(self, tmp_path, capsys):
        assert run("simulate", "--measure", "bs", "--n", 9, "--out", tmp_path / "s") == 0
        mf = tmp_path / "s" / "manifest.json"
        data = json.loads(mf.read_text())
        data["outputs"]["history.json"] = "0" * 64
        mf.write_text(json.dumps(data))
        assert run("reproduce", mf) == 3
        assert "DIFFERENT  history.json" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lambdatree", "classify", "--measure", "power:1",
                           "--bmax", "1000"], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0 and "HasDust" in proc.stdout


@pytest.mark.parametrize("spec,verdict", [("kingman", "consistent-with-compact"),
                                          ("bolthausen-sznitman", "consistent-with-not-locally-compact")])
def test_default_report_verdicts(spec, verdict, tmp_path, capsys):
    assert run("report", "--measure", spec, "--out", tmp_path) == 0
    assert verdict in capsys.readouterr().out
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["verdict"] == verdict and data["consistent"]
