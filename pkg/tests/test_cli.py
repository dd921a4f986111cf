import json
import subprocess
import sys

import pytest

import eventlogic.cli as cli
from eventlogic.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, main
from eventlogic.gradcheck import SuiteResult
from eventlogic.numeric import GradCheckReport

TINY = ["--k", "3", "--n", "6", "--n-eval", "4", "--epochs", "1"]


def error_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), *TINY]) == EXIT_OK
    return out


def test_train_artifacts(trained):
    for name in ("run.json", "metrics.csv", "model.json", "summary.json"):
        assert (trained / name).is_file()
    run = json.loads((trained / "run.json").read_text())
    assert run["command"] == "train"
    assert run["resolved"]["world"]["k"] == 3 and run["resolved"]["train"]["epochs"] == 1
    assert (trained / "metrics.csv").read_text().startswith("step,loss_total")


def test_train_is_byte_reproducible(trained, tmp_path):
    assert main(["train", "--out", str(tmp_path), *TINY]) == EXIT_OK
    for name in ("metrics.csv", "model.json", "summary.json"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_eval_and_intervene(trained, tmp_path):
    args = ["--checkpoint", str(trained / "model.json"), *TINY]
    assert main(["eval", "--out", str(tmp_path / "a"), *args]) == EXIT_OK
    assert main(["eval", "--out", str(tmp_path / "b"), *args]) == EXIT_OK
    assert (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()
    assert len((tmp_path / "a" / "eval.csv").read_text().splitlines()) == 5
    assert (tmp_path / "a" / "tiers.csv").is_file()
    assert main(["intervene", "--out", str(tmp_path / "c"), *args]) == EXIT_OK
    lines = (tmp_path / "c" / "interventions.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["semantic_flip", "time_reversal", "structural_shuffle"]


def test_gen_round_trip(tmp_path):
    out = tmp_path / "corpus.jsonl"
    assert main(["gen", "--out", str(out), "--k", "3", "--n", "3", "--seed", "4"]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 3
    assert json.loads((tmp_path / "run.json").read_text())["resolved"]["seed"] == 4


def test_eval_on_generated_corpus(trained, tmp_path):
    corpus = tmp_path / "c.jsonl"
    main(["gen", "--out", str(corpus), "--k", "3", "--n", "3"])
    assert main(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(trained / "model.json"),
                 "--corpus", str(corpus)]) == EXIT_OK


def test_width_mismatch_is_config_error(trained, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"world": {"d": 20}, "model": {"d": 20}}))
    corpus = tmp_path / "wide.jsonl"
    assert main(["gen", "--out", str(corpus), "--config", str(cfg), "--n", "2"]) == EXIT_OK
    code = main(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(trained / "model.json"),
                 "--corpus", str(corpus)])
    assert code == EXIT_CONFIG
    err = error_line(capsys)
    assert err["error"] == "config" and "d=16" in err["message"]
    assert not (tmp_path / "e" / "eval.csv").exists()


def test_sweep(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--axis", "alpha", "--grid", "0.1", *TINY]) == EXIT_OK
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("axis,value,status,metric") and rows[1].startswith("alpha,0.1,ok")


def test_influence(tmp_path):
    assert main(["influence", "--out", str(tmp_path), "--probes", "3", "--k", "3", "--n", "8"]) == EXIT_OK
    assert len((tmp_path / "influence.csv").read_text().splitlines()) == 4


@pytest.mark.parametrize("argv", [["fly"], ["sweep", "--out", "x", "--axis", "alpha", "--grid", "a,b"],
                                  ["train"], ["eval", "--out", "x"], ["influence", "--out", "x", "--eta", "0"]])
def test_usage_errors(argv, capsys, tmp_path):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert main(argv) == EXIT_USAGE
    assert error_line(capsys)["exit"] == EXIT_USAGE


def test_missing_config(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert error_line(capsys)["error"] == "config"


def test_bad_config_field(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"world": {"kk": 3}}))
    assert main(["train", "--out", str(tmp_path), "--config", str(cfg)]) == EXIT_CONFIG


def test_missing_checkpoint(tmp_path):
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.json")]) == EXIT_CONFIG


def test_gradcheck_ok(capsys):
    assert main(["gradcheck", "--instances", "1"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["ok"] is True


def test_gradcheck_failure_exit(monkeypatch, capsys):
    bad = GradCheckReport(max_rel_error=1.0, n_checked=1, worst=("w", 0))
    monkeypatch.setattr(cli, "gradient_suite", lambda *a, **k: SuiteResult({("semantic", 0): bad}, 0.0))
    assert main(["gradcheck"]) == EXIT_CHECK
    out = capsys.readouterr()
    assert json.loads(out.out)["failures"] == ["semantic#0"]
    assert json.loads(out.err)["exit"] == EXIT_CHECK


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "eventlogic", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "0.1.0"
