import io
import json
import sys

import pytest

from alias_forge.cli import main
from alias_forge.graph import load
from alias_forge.tensor import Tensor3, forward, outputs_close

from conftest import FIXTURES, GOLDEN

FIXTURE = str(FIXTURES / "resnet20-like.json")


@pytest.fixture
def small_ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text("[ga]\ngenerations = 4\n[attack]\ntrain_count = 40\n")
    return str(p)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "nope")[0] == 1
    assert run(capsys, "gen", "--out", "x")[0] == 1
    assert run(capsys, "attack")[0] == 1


def test_validation_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"nodes": [{"id": 0}], "input_id": 0, "output_id": 0}')
    code, _, err = run(capsys, "trace", bad)
    assert code == 2 and "node 0" in err
    assert run(capsys, "trace", FIXTURE, "--config", tmp_path / "none.ini")[0] == 2


def test_gen_count_zero_writes_manifest_only(tmp_path, capsys):
    assert run(capsys, "gen", "--count", 0, "--out", tmp_path / "c")[0] == 0
    assert [p.name for p in (tmp_path / "c").iterdir()] == ["manifest.json"]


def test_gen_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "gen", "--count", 10, "--out", tmp_path / d, "--seed", 0)[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 11
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config_hash"] and manifest["models"][0]["nodes"] > 0


def test_trace_matches_golden(capsys):
    code, out, _ = run(capsys, "trace", FIXTURE)
    assert code == 0 and out == (GOLDEN / "resnet20-like.trace.csv").read_text()
    assert len(out.splitlines()) == 23


def test_obfuscate_outputs_and_warning_path(tmp_path, capsys, small_ini):
    code, out, _ = run(capsys, "obfuscate", FIXTURE, "--out", tmp_path / "o", "--budget", 0, "--config", small_ini, "-q")
    assert code == 3
    assert {p.name for p in (tmp_path / "o").iterdir()} == {"genome.json", "obfuscated.json", "run_log.csv", "summary.json"}
    assert "feasible False" in out


def test_obfuscated_model_is_forward_equivalent(tmp_path, capsys, small_ini):
    code, *_ = run(capsys, "gen", "--count", 1, "--out", tmp_path / "c", "--weights")
    model = tmp_path / "c" / "net00000.json"
    code, *_ = run(capsys, "obfuscate", model, "--out", tmp_path / "o", "--config", small_ini, "--budget", 1.0, "-q")
    assert code in (0, 3)
    a, b = load(model), load(tmp_path / "o" / "obfuscated.json")
    x = Tensor3(__import__("numpy").random.default_rng(0).standard_normal(a.shapes[a.input_id] if a.shapes else (3, 32, 32)))
    assert outputs_close(forward(a, x), forward(b, x))


def test_attack_pipe_and_truth(tmp_path, capsys, monkeypatch, small_ini):
    run(capsys, "gen", "--count", 30, "--out", tmp_path / "c")
    pred = tmp_path / "p.json"
    code, out, _ = run(capsys, "attack", "--train", "--corpus", tmp_path / "c", "--predictor", pred)
    assert code == 0 and json.loads(out)["train_graphs"] == 24
    victim = tmp_path / "c" / "net00003.json"
    _, csv_text, _ = run(capsys, "trace", victim, "--attack-facing")
    monkeypatch.setattr(sys, "stdin", io.StringIO(csv_text))
    code, out, _ = run(capsys, "attack", "--predict", "-", "--predictor", pred)
    assert code == 0 and len(json.loads(out)["predicted"]) == len(csv_text.splitlines()) - 1
    code, out, _ = run(capsys, "attack", "--predict", victim, "--predictor", pred, "--truth", victim)
    res = json.loads(out)
    assert res["ler_extracted_obfuscated"] <= 0.1 and res["ler_obfuscated_structure"] == 0


def test_attack_errors(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run(capsys, "attack", "--train", "--corpus", tmp_path / "empty", "--predictor", tmp_path / "p.json")[0] == 2
    assert run(capsys, "attack", "--predict", FIXTURE, "--predictor", tmp_path / "missing.json")[0] == 2


def test_eval_report_and_determinism(tmp_path, capsys, small_ini):
    run(capsys, "gen", "--count", 3, "--out", tmp_path / "c")
    for d in ("e1", "e2"):
        code, out, _ = run(capsys, "eval", "--corpus", tmp_path / "c", "--config", small_ini, "--out", tmp_path / d)
        assert code in (0, 3)
    a = (tmp_path / "e1" / "report.json").read_bytes()
    assert a == (tmp_path / "e2" / "report.json").read_bytes()
    doc = json.loads(a)
    assert len(doc["models"]) == 3 and "median" in out and doc["config_hash"] in out
    code, out, _ = run(capsys, "report", tmp_path / "e1" / "report.json", "--format", "csv")
    assert code == 0 and len(out.splitlines()) == 5


def test_report_on_run_log(tmp_path, capsys, small_ini):
    run(capsys, "obfuscate", FIXTURE, "--out", tmp_path / "o", "--config", small_ini, "-q")
    code, out, _ = run(capsys, "report", tmp_path / "o" / "run_log.csv")
    assert code == 0 and len(out.splitlines()) == 5


def test_eval_fixture_matches_golden(tmp_path, capsys):
    code, out, _ = run(capsys, "eval", FIXTURE, "--out", tmp_path / "e")
    assert code == 3  # the fixture has no feasible candidate at B=0.2 under defaults
    assert (tmp_path / "e" / "report.json").read_text() == (GOLDEN / "resnet20-like.eval.json").read_text()
