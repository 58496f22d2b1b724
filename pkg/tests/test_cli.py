import json
import subprocess
import sys

import pytest

from hiddenworld.cli import main
from hiddenworld.compiler import read_scenario


def test_validate_bundled(capsys):
    assert main(["validate", "coffee"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "PASS structure"


def test_validate_reports_failures(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(read_scenario("coffee").text.replace('center: "take(capsule_01, storage_cabinet)"',
                                                        'center: "grab(capsule_01, storage_cabinet)"'))
    assert main(["validate", str(bad)]) == 1
    captured = capsys.readouterr()
    assert "FAIL verb-normalization" in captured.out
    assert "verb 'grab' missing" in captured.err


def test_syntax_error_location(tmp_path, capsys):
    bad = tmp_path / "broken.yaml"
    bad.write_text(read_scenario("coffee").text.replace("start: coffee_area", "start: [coffee_area"))
    assert main(["validate", str(bad)]) == 1
    assert capsys.readouterr().err.startswith(f"{bad}:8:6: ")


def test_missing_scenario(capsys):
    assert main(["validate", "no_such_thing"]) == 1
    assert capsys.readouterr().err.startswith("hiddenworld: FileNotFoundError: ")


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "coffee", "--interface", "telepathy"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
    assert main(["run", "coffee", "--planner", "external"]) == 2
    assert "--planner-cmd" in capsys.readouterr().err


def test_compile_run_score(tmp_path, capsys):
    ds = tmp_path / "coffee.episode"
    assert main(["compile", "coffee", "--out", str(ds)]) == 0
    out = capsys.readouterr().out
    assert "3 tasks" in out and "coverage=1.00" in out
    assert (ds / "manifest.json").exists()

    log = tmp_path / "run.jsonl"
    assert main(["run", str(ds), "--planner", "heuristic", "--out", str(log)]) == 0
    assert capsys.readouterr().err.strip() == "3/3 task goals reached"

    card = tmp_path / "card.json"
    assert main(["score", str(ds), str(log), "--out", str(card)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert "episode\tcoffee\ttsr\t1.0000" in table
    assert json.loads(card.read_text())["episode_success"] is True

    # two logs add the per-position table
    assert main(["score", str(ds), str(log), str(log)]) == 0
    rows = [r for r in capsys.readouterr().out.splitlines() if r.startswith("position")]
    assert rows[0].startswith("position\t0\tn=2\t")


def test_run_to_stdout_with_memory_mode(capsys):
    assert main(["run", "juice", "--memory", "none", "--interface", "flow", "--seed", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    header = json.loads(lines[0])
    assert header["event"] == "run_start" and header["config"]["interface"] == "flow"
    assert header["config"]["memory"]["kind"] == "none"


def test_score_rejects_foreign_log(tmp_path, capsys):
    log = tmp_path / "juice.jsonl"
    assert main(["run", "juice", "--out", str(log)]) == 0
    capsys.readouterr()
    assert main(["score", "coffee", str(log)]) == 1
    assert "InitMismatch" in capsys.readouterr().err


def test_bootstrap_command(tmp_path, capsys):
    pairs = tmp_path / "pairs.txt"
    pairs.write_text("# baseline variant\n0.1 0.4\n0.2, 0.5\n0.3 0.5\n\n0.4 0.8\n")
    assert main(["bootstrap", str(pairs), "--resamples", "2000", "--seed", "1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n"] == 4 and doc["delta"] == pytest.approx(0.3)
    assert doc["ci_low"] > 0 and doc["p"] < 0.05
    js = tmp_path / "pairs.json"
    js.write_text("[[1, 2], [2, 3]]")
    assert main(["bootstrap", str(js), "--resamples", "100"]) == 0
    assert json.loads(capsys.readouterr().out)["delta"] == 1.0
    pairs.write_text("1 2 3\n")
    assert main(["bootstrap", str(pairs)]) == 1
    assert "expected two numbers" in capsys.readouterr().err


def test_external_planner_subprocess(tmp_path, capsys):
    log, transcript = tmp_path / "run.jsonl", tmp_path / "wire.txt"
    cmd = f"{sys.executable} -m hiddenworld client coffee --planner heuristic"
    assert main(["run", "coffee", "--planner", "external", "--planner-cmd", cmd, "--out", str(log),
                 "--transcript", str(transcript)]) == 0
    assert capsys.readouterr().err.strip() == "3/3 task goals reached"
    wire = transcript.read_text().splitlines()
    assert wire[0].startswith('> {"kind":"TASK_CONTEXT"') and "RUN_END" in wire[-1]


def test_serve_over_stdio_with_module_entry(tmp_path):
    # the server speaks on its stdout; a client process answers on the other end
    server = subprocess.Popen([sys.executable, "-m", "hiddenworld", "serve", "coffee", "--listen", "stdio",
                               "--out", str(tmp_path)], stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                              stderr=subprocess.PIPE)
    client = subprocess.Popen([sys.executable, "-m", "hiddenworld", "client", "coffee",
                               "--out", str(tmp_path / "end.json")],
                              stdin=server.stdout, stdout=server.stdin)
    server.stdout.close()
    server.stdin.close()
    assert client.wait(60) == 0
    assert server.wait(60) == 0
    assert "session 1: complete, tsr=1.0000" in server.stderr.read().decode()
    assert json.loads((tmp_path / "end.json").read_text())["tsr"] == 1.0
    assert (tmp_path / "session-001" / "transcript.txt").exists()
