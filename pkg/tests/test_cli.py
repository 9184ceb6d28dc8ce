import json
import subprocess
import sys
from pathlib import Path

import pytest

from pyramem.cli import main

DATA = Path(__file__).parent / "data"


@pytest.fixture
def config(tmp_path):
    (tmp_path / "main.json").write_text(json.dumps({"rules": [
        {"role": "answer", "response": {"answer": "in May", "sufficient": True, "critical_ids": [0]}},
        {"role": "rewrite", "response": "May 2022"},
    ]}))
    (tmp_path / "aux.json").write_text(json.dumps({"rules": [
        {"role": "extract", "response": {"keywords": ["paris", "trip"]}},
        {"role": "select", "response": {"keywords": ["paris", "trip"]}},
        {"role": "match", "response": {"matches": {}}},
    ]}))
    cfg = tmp_path / "pyramem.ini"
    cfg.write_text(
        "[provider.main]\nkind = scripted\nscript = main.json\n\n"
        "[provider.aux]\nkind = scripted\nscript = aux.json\n\n"
        "[retrieval]\ndepth = 4\nmax_rounds = 4\n"
    )
    return cfg


@pytest.fixture
def bank(tmp_path, config, capsys):
    inp = tmp_path / "in.jsonl"
    inp.write_text(
        '{"question": "When did you visit Paris?", "answer": "In May.", "session": "s1"}\n'
        '{"question": "Who came on the trip?", "answer": "Anna."}\n'
    )
    path = tmp_path / "bank.json"
    assert main(["ingest", "--input", str(inp), "--bank", str(path), "--config", str(config)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["records_added"] == 2 and report["usage"]["calls"] == 2
    return path


def test_ingest_creates_snapshot(bank):
    doc = json.loads(bank.read_text())
    assert doc["vocabulary"] == ["paris", "trip"]
    assert doc["mapping"] == {"paris": [0, 1], "trip": [0, 1]}


def test_query_with_trace(tmp_path, bank, config, capsys):
    trace = tmp_path / "trace.json"
    code = main(["query", "--bank", str(bank), "--question", "When was Paris?",
                 "--config", str(config), "--trace", str(trace)])
    assert code == 0
    assert capsys.readouterr().out.strip() == "May 2022"
    doc = json.loads(trace.read_text())
    assert doc["stop_reason"] == "accepted" and doc["rounds"][0]["fresh_ids"] == [0, 1]


def test_inspect_with_explicit_keywords(bank, capsys):
    assert main(["inspect", "--bank", str(bank), "--query", "x", "--keywords", "paris,trip"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["traversal"] == [["paris", "trip"], ["paris"], ["trip"]]


def test_inspect_with_model_selection(bank, config, capsys):
    assert main(["inspect", "--bank", str(bank), "--query", "x", "--config", str(config)]) == 0
    assert json.loads(capsys.readouterr().out)["query_keywords"] == ["paris", "trip"]


def test_evaluate_and_cost_report(tmp_path, config, capsys):
    out = tmp_path / "run"
    code = main(["evaluate", "--dataset", str(DATA / "mini.jsonl"), "--format", "simple_jsonl",
                 "--config", str(config), "--out", str(out)])
    assert code == 0
    assert "weighted" in capsys.readouterr().out
    assert (out / "report.json").is_file() and (out / "report.txt").is_file()
    assert list((out / "banks").glob("bank-*.json"))
    assert main(["cost-report", "--run", str(out), "--json"]) == 0
    cost = json.loads(capsys.readouterr().out)
    assert cost["response"]["main_calls"] == 2.0 and cost["response"]["aux_calls"] == 1.0
    assert main(["cost-report", "--run", str(out / "report.json")]) == 0
    assert "Mem calls" in capsys.readouterr().out


def test_depth_override(bank, config, tmp_path, capsys):
    trace = tmp_path / "t.json"
    main(["query", "--bank", str(bank), "--question", "q", "--config", str(config),
          "--depth", "1", "--trace", str(trace)])
    assert json.loads(trace.read_text())["query_keywords"] == ["paris"]


def test_corrupt_bank_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format_version": 1')
    assert main(["inspect", "--bank", str(bad), "--query", "x", "--keywords", "a"]) == 2
    assert "error" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "pyramem", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("ingest", "query", "evaluate", "inspect", "cost-report"):
        assert cmd in out.stdout
