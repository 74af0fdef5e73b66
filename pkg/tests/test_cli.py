import json
import subprocess
import sys

import pytest

from edge_offload.cli import EXIT_CONFIG, EXIT_OK, _phase_labels, main

TINY = {"phases": [{"rf": 2, "duration_s": 4}, {"rf": 5, "duration_s": 4}, {"rf": 1, "duration_s": 4}]}


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(TINY))
    return path


def test_run_writes_artifacts(tmp_path, scenario, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(scenario), "--out", str(out), "--strategy", "pod_level"]) == EXIT_OK
    for name in ("report.json", "outcomes.csv", "metrics.csv", "mapek_events.jsonl"):
        assert (out / name).stat().st_size > 0
    report = json.loads((out / "report.json").read_text())
    assert report["total_tasks"] == 19 * (2 + 5 + 1) * 4
    assert "PodLevel" in capsys.readouterr().out


def test_run_is_byte_identical(tmp_path, scenario):
    for d in ("a", "b"):
        assert main(["run", "--config", str(scenario), "--out", str(tmp_path / d), "--seed", "9"]) == EXIT_OK
    for name in ("report.json", "outcomes.csv", "metrics.csv", "mapek_events.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_weights_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"weights": {"w1": 0, "w2": 0, "w3": 0}}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "weights" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_unknown_strategy_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--strategy", "fastest"])
    assert exc.value.code == 2


def test_compare_needs_two_strategies(scenario):
    with pytest.raises(SystemExit) as exc:
        main(["compare", "--config", str(scenario), "--strategy", "pod_level"])
    assert exc.value.code == 2


def test_compare_identical_strategies_give_identical_rows(tmp_path, scenario, capsys):
    args = ["compare", "--config", str(scenario), "--out", str(tmp_path), "--strategy", "pod_level", "--strategy", "pod_level"]
    assert main(args) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["Strategy", "Avg", "RT", "(ms)", "99th%", "(ms)", "Energy", "(mJ)", "Drops"]
    assert lines[2] == lines[3]
    assert "avg RT +0.0%" in lines[4] and "drops +0" in lines[4]
    assert (tmp_path / "0_pod_level" / "report.json").is_file()
    assert (tmp_path / "1_pod_level" / "report.json").is_file()


def test_compare_default_pair(tmp_path, scenario, capsys):
    assert main(["compare", "--config", str(scenario), "--out", str(tmp_path)]) == EXIT_OK
    rows = capsys.readouterr().out.splitlines()
    assert rows[2].startswith("StaticSplit") and rows[3].startswith("PodLevel")


def test_report_sections(tmp_path, scenario, capsys):
    out = tmp_path / "run"
    main(["run", "--config", str(scenario), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.count("\nphase ") == 3
    assert "phase 2 (peak, rf=5, 95 req/s)" in text
    assert "phase 3 (low, rf=1, 19 req/s)" in text
    assert "category small" in text and "category medium" in text
    assert "drops: " in text


def test_report_missing_artifacts(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_CONFIG
    assert "missing" in capsys.readouterr().err


def test_phase_labels():
    assert _phase_labels([2, 5, 1]) == ["moderate", "peak", "low"]
    assert _phase_labels([3, 3]) == ["moderate", "moderate"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "edge_offload", "report", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
