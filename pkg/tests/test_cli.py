import json
import subprocess
import sys

import pytest

from waas_sim.cli import main


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({
        "cloud": {"degradation": False},
        "workload": {"count": 3, "arrival_rate_per_min": 6, "size_classes": ["small"]},
    }))
    return path


def test_generate_then_run_from_file(tmp_path, capsys):
    wl = tmp_path / "w.jsonl"
    assert main(["generate", "--seed", "2", "--count", "3", "--sizes", "small", "--out", str(wl)]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"workload_file": "w.jsonl", "cloud": {"degradation": False}}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "workflows: 3" in capsys.readouterr().out


def test_run_with_flags(config, tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["run", "--config", str(config), "--seed", "4", "--replications", "2",
               "--policy", "ns", "--trace", "--out", str(out)])
    assert rc == 0
    assert {"workflows_seed4.csv", "workflows_seed5.csv", "trace_seed4.tsv", "platform.csv",
            "metrics.json", "report.txt"} <= {p.name for p in out.iterdir()}
    assert "policy: ns" in capsys.readouterr().out


def test_report_from_metrics(config, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", "--config", str(config), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out / "metrics.json"), "--out", str(tmp_path / "rep")]) == 0
    printed = capsys.readouterr().out
    assert printed == (tmp_path / "rep" / "report.txt").read_text() == (out / "report.txt").read_text()


def test_sweep(config, tmp_path):
    out = tmp_path / "sw"
    rc = main(["sweep", "--config", str(config), "--axis", "vm_delay_s", "--values", "45", "90", "--out", str(out)])
    assert rc == 0
    index = json.loads((out / "sweep.json").read_text())
    assert [p["dir"] for p in index["points"]] == ["vm_delay_s=45", "vm_delay_s=90"]


def test_sweep_without_axis_fails(config, tmp_path, capsys):
    assert main(["sweep", "--config", str(config), "--out", str(tmp_path)]) == 2
    assert "axis" in capsys.readouterr().err


def test_bad_policy_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["run", "--policy", "everything", "--out", str(tmp_path)])


def test_missing_metrics_reported(tmp_path, capsys):
    assert main(["report", str(tmp_path / "none.json")]) == 2
    assert "none.json" in capsys.readouterr().err


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "waas_sim", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for cmd in ("generate", "run", "sweep", "report"):
        assert cmd in done.stdout
