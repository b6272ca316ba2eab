import json
import subprocess
import sys
from pathlib import Path

import pytest

from gentrimil import cli

FIX = Path(__file__).parent / "fixtures"

SMALL = {
    "synth": {"n_tracts": 8, "K": 10, "rho_gentrifying": 0.3, "rho_non": 0.1, "n_step1": 40, "image_side": 16},
    "encoder": {"d": 4, "depth": 2, "base_channels": 2, "image_side": 16, "epochs": 2},
    "mil": {"W": 4, "epochs": 3},
}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def test_eval_without_step2_names_the_producer(tmp_path, cfg, capsys):
    assert run("eval", "--config", cfg, "--work-dir", tmp_path / "w") == 1
    assert "run train-step2 first" in capsys.readouterr().err


def test_missing_inputs_are_validation_errors(tmp_path, cfg, capsys):
    assert run("ingest", "--config", cfg, "--work-dir", tmp_path / "w") == 1
    assert "paths.permits" in capsys.readouterr().err
    assert run("embed", "--config", cfg, "--work-dir", tmp_path / "w") == 1
    assert "run train-step1 first" in capsys.readouterr().err
    assert run("synth", "--config", tmp_path / "nope.json") == 1
    assert run("fetch", "--config", cfg, "--work-dir", tmp_path / "w") == 1


def test_runtime_failure_exit_code(tmp_path, cfg, monkeypatch):
    def boom(ws, args):
        raise RuntimeError("disk on fire")
    monkeypatch.setitem(cli.STAGES, "synth", boom)
    assert run("synth", "--config", cfg, "--work-dir", tmp_path / "w") == 2


def test_pipeline_end_to_end(tmp_path, cfg, capsys):
    w = tmp_path / "w"
    for stage in ("synth", "train-step1", "embed", "train-step2"):
        assert run(stage, "--config", cfg, "--work-dir", w) == 0, stage
    for mode in ("mean_pool", "pretrained_mean_pool", "e2e"):
        assert run("train-step2", "--config", cfg, "--work-dir", w, "--mode", mode) == 0, mode
    capsys.readouterr()
    assert run("eval", "--config", cfg, "--work-dir", w, "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert [r["model"] for r in report["metrics"]] == ["full", "mean_pool", "pretrained_mean_pool", "e2e"]
    assert "Balanced Acc." in (w / "eval" / "table.txt").read_text()
    assert run("analyze", "--config", cfg, "--work-dir", w) == 0
    assert run("map", "--config", cfg, "--work-dir", w) == 0
    fc = json.loads((w / "map" / "discrepancy.geojson").read_text())
    assert len(fc["features"]) == 8
    for name in ("curves.csv", "curves.png", "summary.json", "extremes.json", "attention.csv"):
        assert (w / "analyze" / name).exists()
    # re-running a stage reuses the embedding cache
    capsys.readouterr()
    assert run("embed", "--config", cfg, "--work-dir", w, "--json") == 0
    assert json.loads(capsys.readouterr().out)["recomputed"] is False


def test_ingest_stage(tmp_path, cfg, capsys):
    w = tmp_path / "w"
    assert run("synth", "--config", cfg, "--work-dir", w) == 0
    data = w / "data"
    conf = {**SMALL, "paths": {"permits": str(FIX / "permits.csv"), "businesses": str(FIX / "businesses.csv"),
                               "archive": str(data / "archive.jsonl"), "tracts": str(data / "tracts.geojson"),
                               "labels": str(data / "labels.csv")},
            "ingest": {"k_min": 5}}
    (tmp_path / "ing.json").write_text(json.dumps(conf))
    capsys.readouterr()
    assert run("ingest", "--config", tmp_path / "ing.json", "--work-dir", tmp_path / "w2", "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["events"] == 7 and report["weak_pairs"] == 0 and report["skipped_events"] == 7
    assert report["containers"] == 8 and report["excluded_tracts"] == []


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "gentrimil", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for stage in cli.STAGES:
        assert stage in out.stdout
