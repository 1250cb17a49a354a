import json
import subprocess
import sys

import pytest

from diffin.cli import main
from diffin.dataset import make_synthetic, write_csv


def _config(tmp_path, noise=None, **over):
    cfg = {
        "schema_version": 1,
        "seed": 0,
        "output_dir": "run",
        "dataset": {
            "source": "synthetic",
            "kind": "two_gaussians",
            "n": 100,
            "noise_sd": 0.8,
            "seed": 1,
            "split": {"train": 0.5, "val": 0.25, "test": 0.25, "seed": 2},
        },
        "model": {"architecture": "mlp", "hidden_sizes": [8]},
        "optimizer": {"kind": "sgd", "lr": 0.2},
        "trainer": {"T": 60, "batch_size": 10, "m": 3},
    }
    if noise is not None:
        cfg["dataset"]["noise"] = {"rate": noise, "seed": 3}
    for k, v in over.items():
        cfg[k] = v
    p = tmp_path / "run.json"
    p.write_text(json.dumps(cfg))
    return p


def _run(*argv):
    return main([str(a) for a in argv])


def _events(err, name):
    return [json.loads(line) for line in err.splitlines() if line.startswith("{") and f'"{name}"' in line]


def test_train_writes_trace_and_is_deterministic(tmp_path):
    cfg = _config(tmp_path)
    assert _run("train", "--config", cfg) == 0
    trace = json.loads((tmp_path / "run" / "trace" / "trace.json").read_text())
    assert _run("train", "--config", cfg, "--out", tmp_path / "again") == 0
    again = json.loads((tmp_path / "again" / "trace" / "trace.json").read_text())
    assert trace["trace_hash"] == again["trace_hash"]


def test_console_script_entry_point(tmp_path):
    cfg = _config(tmp_path)
    r = subprocess.run([sys.executable, "-m", "diffin.cli", "train", "--config", str(cfg)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    events = [json.loads(line)["event"] for line in r.stderr.splitlines() if line.startswith("{")]
    assert "train_done" in events and "train_step" in events


def test_missing_dataset_file_names_path(tmp_path, capsys):
    cfg = _config(tmp_path, dataset={"source": "csv", "path": "nope.csv", "split": {"seed": 0}})
    assert _run("train", "--config", cfg) == 2
    assert "nope.csv" in capsys.readouterr().err


def test_csv_dataset_relative_path(tmp_path):
    write_csv(make_synthetic("two_moons", 60, 0.1, 0), tmp_path / "data.csv")
    cfg = _config(tmp_path, dataset={"source": "csv", "path": "data.csv", "split": {"seed": 0}})
    assert _run("train", "--config", cfg) == 0


def test_invalid_config_is_input_error(tmp_path):
    p = _config(tmp_path)
    raw = json.loads(p.read_text())
    raw["schema_version"] = 2
    p.write_text(json.dumps(raw))
    assert _run("train", "--config", p) == 2
    raw["schema_version"] = 1
    raw["influence"] = {"estimators": ["nonsense"]}
    p.write_text(json.dumps(raw))
    assert _run("train", "--config", p) == 2


def test_score_needs_trace(tmp_path):
    assert _run("score", "--config", _config(tmp_path)) == 4


def test_scoring_paths(tmp_path):
    cfg = _config(tmp_path)
    assert _run("train", "--config", cfg) == 0
    assert _run("score", "--config", cfg, "--estimator", "tracin", "--target", "parameters") == 3
    assert _run("score", "--config", cfg, "--estimator", "diffin_f", "--workers", "1") == 0
    lines = (tmp_path / "run" / "scores" / "diffin_f_validation_loss.csv").read_text().splitlines()
    assert lines[0] == "sample_index,estimator,target,score" and len(lines) == 51
    assert _run("score", "--config", cfg, "--workers", "1") == 0
    one = (tmp_path / "run" / "scores" / "diffin_validation_loss.csv").read_bytes()
    assert _run("score", "--config", cfg, "--workers", "2") == 0
    assert (tmp_path / "run" / "scores" / "diffin_validation_loss.csv").read_bytes() == one
    assert _run("score", "--config", cfg, "--target", "parameters", "--workers", "1") == 0
    assert (tmp_path / "run" / "scores" / "diffin_parameters.bin").exists()


def test_oracle_modes_and_cache(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert _run("train", "--config", cfg) == 0
    assert _run("oracle", "--config", cfg, "--mode", "loo_sample", "--k", "0") == 2
    assert _run("oracle", "--config", cfg, "--mode", "loo_all", "--workers", "1") == 0
    assert len(list((tmp_path / "run" / "oracle").glob("loo_*.json"))) == 50
    capsys.readouterr()
    assert _run("oracle", "--config", cfg, "--mode", "loo_all", "--workers", "1") == 0
    done = _events(capsys.readouterr().err, "oracle_done")
    assert done[-1]["retrained"] == 0 and done[-1]["cached"] == 50


def test_reports(tmp_path):
    cfg = _config(tmp_path, task={"oracle": {"group_count": 5, "group_size": 5}})
    assert _run("train", "--config", cfg) == 0
    assert _run("report", "--config", cfg, "--task", "clean") == 4
    assert _run("score", "--config", cfg, "--workers", "1") == 0
    assert _run("report", "--config", cfg, "--task", "correlation") == 4
    assert _run("oracle", "--config", cfg, "--workers", "1") == 0
    assert _run("oracle", "--config", cfg, "--mode", "groups", "--workers", "1") == 0
    assert _run("report", "--config", cfg, "--task", "correlation") == 0
    rep = json.loads((tmp_path / "run" / "reports" / "correlation_diffin.json").read_text())
    assert {"pearson", "spearman", "lds"} <= set(rep)
    assert _run("score", "--config", cfg, "--target", "training_loss", "--workers", "1") == 0
    assert _run("report", "--config", cfg, "--task", "coreset", "--ratio", "0.3") == 0
    cs = json.loads((tmp_path / "run" / "reports" / "coreset_diffin.json").read_text())
    assert cs["size"] == 15 and 0.0 <= cs["accuracy"] <= 100.0
    assert _run("report", "--config", cfg, "--task", "coreset", "--estimator", "random") == 0


def test_clean_and_delete_reports(tmp_path):
    cfg = _config(tmp_path, noise=0.2)
    assert _run("train", "--config", cfg) == 0
    assert (tmp_path / "run" / "noise_mask.json").exists()
    assert _run("score", "--config", cfg, "--estimator", "tracin", "--target", "self_loss", "--workers", "1") == 0
    assert _run("report", "--config", cfg, "--task", "clean", "--estimator", "tracin", "--target", "self_loss") == 0
    rep = json.loads((tmp_path / "run" / "reports" / "clean_tracin_self_loss.json").read_text())
    assert [r["rate"] for r in rep["rows"]] == [20.0, 30.0, 40.0]
    assert _run("report", "--config", cfg, "--task", "delete") == 4
    assert _run("score", "--config", cfg, "--target", "parameters", "--workers", "1") == 0
    assert _run("report", "--config", cfg, "--task", "delete") == 0
    d = json.loads((tmp_path / "run" / "reports" / "delete_diffin.json").read_text())
    assert d["removed"] == 10


def test_seed_override_env(tmp_path, monkeypatch, capsys):
    cfg = _config(tmp_path)
    monkeypatch.setenv("DIFFIN_SEED", "7")
    assert _run("train", "--config", cfg) == 0
    assert _events(capsys.readouterr().err, "seed_override")[0]["seed"] == 7


def test_bad_workers_flag(tmp_path):
    assert _run("train", "--config", _config(tmp_path), "--workers", "0") == 2
    with pytest.raises(SystemExit):
        main(["score", "--config", "x", "--estimator", "bogus"])
