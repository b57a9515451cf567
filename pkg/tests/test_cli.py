import hashlib
import json
from pathlib import Path

import pytest

from cinetrack.cli import main


def tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


GEN_ARGS = ["--n-train", "4", "--n-test", "2", "--seed", "7", "--k-min", "4", "--k-max", "6"]


def test_generate_counts_and_determinism(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "d0")] + GEN_ARGS) == 0
    out = capsys.readouterr().out
    assert "4 train + 2 test" in out
    manifest = json.loads((tmp_path / "d0" / "manifest.json").read_text())
    assert len(manifest["train"]) == 4 and len(manifest["test"]) == 2

    assert main(["generate", "--out", str(tmp_path / "d1")] + GEN_ARGS) == 0
    assert tree_hash(tmp_path / "d0") == tree_hash(tmp_path / "d1")


def test_train_requires_dataset(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "run")])
    assert rc == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> train (1 epoch) -> predict for the CLI integration tests."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    data = root / "data"
    run = root / "run"
    assert main(["generate", "--out", str(data)] + GEN_ARGS) == 0
    assert main([
        "train", "--data", str(data), "--out", str(run),
        "--epochs", "1", "--seed", "3", "--batch-size", "2",
    ]) == 0
    ckpt = run / "checkpoints" / "epoch_0001.ckpt"
    assert ckpt.exists()
    preds = root / "preds"
    assert main([
        "predict", "--data", str(data), "--split", "test",
        "--checkpoint", str(ckpt), "--out", str(preds), "--with-cycle",
    ]) == 0
    return {"data": data, "run": run, "ckpt": ckpt, "preds": preds, "root": root}


def test_run_directory_layout_and_snapshot(pipeline):
    run = pipeline["run"]
    for sub in ("data", "checkpoints", "predictions", "reports", "logs"):
        assert (run / sub).is_dir()
    snapshot = json.loads((run / "config.json").read_text())
    assert snapshot["config"]["epochs"] == 1
    assert (run / "logs" / "train.jsonl").exists()


def test_snapshot_never_overwritten(pipeline):
    # retraining into the same run directory with a different config is refused
    rc = main([
        "train", "--data", str(pipeline["data"]), "--out", str(pipeline["run"]),
        "--epochs", "2", "--seed", "4", "--batch-size", "2",
    ])
    assert rc == 2


def test_predictions_schema(pipeline):
    files = sorted(pipeline["preds"].glob("*.json"))
    assert len(files) == 2
    doc = json.loads(files[0].read_text())
    assert doc["version"] == 1
    assert doc["frames"][0]["provenance"] == "detected"
    assert "cycle_residual_px" in doc


def test_eval_and_criteria_exit_codes(pipeline, capsys):
    out = pipeline["root"] / "report"
    assert main([
        "eval", "--data", str(pipeline["data"]), "--split", "test",
        "--pred", str(pipeline["preds"]), "--out", str(out),
    ]) == 0
    assert (out / "ed_table.csv").exists()
    assert (out / "es_table.csv").exists()
    assert (out / "ef_scatter.csv").exists()

    lax = pipeline["root"] / "lax.json"
    lax.write_text(json.dumps({"checks": [{"metric": "failure.threshold_cm", "max": 5.0}]}))
    assert main([
        "eval", "--data", str(pipeline["data"]), "--split", "test",
        "--pred", str(pipeline["preds"]), "--out", str(out), "--criteria", str(lax),
    ]) == 0

    strict = pipeline["root"] / "strict.json"
    strict.write_text(json.dumps({"checks": [{"metric": "ed.lde_al_px.median", "max": -1.0}]}))
    assert main([
        "eval", "--data", str(pipeline["data"]), "--split", "test",
        "--pred", str(pipeline["preds"]), "--out", str(out), "--criteria", str(strict),
    ]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_report_overlays(pipeline):
    out = pipeline["root"] / "full_report"
    assert main([
        "report", "--data", str(pipeline["data"]), "--split", "test",
        "--pred", str(pipeline["preds"]), "--out", str(out), "--max-overlays", "1",
    ]) == 0
    assert len(list((out / "overlays").glob("*.png"))) == 1


def test_sparsity_experiment_cli(pipeline):
    out = pipeline["root"] / "sparsity"
    assert main([
        "experiment", "--kind", "sparsity",
        "--checkpoint", str(pipeline["ckpt"]), "--data", str(pipeline["data"]),
        "--split", "test", "--out", str(out),
    ]) == 0
    assert (out / "sparsity.csv").exists()


@pytest.mark.slow
def test_experiment_cli_one_frame(tmp_path):
    rc = main([
        "experiment", "--kind", "one-frame", "--out", str(tmp_path),
        "--n-seeds", "1", "--n-train", "4", "--n-test", "2", "--epochs", "1",
    ])
    assert rc == 0
    assert (tmp_path / "one_frame" / "one_frame.csv").exists()
    assert (tmp_path / "one_frame" / "summary.json").exists()


def test_run_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("CINETRACK_RUN_ROOT", str(tmp_path / "runs"))
    assert main(["generate", "--out", "dx"] + GEN_ARGS) == 0
    assert (tmp_path / "runs" / "dx" / "manifest.json").exists()
