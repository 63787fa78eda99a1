import json
import os

import pytest
from click.testing import CliRunner

from conftest import tiny_model_config
from vocseg_main import _jobs, cli
from vocseg_model import VocSegModel


def _pipeline(root) -> dict:
    """generate-data -> train -> eval under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    runner = CliRunner()
    data = str(root / "data")
    generated = runner.invoke(cli, ["generate-data", "--speakers", "3", "--frames-per-speaker", "4",
                                    "--augment", "0", "--seed", "5", "--out", data, "--jobs", "1"])
    config = root / "tiny.json"
    config.write_text(json.dumps({
        "model": tiny_model_config().model_dump(mode="json"),
        "train": {"batch_size": 4, "learning_rate": 1e-3, "patience": 2},
    }))
    run_dir = str(root / "fold0")
    trained = runner.invoke(cli, ["train", "--data", data, "--config", str(config), "--out", run_dir,
                                  "--held-out", "0", "--epochs", "1"])
    eval_dir = str(root / "eval")
    evaluated = runner.invoke(cli, ["eval", "--checkpoint", os.path.join(run_dir, "checkpoint.json"),
                                    "--data", data, "--held-out", "0", "--out", eval_dir, "--jobs", "1"])
    return {"root": root, "data": data, "config": str(config), "run_dir": run_dir, "eval_dir": eval_dir,
            "results": {"generate": generated, "train": trained, "eval": evaluated}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("cli"))


def test_generate_data(workspace):
    result = workspace["results"]["generate"]
    assert result.exit_code == 0, result.output
    assert "[OK] 12 samples" in result.output
    assert os.path.exists(os.path.join(workspace["data"], "manifest.json"))


def test_train_writes_run_directory(workspace):
    result = workspace["results"]["train"]
    assert result.exit_code == 0, result.output
    assert "best validation Dice" in result.output
    for name in ("checkpoint.json", "checkpoint.vstn", "train.log.csv", "resolved_config.json"):
        assert os.path.exists(os.path.join(workspace["run_dir"], name))


def test_eval_writes_masks(workspace):
    result = workspace["results"]["eval"]
    assert result.exit_code == 0, result.output
    assert "[OK] 4 frames" in result.output
    predictions = sorted(os.listdir(os.path.join(workspace["eval_dir"], "predictions")))
    assert "s00_f0000.vstn" in predictions


def test_metrics_on_eval_output(workspace, tmp_path):
    eval_dir = workspace["eval_dir"]
    result = CliRunner().invoke(cli, ["metrics", "--pred", os.path.join(eval_dir, "predictions"),
                                      "--truth", os.path.join(eval_dir, "truth"), "--out", str(tmp_path),
                                      "--jobs", "1"])
    assert result.exit_code == 0, result.output
    assert "[OK] 4 frames" in result.output


def test_metrics_truth_against_itself(workspace, tmp_path):
    truth = os.path.join(workspace["eval_dir"], "truth")
    result = CliRunner().invoke(cli, ["metrics", "--pred", truth, "--truth", truth, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "Dice 1.000 ± 0.000" in result.output


def test_metrics_unmatched_file(workspace, tmp_path):
    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    truth = os.path.join(workspace["eval_dir"], "truth")
    first = sorted(f for f in os.listdir(truth) if f.endswith(".vstn"))[0]
    (pred_dir / "stray.vstn").write_bytes(open(os.path.join(truth, first), "rb").read())
    result = CliRunner().invoke(cli, ["metrics", "--pred", str(pred_dir), "--truth", truth,
                                      "--out", str(tmp_path / "out")])
    assert result.exit_code == 2
    assert "unmatched file: stray.vstn" in result.output


def test_missing_dataset(tmp_path):
    result = CliRunner().invoke(cli, ["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")])
    assert result.exit_code == 2
    assert "[ERROR]" in result.output


def test_invalid_config_names_the_key(workspace, tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"train": {"learning_rate": -1}}))
    result = CliRunner().invoke(cli, ["train", "--data", workspace["data"], "--config", str(config),
                                      "--out", str(tmp_path / "run")])
    assert result.exit_code == 2
    assert "config train.learning_rate" in result.output


def test_unknown_held_out_speaker(workspace, tmp_path):
    result = CliRunner().invoke(cli, ["train", "--data", workspace["data"], "--config", workspace["config"],
                                      "--out", str(tmp_path / "run"), "--held-out", "7"])
    assert result.exit_code == 2
    assert "speaker 7" in result.output


def test_missing_checkpoint(workspace, tmp_path):
    result = CliRunner().invoke(cli, ["eval", "--checkpoint", str(tmp_path / "none.json"), "--data",
                                      workspace["data"], "--out", str(tmp_path / "eval")])
    assert result.exit_code == 2


@pytest.mark.parametrize("suite", ["losses", "metrics"])
def test_verify_suite(suite):
    result = CliRunner().invoke(cli, ["verify", suite])
    assert result.exit_code == 0, result.output
    assert f"PASS {suite}" in result.output


def test_eval_with_matching_config(workspace, tmp_path):
    result = CliRunner().invoke(cli, ["eval", "--checkpoint", os.path.join(workspace["run_dir"], "checkpoint.json"),
                                      "--config", workspace["config"], "--data", workspace["data"],
                                      "--out", str(tmp_path / "eval"), "--jobs", "1"])
    assert result.exit_code == 0, result.output
    assert "[OK] 4 frames" in result.output


def test_eval_config_of_another_width(workspace, tmp_path):
    config = tmp_path / "wide.json"
    config.write_text(json.dumps({"model": tiny_model_config(d_model=32).model_dump(mode="json")}))
    result = CliRunner().invoke(cli, ["eval", "--checkpoint", os.path.join(workspace["run_dir"], "checkpoint.json"),
                                      "--config", str(config), "--data", workspace["data"],
                                      "--out", str(tmp_path / "eval")])
    assert result.exit_code == 2
    assert "model.d_model" in result.output


def test_eval_checkpoint_that_does_not_fit_the_dataset(workspace, tmp_path):
    path = VocSegModel(tiny_model_config(n_audio_features=8)).save_checkpoint(str(tmp_path / "narrow.json"))
    result = CliRunner().invoke(cli, ["eval", "--checkpoint", path, "--data", workspace["data"],
                                      "--out", str(tmp_path / "eval")])
    assert result.exit_code == 2
    assert "does not fit the dataset" in result.output
    assert "model.n_audio_features" in result.output


def test_eval_unreadable_checkpoint(workspace, tmp_path):
    manifest = tmp_path / "broken.json"
    manifest.write_text("{not json")
    result = CliRunner().invoke(cli, ["eval", "--checkpoint", str(manifest), "--data", workspace["data"],
                                      "--out", str(tmp_path / "eval")])
    assert result.exit_code == 2
    assert "unusable" in result.output


def test_jobs_capped_by_thread_limit(monkeypatch):
    monkeypatch.setenv("VOCSEG_THREADS", "2")
    assert _jobs(None) == 2
    assert _jobs(1) == 1
    assert _jobs(8) == 2
    with pytest.raises(SystemExit) as info:
        _jobs(0)
    assert info.value.code == 2


def test_metrics_jobs_above_limit_still_runs(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("VOCSEG_THREADS", "1")
    truth = os.path.join(workspace["eval_dir"], "truth")
    result = CliRunner().invoke(cli, ["metrics", "--pred", truth, "--truth", truth, "--out", str(tmp_path),
                                      "--jobs", "16"])
    assert result.exit_code == 0, result.output


def _tree_bytes(directory: str, skip=("resolved_config.json",), suffixes=(".json", ".vstn", ".csv", ".md")) -> dict:
    files = {}
    for parent, _, names in os.walk(directory):
        for name in names:
            if name in skip or not name.endswith(suffixes):
                continue
            path = os.path.join(parent, name)
            with open(path, "rb") as handle:
                files[os.path.relpath(path, directory)] = handle.read()
    return files


def test_same_seed_pipeline_is_byte_identical(tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    for run in (first, second):
        for step, result in run["results"].items():
            assert result.exit_code == 0, f"{step}: {result.output}"
    for key in ("data", "run_dir", "eval_dir"):
        a, b = _tree_bytes(first[key]), _tree_bytes(second[key])
        assert a and sorted(a) == sorted(b)
        for name in a:
            assert a[name] == b[name], f"{key}/{name} differs between identical runs"
    assert "checkpoint.vstn" in _tree_bytes(first["run_dir"])
    assert "per_frame.csv" in _tree_bytes(first["eval_dir"])
