import json
from pathlib import Path

import numpy as np
import pytest

from segkit.cli import main
from segkit.experiment import SEED_ENV, ExperimentConfig
from segkit.models import ModelConfig, build_mini_fcn, convert_to_convlstm_fcn

HERE = Path(__file__).parent
SLEEP_A = [0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0]
SLEEP_B = [1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--seed", "7", "--clips", "8", "--frames", "10",
                 "--out", str(root)]) == 0
    return root / "manifest.json"


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    fcn = build_mini_fcn(seed=4)
    fcn.save(root / "fcn.ssk")
    convert_to_convlstm_fcn(fcn, 5).save(root / "model.ssk")
    build_mini_fcn(ModelConfig(num_classes=2)).save(root / "binary.ssk")
    build_mini_fcn(ModelConfig(input_size=(48, 96), num_classes=2)).save(root / "eyes.ssk")
    build_mini_fcn(ModelConfig(input_size=(48, 48), num_classes=3)).save(root / "mouth.ssk")
    return root


def test_synth_digest_is_reproducible(capsys, tmp_path):
    _, a, _ = run(capsys, "synth", "--seed", 7, "--clips", 2, "--frames", 5, "--out", tmp_path / "a")
    _, b, _ = run(capsys, "synth", "--seed", 7, "--clips", 2, "--frames", 5, "--out", tmp_path / "b")
    assert a["digest"] == b["digest"] and a["clips"] == 2


def test_convert_landmarks_matches_golden(capsys, tmp_path):
    code, out, _ = run(capsys, "convert-landmarks", HERE / "face_fixture.pts", "--width", 64,
                       "--height", 64, "--out", tmp_path)
    assert code == 0
    (digest,) = out["masks"].values()
    assert digest == (HERE / "face_fixture.sha256").read_text().strip()
    assert (tmp_path / "face_fixture.png").exists()


def test_gradcheck_all_pass(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops-only")
    assert code == 0 and out["failed"] == [] and out["checks"] > 20


def test_stats_textbook_fixture(capsys, tmp_path):
    (tmp_path / "a.txt").write_text(" ".join(map(str, SLEEP_B)))
    (tmp_path / "b.json").write_text(json.dumps(SLEEP_A))
    code, out, _ = run(capsys, "stats", "--a", tmp_path / "a.txt", "--b", tmp_path / "b.json")
    assert code == 0 and out["p_value"] == pytest.approx(0.002833, abs=1e-6)
    assert out["n"] == 10 and out["significant"]


def test_eval_against_own_dump_is_perfect(capsys, dataset, checkpoints, tmp_path):
    dump = tmp_path / "pred.npz"
    code, first, _ = run(capsys, "eval", "--checkpoint", checkpoints / "model.ssk",
                         "--manifest", dataset, "--dump-predictions", dump)
    assert code == 0 and 0 <= first["mIoU"] <= 1
    code, again, _ = run(capsys, "eval", "--checkpoint", checkpoints / "model.ssk",
                         "--manifest", dataset, "--reference", dump, "--out", tmp_path / "r")
    assert code == 0 and again["mIoU"] == 1.0
    assert (tmp_path / "r" / "iou_table.csv").read_text().startswith("method,mIoU")


def test_eval_with_baseline_groups_and_subjects(capsys, dataset, checkpoints):
    code, out, _ = run(capsys, "eval", "--checkpoint", checkpoints / "model.ssk", "--manifest",
                       dataset, "--split", "train", "--baseline", checkpoints / "fcn.ssk",
                       "--groups", 2, "--subjects", "--smooth")
    assert code == 0
    assert 0 <= out["groups"]["p_value"] <= 1
    assert len(out["temporal_profile"]) == 5 and out["subjects"]


def test_eval_rejects_class_count_mismatch(capsys, dataset, checkpoints):
    code, _, err = run(capsys, "eval", "--checkpoint", checkpoints / "binary.ssk",
                       "--manifest", dataset)
    assert code == 1
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["command"] == "eval" and "classes" in payload["message"]


def test_missing_checkpoint_gives_error_json(capsys, dataset, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "nope.ssk", "--manifest", dataset)
    assert code == 1 and set(json.loads(err.strip().splitlines()[-1])) == {
        "error", "message", "command"}


def test_cascade_eval(capsys, dataset, checkpoints, tmp_path):
    code, out, _ = run(capsys, "cascade-eval", "--primary", checkpoints / "fcn.ssk", "--eyes",
                       checkpoints / "eyes.ssk", "--mouth", checkpoints / "mouth.ssk",
                       "--manifest", dataset, "--out", tmp_path / "c.csv")
    assert code == 0 and out["notices"] == []
    assert (tmp_path / "c.csv").read_text() == out["table_csv"]
    code, out, _ = run(capsys, "cascade-eval", "--primary", checkpoints / "fcn.ssk",
                       "--manifest", dataset)
    assert code == 0 and len(out["notices"]) == 2
    assert out["integrated_mIoU"] == out["primary_mIoU"]


def test_train_rejects_unknown_keys(capsys, dataset, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"epochz": 3}}))
    code, _, err = run(capsys, "train", "--config", cfg, "--manifest", dataset)
    assert code == 1 and "epochz" in err
    cfg.write_text(json.dumps({"schedule": {}}))
    assert run(capsys, "train", "--config", cfg, "--manifest", dataset)[0] == 1


def test_seed_env_override(tmp_path, monkeypatch):
    assert ExperimentConfig.from_dict({"seed": 1}, env={SEED_ENV: "9"}).seed == 9
    assert ExperimentConfig.from_dict({"seed": 1}, env={}).seed == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 2}))
    monkeypatch.setenv(SEED_ENV, "11")
    assert ExperimentConfig.from_json(cfg).seed == 11


def test_train_step_one(capsys, dataset, tmp_path, monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"steps": "fcn", "fcn_epochs": 1}}))
    code, out, _ = run(capsys, "train", "--config", cfg, "--manifest", dataset, "--seed", 3,
                       "--out", tmp_path / "runs")
    assert code == 0 and out["seed"] == 3
    run_dir = Path(out["run_dir"])
    assert json.loads((run_dir / "config.json").read_text())["seed"] == 3
    assert (run_dir / "metrics.csv").read_text().count("\n") == 2


def test_config_round_trip():
    cfg = ExperimentConfig.from_json(Path(__file__).parents[1] / "src/segkit/configs/desk.json",
                                     env={})
    again = ExperimentConfig.from_dict(cfg.to_dict(), env={})
    assert again.to_dict() == cfg.to_dict()
    assert cfg.cascade.enabled and cfg.cascade.eyes.size == (96, 48)
