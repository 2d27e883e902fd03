import math

import numpy as np
import pytest

from segkit.data.synth import split_clips, synth_video_generate
from segkit.experiment import ExperimentConfig, run_experiment
from segkit.losses import LossConfig
from segkit.models import CONVLSTM, build_mini_fcn, convert_to_convlstm_fcn
from segkit.optim import OptimizerConfig, freeze_all_but_convlstm
from segkit.tensor import Tensor
from segkit.train import (FeatureCache, FitConfig, TrainingDiverged, classifier_logit_scale,
                          clip_logits, compute_loss, evaluate, first_trainable_layer, fit,
                          history_csv, predict_clip, predict_frames)


@pytest.fixture(scope="module")
def data():
    clips = synth_video_generate(seed=6, clips=8, frames_per_clip=10, clips_per_subject=2,
                                 split_ratio=(2, 1, 1))
    return split_clips(clips, "train"), split_clips(clips, "val"), clips


def tiny_config(**train):
    return ExperimentConfig.from_dict({
        "seed": 5,
        "train": {"fcn_epochs": 1, "epochs": 1, "fcn_batch": 10, **train},
        "optim": {"base_lr": 1e-4},
    }, env={})


def test_freeze_changes_only_convlstm(data):
    train, val, _ = data
    fcn = build_mini_fcn(seed=0)
    m = convert_to_convlstm_fcn(fcn, 5, logit_scale=classifier_logit_scale(fcn, train))
    before = {k: v.data.copy() for k, v in m.params.items()}
    oc = OptimizerConfig(base_lr=1e-3, frozen_groups=freeze_all_but_convlstm(
        m.param_groups().values()))
    fit(m, train, val, LossConfig(), oc, FitConfig(epochs=1, T=5, N=2, validate=False))
    groups = m.param_groups()
    changed = {k for k, v in m.params.items() if not np.array_equal(v.data, before[k])}
    assert changed and all(groups[k] == CONVLSTM for k in changed)


def test_frozen_prefix_cache_matches_full_forward(data):
    train, _, _ = data
    m = convert_to_convlstm_fcn(build_mini_fcn(seed=0), 5)
    frozen = freeze_all_but_convlstm(m.param_groups().values())
    stop = first_trainable_layer(m, frozen)
    # parameter-free layers after the last frozen conv stay live
    assert m.layers[stop - 1].name == "stage4_conv2"
    assert all(l.kind in ("relu", "reshape", "convlstm", "upsample") for l in m.layers[stop:])
    cache = FeatureCache(m, stop, (64, 64))
    np.testing.assert_allclose(clip_logits(m, train[0], cache), clip_logits(m, train[0]),
                               atol=1e-12)


@pytest.mark.parametrize("kind", ["cross_entropy", "iou", "segmentation"])
def test_loss_dispatch_is_finite(rng, kind):
    logits = Tensor(rng.normal(size=(2, 5, 4, 4)))
    labels = rng.integers(0, 5, (2, 4, 4))
    assert math.isfinite(compute_loss(logits, labels, LossConfig(kind)).item())


def test_best_validation_checkpoint_restored(data):
    train, val, _ = data
    m = build_mini_fcn(seed=1)
    hist = []
    fit(m, train, val, LossConfig("cross_entropy"), OptimizerConfig(),
        FitConfig(epochs=3, T=1, N=10, seed=0), "fcn", hist)
    best = max(h["val_miou"] for h in hist)
    assert evaluate(m, val).miou == pytest.approx(best, abs=1e-12)
    assert [h["epoch"] for h in hist] == [1, 2, 3]


def test_nan_loss_aborts_with_dump(data, tmp_path):
    train, val, _ = data
    m = build_mini_fcn(seed=0)
    m.params["conv6/bias"].data[0] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        fit(m, train, val, LossConfig("cross_entropy"), OptimizerConfig(),
            FitConfig(epochs=1, T=1, N=10), "fcn", [], tmp_path)
    dump = np.load(err.value.dump_path)
    assert dump["images"].shape[0] == 10 and dump["labels"].shape == (10, 64, 64)


def test_predictions_at_original_resolution(data):
    _, _, clips = data
    m = convert_to_convlstm_fcn(build_mini_fcn(seed=0), 5)
    c = clips[0]
    pred = predict_clip(m, c)
    assert pred.shape == c.masks.shape
    assert np.array_equal(pred, predict_frames(m, c.frames))
    assert predict_clip(m, c, smooth=True).shape == c.masks.shape
    with pytest.raises(ValueError):
        predict_frames(m, c.frames[:3])


def test_history_csv_layout():
    text = history_csv([{"phase": "fcn", "epoch": 1, "steps": 4, "train_loss": 0.5,
                         "val_miou": 0.25}])
    assert text.splitlines() == ["phase,epoch,steps,train_loss,val_miou", "fcn,1,4,0.5,0.25"]


def test_step_one_only_run(data, tmp_path):
    _, _, clips = data
    out = run_experiment(tiny_config(steps="fcn"), clips, tmp_path)
    assert "fcn" in out and "model" not in out
    for name in ("config.json", "seed", "inputs.sha256", "metrics.csv", "fcn.ssk"):
        assert (tmp_path / name).exists()


def test_same_seed_runs_are_identical(data, tmp_path):
    _, _, clips = data
    a = run_experiment(tiny_config(), clips, tmp_path / "a")
    b = run_experiment(tiny_config(), clips, tmp_path / "b")
    for name in ("metrics.csv", "inputs.sha256", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "model.ssk").read_bytes() == (tmp_path / "b" / "model.ssk").read_bytes()
    assert a["inputs_sha256"] == b["inputs_sha256"]
