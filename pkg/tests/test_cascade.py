import logging

import numpy as np
import pytest

from segkit.cascade import (EYE_REGION, MOUTH_REGION, CascadeBundle, RegionSpec,
                            cascade_predictions, integrate_masks, region_clips, run_cascade)
from segkit.data.crops import CropBox
from segkit.data.masks import BACKGROUND, EYES, INNER_MOUTH, OUTER_MOUTH, SKIN
from segkit.data.synth import synth_video_generate
from segkit.metrics import ConfusionMatrix, mean_iou
from segkit.models import ModelConfig, build_mini_fcn
from segkit.train import predict_frames


@pytest.fixture(scope="module")
def clips():
    return synth_video_generate(seed=2, clips=2, frames_per_clip=10, clips_per_subject=1)


@pytest.fixture(scope="module")
def models():
    primary = build_mini_fcn(seed=1)
    eyes = build_mini_fcn(ModelConfig(input_size=(48, 96), num_classes=2), seed=2)
    mouth = build_mini_fcn(ModelConfig(input_size=(48, 48), num_classes=3), seed=3)
    return primary, eyes, mouth


def test_empty_prediction_hands_region_back_to_skin():
    primary = np.full((10, 10), SKIN, np.uint8)
    primary[4:6, 2:8] = EYES
    primary[0, 0] = BACKGROUND
    box = CropBox(0, 2, 10, 6, "eyes")
    out = integrate_masks(primary, np.zeros((6, 10), int), box, EYE_REGION.mapping)
    assert not (out == EYES).any()
    assert out[0, 0] == BACKGROUND and (out[4:6, 2:8] == SKIN).all()


def test_foreground_takes_mapped_label_and_outside_untouched():
    primary = np.full((12, 12), SKIN, np.uint8)
    primary[0:2] = OUTER_MOUTH  # outside the box: must survive
    pred = np.zeros((4, 4), int)
    pred[1, 1], pred[2, 2] = 1, 2
    out = integrate_masks(primary, pred, CropBox(4, 4, 4, 4, "mouth"), MOUTH_REGION.mapping)
    assert out[5, 5] == OUTER_MOUTH and out[6, 6] == INNER_MOUTH
    assert (out[0:2] == OUTER_MOUTH).all()
    assert (out != primary).sum() == 2


def test_echoing_the_primary_is_idempotent(rng):
    primary = rng.integers(0, 5, (3, 20, 20)).astype(np.uint8)
    for spec, box in ((EYE_REGION, CropBox(2, 3, 12, 6, "eyes")),
                      (MOUTH_REGION, CropBox(5, 8, 9, 9, "mouth"))):
        ys, xs = box.slices()
        echo = spec.to_region_labels(primary[:, ys, xs])
        assert np.array_equal(integrate_masks(primary, echo, box, spec.mapping), primary)


def test_overlap_resolved_by_fixed_order():
    primary = np.full((10, 10), SKIN, np.uint8)
    eye_box, mouth_box = CropBox(0, 0, 6, 6, "eyes"), CropBox(3, 3, 6, 6, "mouth")
    eye_pred = np.ones((6, 6), int)
    mouth_pred = np.ones((6, 6), int)
    eyes_then_mouth = integrate_masks(integrate_masks(primary, eye_pred, eye_box, (0, EYES)),
                                      mouth_pred, mouth_box, MOUTH_REGION.mapping)
    mouth_then_eyes = integrate_masks(integrate_masks(primary, mouth_pred, mouth_box,
                                                      MOUTH_REGION.mapping),
                                      eye_pred, eye_box, (0, EYES))
    assert eyes_then_mouth[4, 4] == OUTER_MOUTH and mouth_then_eyes[4, 4] == EYES
    bundle = CascadeBundle(build_mini_fcn(materialize=False))
    assert [s.kind for s, _ in bundle.stages()] == ["eyes", "mouth"]


def test_out_of_bounds_box_clamped(caplog):
    primary = np.full((8, 8), SKIN, np.uint8)
    pred = np.ones((4, 4), int)
    with caplog.at_level(logging.WARNING):
        out = integrate_masks(primary, pred, CropBox(6, 6, 4, 4, "eyes"), (0, EYES))
    assert "clamped" in caplog.text
    assert (out[6:8, 6:8] == EYES).all() and (out == EYES).sum() == 4


def test_region_prediction_size_checked():
    with pytest.raises(ValueError):
        integrate_masks(np.zeros((8, 8), np.uint8), np.zeros((3, 3), int),
                        CropBox(0, 0, 4, 4, "eyes"), (0, EYES))


def test_region_spec_validation():
    with pytest.raises(ValueError):
        RegionSpec("mouth", (48, 48), (0, OUTER_MOUTH, OUTER_MOUTH))
    with pytest.raises(ValueError):
        RegionSpec("eyes", (48, 48), (1, EYES))


def test_bundle_checks_class_counts(models):
    primary, eyes, mouth = models
    with pytest.raises(ValueError):
        CascadeBundle(primary, mouth, eyes)
    with pytest.raises(ValueError):
        CascadeBundle(eyes)


def test_missing_sub_models_degrade_to_primary(models, clips, caplog):
    primary = models[0]
    bundle = CascadeBundle(primary)
    with caplog.at_level(logging.WARNING):
        out = run_cascade(bundle, clips[0].frames)
    assert np.array_equal(out, predict_frames(primary, clips[0].frames))
    assert len(bundle.notices) == 2 and "no eyes model" in caplog.text


def test_run_cascade_contract_and_determinism(models, clips):
    bundle = CascadeBundle(*models)
    out = run_cascade(bundle, clips[0].frames)
    assert out.shape == clips[0].masks.shape and out.max() <= 4
    assert np.array_equal(out, run_cascade(CascadeBundle(*models), clips[0].frames))
    with pytest.raises(ValueError):
        run_cascade(bundle, clips[0].frames[:7])
    preds = cascade_predictions(bundle, clips)
    assert set(preds) == {c.clip_id for c in clips}


def test_oracle_sub_models_never_hurt(models, clips):
    """Inject ground truth inside each box: eye and mouth IoU cannot drop."""
    primary = models[0]
    base, integ = ConfusionMatrix(5), ConfusionMatrix(5)
    for c in clips:
        pred = predict_frames(primary, c.frames)
        out = pred.copy()
        for spec in (EYE_REGION, MOUTH_REGION):
            for s in range(0, c.length, 5):
                win = slice(s, s + 5)
                box = spec.box(out[win])
                ys, xs = box.slices()
                truth = spec.to_region_labels(c.masks[win][:, ys, xs])
                out[win] = integrate_masks(out[win], truth, box, spec.mapping)
        base.accumulate(c.masks, pred)
        integ.accumulate(c.masks, out)
    b, i = mean_iou(base)[1], mean_iou(integ)[1]
    for cls in (EYES, OUTER_MOUTH, INNER_MOUTH):
        assert np.nan_to_num(i[cls]) >= np.nan_to_num(b[cls]) - 1e-12


def test_region_clips(clips):
    rc = region_clips(clips, EYE_REGION, seed=0)
    assert len(rc) == len(clips)
    assert rc[0].frames.shape == (10, 48, 96, 3) and rc[0].frames.dtype == np.uint8
    assert set(np.unique(rc[0].masks)) <= {0, 1} and rc[0].masks.max() == 1
    again = region_clips(clips, EYE_REGION, seed=0)
    assert np.array_equal(rc[0].frames, again[0].frames)
