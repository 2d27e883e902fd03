"""Landmark masks, synthetic video data, batching, crops and smoothing."""
from .crops import CropBox, crop_frames, crop_masks, localize_crop_boxes
from .masks import landmarks_to_mask, read_pts, write_pts
from .sequences import Batch, batch_sequences, prepare_clip, to_input
from .smoothing import gaussian_window, temporal_smooth
from .spline import closed_cubic_spline, fill_polygon
from .synth import (Clip, SequenceManifest, SynthConfig, load_dataset, split_clips,
                    synth_video_generate, write_dataset)

__all__ = [
    "Batch", "Clip", "CropBox", "SequenceManifest", "SynthConfig", "batch_sequences",
    "closed_cubic_spline", "crop_frames", "crop_masks", "fill_polygon", "gaussian_window",
    "landmarks_to_mask", "load_dataset", "localize_crop_boxes", "prepare_clip", "read_pts",
    "split_clips", "synth_video_generate", "temporal_smooth", "to_input", "write_dataset",
    "write_pts",
]
