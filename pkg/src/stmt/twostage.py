"""Coarse-to-fine whole-volume inference: locate the abdomen on a
downsampled grid, crop the region of interest, run the organ and tumor
networks on the resampled crop, merge, post-process, and restore the
result to the native grid.

Models are pluggable: anything with ``num_classes`` and
``predict_logits(data) -> (C, D, H, W)`` works, so oracle predictors can be
swapped in for end-to-end validation.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ORGAN_CLASS_IDS
from .labelops import largest_component_filter, merge_organ_tumor
from .volcore import (
    BBox,
    LabelMap,
    NormStats,
    Volume,
    bbox_of_foreground,
    clip_and_normalize,
    crop,
    resample_image,
    resample_label,
    restore_to_canvas,
    scale_bbox,
)


@dataclass(frozen=True)
class PipelineOptions:
    margin_fraction: float = 0.1
    connectivity: int = 26
    postprocess: bool = True
    concurrent_stage2: bool = False


@dataclass(frozen=True)
class PipelineBundle:
    """Models, normalization statistics and grid sizes for both stages."""

    stage1_model: object  # binary foreground locator
    organ_model: object
    tumor_model: object  # binary tumor head
    stage1_stats: NormStats
    stage2_stats: NormStats
    stage1_shape: tuple[int, int, int] = (128, 128, 128)
    stage2_shape: tuple[int, int, int] = (192, 192, 192)
    options: PipelineOptions = field(default_factory=PipelineOptions)

    def __post_init__(self):
        if getattr(self.stage1_model, "num_classes", 2) < 2:
            raise ValueError("stage-1 model must emit at least 2 classes")
        if getattr(self.tumor_model, "num_classes", 2) != 2:
            raise ValueError("tumor model must be binary")


def _argmax_label(logits: np.ndarray, spacing, num_classes: int) -> LabelMap:
    return LabelMap(np.argmax(logits, axis=0).astype(np.uint8), spacing, num_classes)


def locate_abdomen(bundle: PipelineBundle, v: Volume) -> BBox:
    """Coarse localization: binary foreground on the stage-1 grid, bounding
    box with margin, scaled back to the native grid. An empty prediction
    falls back to the full frame so the case is still processed."""
    small = resample_image(clip_and_normalize(v, bundle.stage1_stats), bundle.stage1_shape)
    logits = bundle.stage1_model.predict_logits(small.data)
    mask = _argmax_label(logits, small.spacing, 2)
    box = bbox_of_foreground(mask, bundle.options.margin_fraction)
    if box is None:
        return BBox.full_frame(v.shape)
    return scale_bbox(box, bundle.stage1_shape, v.shape)


def segment_roi(bundle: PipelineBundle, v: Volume, b: BBox) -> LabelMap:
    """Fine segmentation of the cropped region, returned at the box extent."""
    roi = resample_image(clip_and_normalize(crop(v, b), bundle.stage2_stats), bundle.stage2_shape)
    if bundle.options.concurrent_stage2:
        with ThreadPoolExecutor(max_workers=2) as pool:
            organ_fut = pool.submit(bundle.organ_model.predict_logits, roi.data)
            tumor_fut = pool.submit(bundle.tumor_model.predict_logits, roi.data)
            organ_logits, tumor_logits = organ_fut.result(), tumor_fut.result()
    else:
        organ_logits = bundle.organ_model.predict_logits(roi.data)
        tumor_logits = bundle.tumor_model.predict_logits(roi.data)
    organ_seg = _argmax_label(organ_logits, roi.spacing, bundle.organ_model.num_classes)
    tumor_seg = _argmax_label(tumor_logits, roi.spacing, 2)
    merged = merge_organ_tumor(organ_seg, tumor_seg)
    return resample_label(merged, b.extent)


def run_pipeline(bundle: PipelineBundle, v: Volume) -> LabelMap:
    """Full two-stage inference; output shape equals input shape and every
    voxel outside the located box is background."""
    box = locate_abdomen(bundle, v)
    roi_seg = segment_roi(bundle, v, box)
    if bundle.options.postprocess:
        # tumors are legitimately multi-focal: only organ classes are filtered
        roi_seg = largest_component_filter(
            roi_seg, bundle.options.connectivity, class_ids=ORGAN_CLASS_IDS
        )
    restored = restore_to_canvas(roi_seg, box, v.shape)
    return LabelMap(restored.data, v.spacing, roi_seg.num_classes)
