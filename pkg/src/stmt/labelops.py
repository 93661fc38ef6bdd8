"""Deterministic label algebra: stage-1 binarization, branch masking,
pseudo-label correction, tumor overlay merge, largest-component filtering.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import ORGAN_CLASS_IDS, TUMOR_CLASS
from .volcore import LabelMap


@dataclass(frozen=True)
class PartialLabel:
    """A label map annotating only the organ classes in annotated_set, plus
    (optionally) tumors. Unannotated structures look like background."""

    labels: LabelMap
    annotated_set: frozenset[int] = field(default_factory=frozenset)
    tumor_annotated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "annotated_set", frozenset(int(c) for c in self.annotated_set))
        present = set(np.unique(self.labels.data).tolist()) - {0}
        organ_present = {c for c in present if c != TUMOR_CLASS}
        if not organ_present <= self.annotated_set:
            raise ValueError(
                f"label contains organ classes {sorted(organ_present - self.annotated_set)} "
                "outside the annotated set"
            )
        if TUMOR_CLASS in present and not self.tumor_annotated:
            raise ValueError("label contains tumor voxels but tumor_annotated is False")


def binarize_foreground(l: LabelMap) -> LabelMap:
    """All voxels with class id >= 1 become 1; the result is binary."""
    return LabelMap((l.data >= 1).astype(np.uint8), l.spacing, 2)


def mask_tumor_out(l: LabelMap) -> LabelMap:
    """Zero the tumor class, keep organ ids unchanged."""
    data = l.data.copy()
    data[data == TUMOR_CLASS] = 0
    return LabelMap(data, l.spacing, l.num_classes)


def mask_organs_out(l: LabelMap) -> LabelMap:
    """Zero all organ classes and remap tumor to 1; the result is binary."""
    return LabelMap((l.data == TUMOR_CLASS).astype(np.uint8), l.spacing, 2)


def correct_pseudo_label(pseudo: LabelMap, partial: PartialLabel) -> LabelMap:
    """Correct an organ pseudo-label with a partial annotation.

    Voxels whose pseudo class belongs to the annotated set are zeroed, then
    every annotated voxel overwrites the pseudo-label at its position.
    """
    if pseudo.shape != partial.labels.shape:
        raise ValueError(f"shape mismatch: {pseudo.shape} vs {partial.labels.shape}")
    out = pseudo.data.copy()
    if partial.annotated_set:
        out[np.isin(pseudo.data, list(partial.annotated_set))] = 0
    ann = partial.labels.data
    out[ann > 0] = ann[ann > 0]
    return LabelMap(out, pseudo.spacing, max(pseudo.num_classes, partial.labels.num_classes))


def correct_tumor_pseudo(
    teacher_pred: LabelMap, partial_tumor: LabelMap, annotated: bool
) -> LabelMap:
    """Correct a binary tumor pseudo-label with the case's annotation.

    On annotated cases every annotated tumor voxel overwrites the teacher
    prediction; teacher detections elsewhere are retained so unannotated
    tumors stay available as supervision. Unannotated cases pass through.
    """
    if teacher_pred.shape != partial_tumor.shape:
        raise ValueError(f"shape mismatch: {teacher_pred.shape} vs {partial_tumor.shape}")
    if not annotated:
        return LabelMap(teacher_pred.data.copy(), teacher_pred.spacing, 2)
    out = teacher_pred.data.copy()
    out[partial_tumor.data == 1] = 1
    return LabelMap(out, teacher_pred.spacing, 2)


def merge_organ_tumor(organ_seg: LabelMap, tumor_seg: LabelMap) -> LabelMap:
    """Overlay a binary tumor segmentation onto an organ segmentation."""
    if organ_seg.shape != tumor_seg.shape:
        raise ValueError(f"shape mismatch: {organ_seg.shape} vs {tumor_seg.shape}")
    out = organ_seg.data.copy()
    out[tumor_seg.data == 1] = TUMOR_CLASS
    return LabelMap(out, organ_seg.spacing, max(organ_seg.num_classes, TUMOR_CLASS + 1))


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def largest_component_filter(
    l: LabelMap, connectivity: int = 26, class_ids=None
) -> LabelMap:
    """Keep, independently per class, only its largest connected component.

    Ties on voxel count are broken by keeping the component that contains
    the smallest linear voxel index. class_ids restricts the filter to a
    subset of classes (default: every class id >= 1).
    """
    if connectivity not in _STRUCTS:
        raise ValueError(f"connectivity must be one of {sorted(_STRUCTS)}, got {connectivity}")
    struct = _STRUCTS[connectivity]
    present = [int(c) for c in np.unique(l.data) if c != 0]
    if class_ids is not None:
        wanted = {int(c) for c in class_ids}
        present = [c for c in present if c in wanted]
    out = l.data.copy()
    for c in present:
        mask = l.data == c
        labeled, n = ndimage.label(mask, structure=struct)
        if n <= 1:
            continue
        sizes = np.bincount(labeled.ravel())[1:]  # component ids are 1..n
        best = np.flatnonzero(sizes == sizes.max()) + 1
        if len(best) > 1:
            flat = labeled.ravel()
            first_idx = {int(b): int(np.flatnonzero(flat == b)[0]) for b in best}
            keep = min(best, key=lambda b: first_idx[int(b)])
        else:
            keep = best[0]
        out[mask & (labeled != keep)] = 0
    return LabelMap(out, l.spacing, l.num_classes)
