"""Two-stage hybrid-supervision volumetric segmentation toolkit.

Organs are segmented with a self-training student fed by corrected
pseudo-labels; tumors with a mean-teacher student supervised by real-time
corrected teacher predictions. Inference runs coarse-to-fine on whole
volumes: locate the abdomen, crop, segment, merge, restore.
"""

__version__ = "0.1.0"

BACKGROUND = 0
ORGAN_CLASS_IDS = tuple(range(1, 14))
TUMOR_CLASS = 14

ORGAN_NAMES = (
    "Liver",
    "Right Kidney",
    "Spleen",
    "Pancreas",
    "Aorta",
    "Inferior Vena Cava",
    "Right Adrenal Gland",
    "Left Adrenal Gland",
    "Gallbladder",
    "Esophagus",
    "Stomach",
    "Duodenum",
    "Left Kidney",
)


class StmtError(Exception):
    """Base class for package errors."""


class EmptyForegroundError(StmtError):
    """No foreground voxels available where some were required."""


class ManifestError(StmtError):
    """Dataset manifest is malformed or references missing files."""


class CheckpointError(StmtError):
    """Model checkpoint is malformed, truncated or incompatible."""


class ConfigError(StmtError):
    """Run configuration is invalid."""


class MissingArtifactError(StmtError):
    """An upstream artifact required by a command does not exist."""


class TrainingDivergedError(StmtError):
    """Training produced a non-finite loss."""
