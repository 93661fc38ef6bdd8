"""Deterministic synthetic abdomen-phantom dataset generator.

Each case is a noisy intensity volume holding a body ellipsoid, a set of
ellipsoidal organs at canonical (jittered) positions, and optional tumor
spheres strictly inside organs. The released label withholds information
according to the case's supervision regime: full organ annotation, a
partial organ subset, or no label at all; tumors can be silently absent
from the released label even when present in the hidden truth.

Hidden complete truth is stored under ``truth/`` and must never be read by
training code; it exists for evaluation only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from . import ConfigError, ManifestError, TUMOR_CLASS
from .volcore import LabelMap, Volume, load_label, load_volume, save_label, save_volume

MANIFEST_VERSION = 1
NUM_LABEL_CLASSES = TUMOR_CLASS + 1  # canonical ids: 0 bg, 1..13 organs, 14 tumor

# canonical fractional (z, y, x) organ centers and relative radii; the first
# entries are the most widely separated so small num_organs stays easy to place
_ORGAN_LAYOUT: tuple[tuple[tuple[float, float, float], float], ...] = (
    ((0.38, 0.36, 0.36), 1.00),
    ((0.38, 0.64, 0.64), 1.00),
    ((0.62, 0.36, 0.64), 1.00),
    ((0.62, 0.64, 0.36), 1.00),
    ((0.38, 0.36, 0.64), 0.85),
    ((0.38, 0.64, 0.36), 0.85),
    ((0.62, 0.36, 0.36), 0.85),
    ((0.62, 0.64, 0.64), 0.85),
    ((0.50, 0.50, 0.50), 0.75),
    ((0.30, 0.50, 0.50), 0.60),
    ((0.70, 0.50, 0.50), 0.60),
    ((0.50, 0.28, 0.50), 0.60),
    ((0.50, 0.72, 0.50), 0.60),
)

_BODY_CENTER = (0.5, 0.5, 0.5)
_BODY_RADII = (0.47, 0.47, 0.47)


class SupervisionKind(str, Enum):
    FULL_ORGAN = "FULL_ORGAN"
    PARTIAL_ORGAN = "PARTIAL_ORGAN"
    UNLABELED = "UNLABELED"


@dataclass(frozen=True)
class PhantomConfig:
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    volume_shape_max: tuple[int, int, int] | None = None  # per-case dims drawn uniformly
    num_organs: int = 4
    counts: tuple[int, int, int] = (4, 8, 8)  # (n_full, n_partial, n_unlabeled)
    tumor_rate: float = 0.75
    tumor_annotation_rate: float = 0.68
    per_tumor_annotation_rate: float = 0.7  # within a tumor-annotated case
    max_tumors_per_case: int = 3
    # probability that each organ enters a partial case's annotated set
    # (redrawn until non-empty and proper); 0 draws uniformly over all
    # non-empty proper subsets instead
    partial_annotation_rate: float = 0.0
    # geometric per-organ decay of that probability: organ k is annotated
    # with rate * decay**(k-1), mimicking datasets where common organs are
    # labeled far more often than rare ones
    partial_annotation_decay: float = 1.0
    organ_radius_frac: float = 0.14
    jitter_frac: float = 0.02
    tumor_radius_frac: tuple[float, float] = (0.05, 0.15)
    tumor_min_radius_vox: float = 1.25
    air_mean: float = 0.0
    body_mean: float = 0.25
    organ_mean_base: float = 0.5
    organ_mean_step: float = 0.1
    tumor_offset: float = 0.05
    noise_sigma: float = 0.01
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.num_organs <= 13):
            raise ConfigError(f"num_organs must be in [1, 13], got {self.num_organs}")
        if any(c < 0 for c in self.counts) or len(self.counts) != 3:
            raise ConfigError(f"counts must be 3 non-negative integers, got {self.counts}")
        for name in ("tumor_rate", "tumor_annotation_rate", "per_tumor_annotation_rate",
                     "partial_annotation_rate", "partial_annotation_decay"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.volume_shape_max is not None:
            if any(m < s for s, m in zip(self.volume_shape, self.volume_shape_max)):
                raise ConfigError("volume_shape_max must dominate volume_shape")
        lo, hi = self.tumor_radius_frac
        if not (0 < lo <= hi):
            raise ConfigError(f"tumor_radius_frac must be an increasing positive pair, got {self.tumor_radius_frac}")
        min_dim = min(self.volume_shape)
        min_rel = min(rel for _, rel in _ORGAN_LAYOUT[: self.num_organs])
        if self.organ_radius_frac * min_rel * min_dim < 1.0:
            raise ConfigError(
                f"volume shape {self.volume_shape} too small to place {self.num_organs} organs "
                f"at radius fraction {self.organ_radius_frac}"
            )

    def organ_mean(self, class_id: int) -> float:
        return self.organ_mean_base + self.organ_mean_step * (class_id - 1)

    def class_means(self) -> dict[int, float]:
        """Nominal intensity mean per canonical class id (tumor varies by host)."""
        means = {0: self.body_mean}
        for k in range(1, self.num_organs + 1):
            means[k] = self.organ_mean(k)
        return means


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_path: str
    supervision: SupervisionKind
    annotated_organ_set: frozenset[int]
    tumor_annotated: bool
    truth_path: str
    label_path: str | None = None

    def load_image(self, root: Path) -> Volume:
        return load_volume(Path(root) / self.image_path)

    def load_label(self, root: Path) -> LabelMap:
        if self.label_path is None:
            raise ValueError(f"case {self.case_id} is unlabeled")
        return load_label(Path(root) / self.label_path, NUM_LABEL_CLASSES)

    def load_truth(self, root: Path) -> LabelMap:
        return load_label(Path(root) / self.truth_path, NUM_LABEL_CLASSES)


@dataclass
class DatasetManifest:
    root: Path
    cases: list[CaseRecord]
    config: dict
    format_version: int = MANIFEST_VERSION

    def by_supervision(self, kind: SupervisionKind) -> list[CaseRecord]:
        return [c for c in self.cases if c.supervision == kind]

    def tumor_annotated_cases(self) -> list[CaseRecord]:
        return [c for c in self.cases if c.tumor_annotated and c.label_path is not None]


# ---------------------------------------------------------------------------
# generation

def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _case_shape(cfg: PhantomConfig, rng: np.random.Generator) -> tuple[int, int, int]:
    if cfg.volume_shape_max is None:
        return tuple(cfg.volume_shape)
    return tuple(
        int(rng.integers(lo, hi + 1)) for lo, hi in zip(cfg.volume_shape, cfg.volume_shape_max)
    )


def _uniform_proper_subset(rng: np.random.Generator, n: int) -> frozenset[int]:
    """Uniform draw among the non-empty proper subsets of {1..n}."""
    if n < 2:
        raise ConfigError("partial cases need num_organs >= 2 to form a proper subset")
    mask = int(rng.integers(1, 2**n - 1))  # 1 .. 2^n - 2
    return frozenset(k + 1 for k in range(n) if mask >> k & 1)


def _partial_subset(cfg: PhantomConfig, rng: np.random.Generator) -> frozenset[int]:
    if cfg.partial_annotation_rate <= 0.0:
        return _uniform_proper_subset(rng, cfg.num_organs)
    if cfg.num_organs < 2:
        raise ConfigError("partial cases need num_organs >= 2 to form a proper subset")
    rates = [
        max(0.01, cfg.partial_annotation_rate * cfg.partial_annotation_decay ** (k - 1))
        for k in range(1, cfg.num_organs + 1)
    ]
    while True:  # sparse annotation: most organs missing from most cases
        subset = frozenset(
            k for k in range(1, cfg.num_organs + 1) if rng.random() < rates[k - 1]
        )
        if 0 < len(subset) < cfg.num_organs:
            return subset


def _synthesize_case(cfg: PhantomConfig, rng: np.random.Generator):
    """Build one case: intensity volume, complete truth, and geometry metadata."""
    shape = _case_shape(cfg, rng)
    body = _ellipsoid_mask(
        shape,
        [c * (s - 1) for c, s in zip(_BODY_CENTER, shape)],
        [r * s for r, s in zip(_BODY_RADII, shape)],
    )

    truth = np.zeros(shape, dtype=np.uint8)
    intensity = np.full(shape, cfg.air_mean, dtype=np.float64)
    intensity[body] = cfg.body_mean

    organs = []
    for k in range(1, cfg.num_organs + 1):
        (fz, fy, fx), rel = _ORGAN_LAYOUT[k - 1]
        jitter = rng.uniform(-cfg.jitter_frac, cfg.jitter_frac, size=3)
        center = [(f + j) * (s - 1) for f, j, s in zip((fz, fy, fx), jitter, shape)]
        radii = [cfg.organ_radius_frac * rel * s for s in shape]
        mask = _ellipsoid_mask(shape, center, radii) & (truth == 0)
        truth[mask] = k
        intensity[mask] = cfg.organ_mean(k)
        organs.append({"class_id": k, "center": [float(c) for c in center],
                       "radii": [float(r) for r in radii]})

    tumors = []
    if cfg.num_organs >= 1 and rng.random() < cfg.tumor_rate:
        n_tumors = int(rng.integers(1, cfg.max_tumors_per_case + 1))
        for _ in range(n_tumors):
            host = int(rng.integers(1, cfg.num_organs + 1))
            geom = organs[host - 1]
            host_r = float(np.mean(geom["radii"]))
            radius = max(cfg.tumor_min_radius_vox, float(rng.uniform(*cfg.tumor_radius_frac)) * host_r)
            radius = min(radius, max(host_r - 1.0, 1.0))
            off = rng.uniform(-1.0, 1.0, size=3) * max(host_r - radius - 0.5, 0.0) * 0.7
            center = [c + o for c, o in zip(geom["center"], off)]
            mask = _ellipsoid_mask(shape, center, [radius] * 3) & (truth == host)
            if not mask.any():
                continue
            truth[mask] = TUMOR_CLASS
            intensity[mask] = cfg.organ_mean(host) + cfg.tumor_offset
            tumors.append({"host": host, "center": [float(c) for c in center],
                           "radius": float(radius)})

    intensity += rng.normal(0.0, cfg.noise_sigma, size=shape)
    volume = Volume(intensity.astype(np.float32), cfg.spacing)
    truth_map = LabelMap(truth, cfg.spacing, NUM_LABEL_CLASSES)
    geometry = {"shape": list(shape), "organs": organs, "tumors": tumors}
    return volume, truth_map, geometry


def _release_label(
    cfg: PhantomConfig,
    truth: LabelMap,
    geometry: dict,
    annotated_set: frozenset[int],
    rng: np.random.Generator,
) -> tuple[LabelMap, bool]:
    """Erase withheld structures from the truth to form the released label."""
    data = truth.data.copy()
    for k in range(1, cfg.num_organs + 1):
        if k not in annotated_set:
            data[data == k] = 0

    tumors = geometry["tumors"]
    case_annotated = bool(tumors) and rng.random() < cfg.tumor_annotation_rate
    kept = np.zeros(truth.shape, dtype=bool)
    for i, t in enumerate(tumors):
        annotated = case_annotated and (i == 0 or rng.random() < cfg.per_tumor_annotation_rate)
        t["annotated"] = bool(annotated)
        if annotated:
            kept |= _ellipsoid_mask(truth.shape, t["center"], [t["radius"]] * 3)
    data[(truth.data == TUMOR_CLASS) & ~kept] = 0
    return LabelMap(data, truth.spacing, NUM_LABEL_CLASSES), case_annotated


def generate_phantom(cfg: PhantomConfig, root: str | Path) -> DatasetManifest:
    """Generate the dataset under root and return its manifest.

    Deterministic: per-case RNG is seeded with (global seed XOR case index),
    so regeneration is byte-identical and cases are order-independent.
    """
    root = Path(root)
    n_full, n_partial, n_unlabeled = cfg.counts
    kinds = (
        [SupervisionKind.FULL_ORGAN] * n_full
        + [SupervisionKind.PARTIAL_ORGAN] * n_partial
        + [SupervisionKind.UNLABELED] * n_unlabeled
    )
    records = []
    for index, kind in enumerate(kinds):
        rng = np.random.default_rng(cfg.seed ^ index)
        case_id = f"case_{index:04d}"
        volume, truth, geometry = _synthesize_case(cfg, rng)

        if kind == SupervisionKind.FULL_ORGAN:
            annotated = frozenset(range(1, cfg.num_organs + 1))
        elif kind == SupervisionKind.PARTIAL_ORGAN:
            annotated = _partial_subset(cfg, rng)
        else:
            annotated = frozenset()

        label_path = None
        tumor_annotated = False
        if kind != SupervisionKind.UNLABELED:
            released, tumor_annotated = _release_label(cfg, truth, geometry, annotated, rng)
            label_path = f"labels/{case_id}.svol"
            save_label(released, root / label_path)
        else:
            for t in geometry["tumors"]:
                t["annotated"] = False

        image_path = f"images/{case_id}.svol"
        truth_path = f"truth/{case_id}.svol"
        save_volume(volume, root / image_path)
        save_label(truth, root / truth_path)
        (root / "truth" / f"{case_id}.json").write_text(
            json.dumps(geometry, sort_keys=True, indent=1) + "\n"
        )
        records.append(
            CaseRecord(
                case_id=case_id,
                image_path=image_path,
                label_path=label_path,
                supervision=kind,
                annotated_organ_set=annotated if kind != SupervisionKind.UNLABELED else frozenset(),
                tumor_annotated=tumor_annotated,
                truth_path=truth_path,
            )
        )
    manifest = DatasetManifest(root=root, cases=records, config=asdict(cfg))
    save_manifest(manifest, root / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# manifest I/O

def save_manifest(m: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": m.format_version,
        "config": m.config,
        "cases": [
            {
                "case_id": c.case_id,
                "image_path": c.image_path,
                "label_path": c.label_path,
                "supervision": c.supervision.value,
                "annotated_organ_set": sorted(c.annotated_organ_set),
                "tumor_annotated": c.tumor_annotated,
                "truth_path": c.truth_path,
            }
            for c in m.cases
        ],
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _field(case: dict, name: str, types, index: int):
    if name not in case:
        raise ManifestError(f"case #{index}: missing field '{name}'")
    value = case[name]
    if not isinstance(value, types):
        raise ManifestError(f"case #{index}: field '{name}' has invalid type {type(value).__name__}")
    return value


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a manifest; referenced files must exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be a JSON object")
    version = doc.get("format_version")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"field 'format_version': expected {MANIFEST_VERSION}, got {version!r}")
    if not isinstance(doc.get("config"), dict):
        raise ManifestError("field 'config': must be an object")
    if not isinstance(doc.get("cases"), list):
        raise ManifestError("field 'cases': must be a list")

    root = path.parent
    records = []
    seen = set()
    for i, case in enumerate(doc["cases"]):
        if not isinstance(case, dict):
            raise ManifestError(f"case #{i}: must be an object")
        case_id = _field(case, "case_id", str, i)
        if case_id in seen:
            raise ManifestError(f"case #{i}: duplicate case_id '{case_id}'")
        seen.add(case_id)
        sup_raw = _field(case, "supervision", str, i)
        try:
            supervision = SupervisionKind(sup_raw)
        except ValueError:
            raise ManifestError(f"case #{i}: field 'supervision' has unknown value {sup_raw!r}")
        label_path = case.get("label_path")
        if label_path is not None and not isinstance(label_path, str):
            raise ManifestError(f"case #{i}: field 'label_path' has invalid type")
        if supervision == SupervisionKind.UNLABELED and label_path is not None:
            raise ManifestError(f"case #{i}: field 'label_path' must be null for UNLABELED cases")
        if supervision != SupervisionKind.UNLABELED and label_path is None:
            raise ManifestError(f"case #{i}: field 'label_path' is required for labeled cases")
        ann = _field(case, "annotated_organ_set", list, i)
        if not all(isinstance(a, int) for a in ann):
            raise ManifestError(f"case #{i}: field 'annotated_organ_set' must hold integers")
        record = CaseRecord(
            case_id=case_id,
            image_path=_field(case, "image_path", str, i),
            label_path=label_path,
            supervision=supervision,
            annotated_organ_set=frozenset(ann),
            tumor_annotated=_field(case, "tumor_annotated", bool, i),
            truth_path=_field(case, "truth_path", str, i),
        )
        for name, rel in (("image_path", record.image_path),
                          ("label_path", record.label_path),
                          ("truth_path", record.truth_path)):
            if rel is not None and not (root / rel).is_file():
                raise ManifestError(f"case #{i}: field '{name}' references missing file {rel}")
        records.append(record)
    return DatasetManifest(root=root, cases=records, config=doc["config"],
                           format_version=version)
