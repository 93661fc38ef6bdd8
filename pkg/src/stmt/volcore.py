"""Volume and label-map geometry: resampling, cropping, padding, bounding
boxes, intensity normalization, and the SVOL on-disk format.

All operations are pure functions over immutable inputs. Axis order is
(D, H, W) i.e. (z, y, x) throughout; spacing is (sz, sy, sx) in mm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import EmptyForegroundError

Shape3 = tuple[int, int, int]
Spacing3 = tuple[float, float, float]

STD_FLOOR = 1e-8
DEFAULT_BBOX_MARGIN = 0.1


def _check_shape3(shape) -> Shape3:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"expected 3 positive dims, got {shape}")
    return shape


def _check_spacing(spacing) -> Spacing3:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive finite values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """3D scalar intensity grid with physical voxel spacing."""

    data: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or any(s < 1 for s in data.shape):
            raise ValueError(f"volume must be 3D with positive dims, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume intensities must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape3:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """3D integer class grid. Class 0 is background."""

    data: np.ndarray
    spacing: Spacing3 = (1.0, 1.0, 1.0)
    num_classes: int = 0  # 0 means "infer as max id + 1"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or any(s < 1 for s in data.shape):
            raise ValueError(f"label map must be 3D with positive dims, got {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(data == np.round(data)):
                raise ValueError("label values must be integral")
        dmin, dmax = int(data.min()), int(data.max())
        num_classes = int(self.num_classes) or dmax + 1
        if dmin < 0 or dmax >= num_classes:
            raise ValueError(f"label values must lie in [0, {num_classes - 1}], got [{dmin}, {dmax}]")
        if num_classes > 256:
            raise ValueError("label maps are stored as u8; num_classes must be <= 256")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "num_classes", num_classes)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape3:
        return self.data.shape


@dataclass(frozen=True)
class BBox:
    """Half-open voxel box [lo, hi) inside a frame of shape frame_shape."""

    lo: Shape3
    hi: Shape3
    frame_shape: Shape3

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        object.__setattr__(self, "frame_shape", _check_shape3(self.frame_shape))
        for lo, hi, n in zip(self.lo, self.hi, self.frame_shape):
            if not (0 <= lo < hi <= n):
                raise ValueError(f"invalid box {self.lo}..{self.hi} in frame {self.frame_shape}")

    @property
    def extent(self) -> Shape3:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    @staticmethod
    def full_frame(frame_shape) -> "BBox":
        shape = _check_shape3(frame_shape)
        return BBox((0, 0, 0), shape, shape)


@dataclass(frozen=True)
class NormStats:
    """Clip percentiles plus global mean/std of the foreground intensities."""

    clip_lo: float
    clip_hi: float
    mean: float
    std: float

    def __post_init__(self):
        if not all(np.isfinite([self.clip_lo, self.clip_hi, self.mean, self.std])):
            raise ValueError("normalization stats must be finite")
        if self.clip_lo > self.clip_hi:
            raise ValueError("clip_lo must be <= clip_hi")
        if self.std <= 0:
            raise ValueError("std must be positive")

    def to_dict(self) -> dict:
        return {"clip_lo": self.clip_lo, "clip_hi": self.clip_hi, "mean": self.mean, "std": self.std}

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        return NormStats(float(d["clip_lo"]), float(d["clip_hi"]), float(d["mean"]), float(d["std"]))


# ---------------------------------------------------------------------------
# resampling

def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    """Continuous source coordinates of the output voxel centers along one axis."""
    ratio = n_in / n_out
    return (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5


def _scaled_spacing(spacing: Spacing3, in_shape: Shape3, out_shape: Shape3) -> Spacing3:
    return tuple(s * n_in / n_out for s, n_in, n_out in zip(spacing, in_shape, out_shape))


def _linear_interp_axis(data: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = data.shape[axis]
    c = np.clip(_axis_coords(n_out, n_in), 0.0, n_in - 1.0)
    if n_in == 1:
        return np.take(data, np.zeros(n_out, dtype=np.intp), axis=axis)
    i0 = np.clip(np.floor(c).astype(np.intp), 0, n_in - 2)
    f = c - i0
    shape = [1, 1, 1]
    shape[axis] = n_out
    f = f.reshape(shape)
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i0 + 1, axis=axis)
    return a * (1.0 - f) + b * f


def resample_image(v: Volume, target_shape) -> Volume:
    """Trilinear resample to target_shape (voxel-center mapping, edge clamp)."""
    target_shape = _check_shape3(target_shape)
    out = v.data.astype(np.float64)
    for axis in range(3):
        # equal-size axes stay untouched so identity resampling is bitwise exact
        if target_shape[axis] != out.shape[axis]:
            out = _linear_interp_axis(out, target_shape[axis], axis)
    return Volume(out.astype(np.float32), _scaled_spacing(v.spacing, v.shape, target_shape))


def _nearest_index_axis(n_out: int, n_in: int) -> np.ndarray:
    c = np.clip(_axis_coords(n_out, n_in), 0.0, n_in - 1.0)
    return np.clip(np.floor(c + 0.5).astype(np.intp), 0, n_in - 1)


def resample_label(l: LabelMap, target_shape) -> LabelMap:
    """Nearest-neighbor resample; never introduces new class ids."""
    target_shape = _check_shape3(target_shape)
    iz = _nearest_index_axis(target_shape[0], l.shape[0])
    iy = _nearest_index_axis(target_shape[1], l.shape[1])
    ix = _nearest_index_axis(target_shape[2], l.shape[2])
    data = l.data[np.ix_(iz, iy, ix)]
    return LabelMap(data, _scaled_spacing(l.spacing, l.shape, target_shape), l.num_classes)


# ---------------------------------------------------------------------------
# intensity normalization

def compute_foreground_stats(cases: list[tuple[Volume, LabelMap]]) -> NormStats:
    """Pool the intensities of voxels with label > 0 across all cases and
    derive 0.5/99.5 clip percentiles plus global mean and std."""
    pools = []
    for vol, lab in cases:
        if vol.shape != lab.shape:
            raise ValueError(f"volume/label shape mismatch: {vol.shape} vs {lab.shape}")
        fg = vol.data[lab.data > 0]
        if fg.size:
            pools.append(fg.astype(np.float64))
    if not pools:
        raise EmptyForegroundError("no foreground voxels in any case")
    pooled = np.concatenate(pools)
    clip_lo, clip_hi = np.percentile(pooled, [0.5, 99.5])
    std = max(float(pooled.std()), STD_FLOOR)
    return NormStats(float(clip_lo), float(clip_hi), float(pooled.mean()), std)


def clip_and_normalize(v: Volume, s: NormStats) -> Volume:
    """(clamp(v, clip_lo, clip_hi) - mean) / std, elementwise."""
    if s.std <= 0:
        raise ValueError("std must be positive")
    out = (np.clip(v.data.astype(np.float64), s.clip_lo, s.clip_hi) - s.mean) / s.std
    return Volume(out.astype(np.float32), v.spacing)


# ---------------------------------------------------------------------------
# boxes

def bbox_of_foreground(l: LabelMap, margin_fraction: float = 0.0) -> BBox | None:
    """Tightest box around voxels with label > 0, expanded per axis by
    margin_fraction of the box extent and clamped to the frame.

    Returns None when there is no foreground.
    """
    if margin_fraction < 0:
        raise ValueError("margin_fraction must be >= 0")
    fg = l.data > 0
    if not fg.any():
        return None
    lo, hi = [], []
    for axis in range(3):
        proj = fg.any(axis=tuple(a for a in range(3) if a != axis))
        idx = np.flatnonzero(proj)
        a, b = int(idx[0]), int(idx[-1]) + 1
        pad = int(round(margin_fraction * (b - a)))
        lo.append(max(0, a - pad))
        hi.append(min(l.shape[axis], b + pad))
    return BBox(tuple(lo), tuple(hi), l.shape)


def scale_bbox(b: BBox, from_shape, to_shape) -> BBox:
    """Map a box between grids by the to/from shape ratio (lo floored,
    hi ceiled, clamped). Never empties a non-empty box."""
    from_shape = _check_shape3(from_shape)
    to_shape = _check_shape3(to_shape)
    lo, hi = [], []
    for l, h, nf, nt in zip(b.lo, b.hi, from_shape, to_shape):
        r = nt / nf
        lo.append(max(0, int(np.floor(l * r))))
        hi.append(min(nt, int(np.ceil(h * r))))
    return BBox(tuple(lo), tuple(hi), to_shape)


def crop(x: Volume | LabelMap, b: BBox):
    """Copy the voxels inside b; output shape equals the box extent."""
    if b.frame_shape != x.shape:
        raise ValueError(f"box frame {b.frame_shape} does not match data shape {x.shape}")
    data = x.data[b.slices()].copy()
    if isinstance(x, Volume):
        return Volume(data, x.spacing)
    return LabelMap(data, x.spacing, x.num_classes)


def restore_to_canvas(l: LabelMap, b: BBox, original_shape) -> LabelMap:
    """Paste l into a zero canvas of original_shape at box b, nearest-resampling
    l to the box extent first when shapes differ."""
    original_shape = _check_shape3(original_shape)
    if b.frame_shape != original_shape:
        raise ValueError(f"box frame {b.frame_shape} does not match canvas {original_shape}")
    patch = l if l.shape == b.extent else resample_label(l, b.extent)
    canvas = np.zeros(original_shape, dtype=np.uint8)
    canvas[b.slices()] = patch.data
    return LabelMap(canvas, l.spacing, l.num_classes)


# ---------------------------------------------------------------------------
# SVOL binary format
#
# ASCII header line:  SVOL1 <dtype:f32|u8> <D> <H> <W> <sz> <sy> <sx>\n
# followed by the row-major little-endian payload of D*H*W elements.
# Images are f32, label maps u8.

_SVOL_MAGIC = "SVOL1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("<u1")}


def _svol_header(dtype: str, shape: Shape3, spacing: Spacing3) -> bytes:
    d, h, w = shape
    sz, sy, sx = spacing
    return f"{_SVOL_MAGIC} {dtype} {d} {h} {w} {sz!r} {sy!r} {sx!r}\n".encode("ascii")


def save_volume(v: Volume, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(v.data, dtype=_DTYPES["f32"])
    path.write_bytes(_svol_header("f32", v.shape, v.spacing) + payload.tobytes())


def save_label(l: LabelMap, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(l.data, dtype=_DTYPES["u8"])
    path.write_bytes(_svol_header("u8", l.shape, l.spacing) + payload.tobytes())


def _load_svol(path: str | Path) -> tuple[np.ndarray, Spacing3, str]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing SVOL header line")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 8 or parts[0] != _SVOL_MAGIC:
        raise ValueError(f"{path}: bad SVOL header {parts!r}")
    dtype_tag = parts[1]
    if dtype_tag not in _DTYPES:
        raise ValueError(f"{path}: unknown SVOL dtype {dtype_tag!r}")
    shape = tuple(int(p) for p in parts[2:5])
    spacing = tuple(float(p) for p in parts[5:8])
    dt = _DTYPES[dtype_tag]
    expected = int(np.prod(shape)) * dt.itemsize
    payload = raw[nl + 1:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dt).reshape(shape)
    return data, spacing, dtype_tag


def load_volume(path: str | Path) -> Volume:
    data, spacing, tag = _load_svol(path)
    if tag != "f32":
        raise ValueError(f"{path}: expected f32 image, found {tag}")
    return Volume(data.copy(), spacing)


def load_label(path: str | Path, num_classes: int = 0) -> LabelMap:
    data, spacing, tag = _load_svol(path)
    if tag != "u8":
        raise ValueError(f"{path}: expected u8 label map, found {tag}")
    return LabelMap(data.copy(), spacing, num_classes)
