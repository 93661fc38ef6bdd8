"""Small residual encoder-decoder segmentation network plus the model
plumbing around it: deterministic construction, flat parameter views,
EMA aggregation, and a versioned binary checkpoint format.

Any object exposing ``num_classes`` and ``predict_logits(volume_data)`` can
stand in for a trained network throughout the inference pipeline, so the
teacher slot accepts arbitrary plug-in predictors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import CheckpointError

_CKPT_MAGIC = "SMCKPT1"
_CKPT_FORMAT = 1
_DTYPE_TAGS = {torch.float32: "f32", torch.float64: "f64"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass(frozen=True)
class NetSpec:
    """Hyperparameters of the residual U-shaped network."""

    in_channels: int = 1
    num_classes: int = 2
    base_channels: int = 16
    num_scales: int = 5  # number of down/up-sampling steps
    blocks_per_scale: int = 1
    max_channels: int = 320

    def __post_init__(self):
        if self.base_channels < 1 or self.num_scales < 1 or self.blocks_per_scale < 1:
            raise ValueError(f"invalid net spec {self}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2**level, self.max_channels)

    @property
    def divisor(self) -> int:
        return 2**self.num_scales


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(cout, affine=True)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(cout, affine=True)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.LeakyReLU(0.01, inplace=True)

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


def _stage(cin: int, cout: int, blocks: int) -> nn.Sequential:
    layers = [ResidualBlock(cin, cout)]
    layers += [ResidualBlock(cout, cout) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class ResUNet(nn.Module):
    """Residual encoder-decoder with strided downsampling, transposed-conv
    upsampling, skip concatenation, and a 1x1x1 classification head."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        s = spec
        self.enc = nn.ModuleList(
            [_stage(s.in_channels, s.channels(0), s.blocks_per_scale)]
        )
        self.down = nn.ModuleList()
        for i in range(1, s.num_scales + 1):
            self.down.append(
                nn.Sequential(
                    nn.Conv3d(s.channels(i - 1), s.channels(i), 3, stride=2, padding=1),
                    nn.InstanceNorm3d(s.channels(i), affine=True),
                    nn.LeakyReLU(0.01, inplace=True),
                )
            )
            self.enc.append(_stage(s.channels(i), s.channels(i), s.blocks_per_scale))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(s.num_scales, 0, -1):
            self.up.append(nn.ConvTranspose3d(s.channels(i), s.channels(i - 1), 2, stride=2))
            self.dec.append(_stage(2 * s.channels(i - 1), s.channels(i - 1), s.blocks_per_scale))
        self.head = nn.Conv3d(s.channels(0), s.num_classes, 1)

    def forward(self, x):
        skips = []
        h = self.enc[0](x)
        for down, enc in zip(self.down, self.enc[1:]):
            skips.append(h)
            h = enc(down(h))
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        return self.head(h)


def _pad_to_divisor(x: torch.Tensor, divisor: int):
    """Symmetric zero-pad the three spatial dims up to a multiple of divisor."""
    pads = []
    for size in reversed(x.shape[-3:]):  # F.pad wants (W, H, D) order
        total = (-size) % divisor
        pads += [total // 2, total - total // 2]
    return F.pad(x, pads), pads


def _crop_back(x: torch.Tensor, pads) -> torch.Tensor:
    (wl, wr), (hl, hr), (dl, dr) = pads[0:2], pads[2:4], pads[4:6]
    d, h, w = x.shape[-3:]
    return x[..., dl : d - dr, hl : h - hr, wl : w - wr]


@dataclass
class ModelHandle:
    """A network plus the spec it was built from and its seed lineage."""

    spec: NetSpec
    module: nn.Module
    seed: int = 0
    mode: str = "train"

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def set_mode(self, mode: str) -> "ModelHandle":
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        self.module.train(mode == "train")
        self.mode = mode
        return self

    def parameters_vector(self) -> "ParamVector":
        return ParamVector.from_module(self.module)

    def load_parameters(self, pv: "ParamVector") -> None:
        self.module.load_state_dict(dict(pv.items()), strict=True)

    def predict_logits(self, volume_data: np.ndarray) -> np.ndarray:
        """Whole-volume forward pass: (D, H, W) float in, (C, D, H, W) out."""
        return forward(self, volume_data)


def build_model(spec: NetSpec, seed: int = 0) -> ModelHandle:
    """Deterministically initialize a network for the given spec and seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = ResUNet(spec)
    return ModelHandle(spec=spec, module=module, seed=seed)


def forward(m: ModelHandle, v) -> np.ndarray:
    """Run one whole volume through the network in eval mode.

    The input is zero-padded to a multiple of 2**num_scales and the logits
    cropped back, so output spatial shape equals input shape.
    """
    data = np.asarray(getattr(v, "data", v), dtype=np.float32)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("volume contains non-finite intensities")
    was_training = m.module.training
    m.module.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(data)[None, None]
            x, pads = _pad_to_divisor(x, m.spec.divisor)
            logits = _crop_back(m.module(x), pads)
    finally:
        m.module.train(was_training)
    return logits[0].numpy()


# ---------------------------------------------------------------------------
# flat parameter view + EMA

class ParamVector:
    """Ordered, name-aligned snapshot of every tensor in a model's state."""

    def __init__(self, tensors: dict[str, torch.Tensor]):
        self._tensors = {k: v.detach().clone() for k, v in tensors.items()}

    @staticmethod
    def from_module(module: nn.Module) -> "ParamVector":
        return ParamVector(module.state_dict())

    def items(self):
        return self._tensors.items()

    def names(self) -> tuple[str, ...]:
        return tuple(self._tensors)

    @property
    def numel(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def as_flat(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.numpy().ravel() for t in self._tensors.values()])

    def allclose(self, other: "ParamVector", rtol=0.0, atol=0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(
            torch.allclose(a, other._tensors[k], rtol=rtol, atol=atol)
            for k, a in self._tensors.items()
        )

    def equal(self, other: "ParamVector") -> bool:
        return self.names() == other.names() and all(
            torch.equal(a, other._tensors[k]) for k, a in self._tensors.items()
        )


def _check_aligned(a: ParamVector, b: ParamVector) -> None:
    if a.names() != b.names():
        raise ValueError("parameter vectors are not index-aligned")
    for k, t in a.items():
        if t.shape != b._tensors[k].shape:
            raise ValueError(f"parameter {k!r} has mismatched shapes {t.shape} vs {b._tensors[k].shape}")


def ema_update(teacher: ParamVector, student: ParamVector, decay: float) -> ParamVector:
    """out_i = decay * teacher_i + (1 - decay) * student_i, per tensor."""
    if not (0.0 <= decay <= 1.0):
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    _check_aligned(teacher, student)
    return ParamVector(
        {k: t * decay + student._tensors[k] * (1.0 - decay) for k, t in teacher.items()}
    )


# ---------------------------------------------------------------------------
# checkpoints
#
# layout:  ASCII line "SMCKPT1 <header_bytes>\n", then a JSON header
# {format, spec, seed, tensors: [{name, shape, dtype}]}, then the raw
# little-endian payload of each tensor in listed order.

def save_checkpoint(m: ModelHandle, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = m.module.state_dict()
    tensors = []
    payload = bytearray()
    for name, t in state.items():
        if t.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        tensors.append({"name": name, "shape": list(t.shape), "dtype": _DTYPE_TAGS[t.dtype]})
        arr = t.detach().numpy()
        payload += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    header = json.dumps(
        {"format": _CKPT_FORMAT, "spec": asdict(m.spec), "seed": m.seed, "tensors": tensors},
        sort_keys=True,
    ).encode("ascii")
    with path.open("wb") as fh:
        fh.write(f"{_CKPT_MAGIC} {len(header)}\n".encode("ascii"))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path: str | Path, expected_spec: NetSpec | None = None) -> ModelHandle:
    """Rebuild the model stored at path; bit-exact with what was saved."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    nl = raw.find(b"\n")
    head = raw[:nl].decode("ascii", errors="replace").split() if nl > 0 else []
    if len(head) != 2 or head[0] != _CKPT_MAGIC or not head[1].isdigit():
        raise CheckpointError(f"{path}: not a checkpoint file")
    header_len = int(head[1])
    header_end = nl + 1 + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[nl + 1 : header_end])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("format") != _CKPT_FORMAT:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format')!r}")
    try:
        spec = NetSpec(**header["spec"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad spec in header: {e}") from e
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"{path}: checkpoint spec {spec} does not match expected {expected_spec}")

    handle = build_model(spec, seed=int(header.get("seed", 0)))
    state = {}
    offset = header_end
    for entry in header["tensors"]:
        dtype = _TAG_DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"{path}: unknown tensor dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * torch.tensor([], dtype=dtype).element_size()
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']!r}")
        np_dtype = np.dtype("<f4") if dtype == torch.float32 else np.dtype("<f8")
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(shape).copy()
        state[entry["name"]] = torch.from_numpy(arr).to(dtype)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    try:
        handle.module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: state does not match architecture: {e}") from e
    return handle
