"""Training machinery: compound dice + cross-entropy loss, the weighted
three-pool organ objective and two-term tumor objective, online
augmentation, balanced batch composition, the self-training organ loop,
and the mean-teacher tumor loop.
"""
from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import TrainingDivergedError
from .labelops import (
    PartialLabel,
    binarize_foreground,
    correct_pseudo_label,
    correct_tumor_pseudo,
    mask_organs_out,
    mask_tumor_out,
)
from .nets import ModelHandle, ParamVector, ema_update, save_checkpoint
from .phantom import CaseRecord
from .volcore import (
    LabelMap,
    NormStats,
    Volume,
    clip_and_normalize,
    resample_image,
    resample_label,
    save_label,
)

DICE_EPS = 1e-5


class SampleKind(str, Enum):
    LABELED = "LABELED"
    CPL = "CPL"  # corrected pseudo-label
    PL = "PL"  # raw pseudo-label
    TUMOR_ANNOTATED = "TUMOR_ANNOTATED"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    iters_per_epoch: int = 250
    batch_size_stage1: int = 2
    batch_size_organ: int = 3
    batch_size_tumor: int = 2
    shape_stage1: tuple[int, int, int] = (128, 128, 128)
    shape_organ: tuple[int, int, int] = (192, 192, 192)
    shape_tumor: tuple[int, int, int] = (192, 192, 192)
    lr0: float = 0.01
    momentum: float = 0.99
    lambda_cpl: float = 1.0  # weight of the corrected-pseudo-label term
    lambda_pl: float = 0.5  # weight of the raw-pseudo-label term
    lambda_tumor: float = 1.0  # weight of the tumor pseudo-supervision term
    ema_decay: float = 0.99
    augment_strength: float = 1.0
    num_workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.iters_per_epoch) < 1:
            raise ValueError("epochs and iters_per_epoch must be >= 1")
        if min(self.batch_size_stage1, self.batch_size_organ, self.batch_size_tumor) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.batch_size_organ % 3 != 0:
            raise ValueError("organ batch size must be divisible by 3 (one slot per supervision type)")
        if any(l < 0 for l in (self.lambda_cpl, self.lambda_pl, self.lambda_tumor)):
            raise ValueError("loss weights must be >= 0")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ValueError("ema_decay must be in [0, 1]")


@dataclass
class TrainSample:
    """One preprocessed training example at the task input shape."""

    image: np.ndarray  # float32 (D, H, W), already normalized
    target: np.ndarray  # uint8 (D, H, W)
    kind: SampleKind
    case_id: str

    def __post_init__(self):
        if self.image.shape != self.target.shape:
            raise ValueError(f"{self.case_id}: image/target shapes differ")


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from lr0 at epoch 0 to 0 at the final epoch."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------------------
# losses

def _as_target(target, device=None) -> torch.Tensor:
    if isinstance(target, LabelMap):
        target = target.data
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(np.ascontiguousarray(target))
    return target.long()


def dice_ce_loss(logits: torch.Tensor, target, num_classes: int, return_parts: bool = False):
    """Soft dice over the foreground classes plus voxel-mean cross-entropy.

    dice term: 1 - mean_c 2*sum(p_c*g_c) / (sum(p_c) + sum(g_c) + eps)
    over classes c = 1..num_classes-1.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    g = _as_target(target)
    if logits.shape[0] != num_classes or logits.shape[1:] != g.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match target {tuple(g.shape)}")
    p = torch.softmax(logits, dim=0)
    onehot = torch.nn.functional.one_hot(g, num_classes).movedim(-1, 0).to(p.dtype)
    fg_p = p[1:].flatten(1)
    fg_g = onehot[1:].flatten(1)
    dice_per_class = 2.0 * (fg_p * fg_g).sum(1) / (fg_p.sum(1) + fg_g.sum(1) + DICE_EPS)
    dice = 1.0 - dice_per_class.mean()
    ce = torch.nn.functional.cross_entropy(logits[None], g[None])
    loss = dice + ce
    if return_parts:
        return loss, dice, ce
    return loss


def organ_loss(items, cfg: TrainConfig):
    """Weighted three-pool objective: L = L_labeled + l1*L_cpl + l2*L_pl.

    items: iterable of (logits, target, kind) holding the same number of
    LABELED, CPL and PL entries. Returns (total, components) so the parts
    can be logged.
    """
    groups: dict[SampleKind, list[torch.Tensor]] = {}
    for logits, target, kind in items:
        kind = SampleKind(kind)
        groups.setdefault(kind, []).append(dice_ce_loss(logits, target, logits.shape[0]))
    expected = {SampleKind.LABELED, SampleKind.CPL, SampleKind.PL}
    if set(groups) != expected:
        missing = sorted(k.value for k in expected - set(groups))
        raise ValueError(f"organ batch is missing supervision kinds: {missing}")
    parts = {k: torch.stack(v).mean() for k, v in groups.items()}
    total = (
        parts[SampleKind.LABELED]
        + cfg.lambda_cpl * parts[SampleKind.CPL]
        + cfg.lambda_pl * parts[SampleKind.PL]
    )
    return total, {
        "l_labeled": parts[SampleKind.LABELED],
        "l_cpl": parts[SampleKind.CPL],
        "l_pl": parts[SampleKind.PL],
    }


def tumor_loss(student_logits: torch.Tensor, annotated_target, corrected_pseudo, cfg: TrainConfig):
    """Two-term tumor objective: L = L_annotated + lambda * L_corrected."""
    l_tl = dice_ce_loss(student_logits, annotated_target, student_logits.shape[0])
    l_cpl = dice_ce_loss(student_logits, corrected_pseudo, student_logits.shape[0])
    total = l_tl + cfg.lambda_tumor * l_cpl
    return total, {"l_annotated": l_tl, "l_cpl": l_cpl}


# ---------------------------------------------------------------------------
# augmentation

def _affine_pair(image, label, matrix, offset):
    out_img = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="nearest")
    out_lab = ndimage.affine_transform(label, matrix, offset=offset, order=0, mode="nearest")
    return out_img, out_lab


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator, strength: float = 1.0):
    """Online augmentation applied jointly to an image/label pair.

    Spatial transforms use trilinear interpolation on the image and nearest
    on the label, so no new class ids can appear. strength scales every
    application probability; 0 is the identity.
    """
    s = float(np.clip(strength, 0.0, 2.0))
    img = image.astype(np.float32, copy=True)
    lab = label.copy()
    if s == 0.0:
        return img, lab
    shape = np.array(img.shape, dtype=np.float64)

    # axis-aligned quarter-turn about z (exact voxel permutation)
    if img.shape[1] == img.shape[2] and rng.random() < 0.2 * s:
        k = int(rng.integers(1, 4))
        img = np.rot90(img, k, axes=(1, 2)).copy()
        lab = np.rot90(lab, k, axes=(1, 2)).copy()

    if rng.random() < 0.2 * s:
        angle = float(rng.uniform(-15.0, 15.0))
        img = ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
        lab = ndimage.rotate(lab, angle, axes=(1, 2), reshape=False, order=0, mode="nearest")

    if rng.random() < 0.2 * s:
        factor = float(rng.uniform(0.9, 1.1))
        center = (shape - 1) / 2.0
        matrix = np.diag([1.0 / factor] * 3)
        offset = center - matrix @ center
        img, lab = _affine_pair(img, lab, matrix, offset)

    if rng.random() < 0.15 * s:
        amp = float(rng.uniform(0.5, 2.0))
        coords = np.indices(img.shape, dtype=np.float64)
        disp = np.stack(
            [ndimage.gaussian_filter(rng.standard_normal(img.shape), 3.0) for _ in range(3)]
        )
        disp *= amp / (np.abs(disp).max() + 1e-12)
        warped = coords + disp
        img = ndimage.map_coordinates(img, warped, order=1, mode="nearest").astype(np.float32)
        lab = ndimage.map_coordinates(lab, warped, order=0, mode="nearest")

    if rng.random() < 0.15 * s:
        img = img + rng.normal(0.0, float(rng.uniform(0.01, 0.1)), img.shape)

    if rng.random() < 0.1 * s:
        img = ndimage.gaussian_filter(img, float(rng.uniform(0.5, 1.0)))

    if rng.random() < 0.15 * s:
        img = img + float(rng.uniform(-0.2, 0.2))

    if rng.random() < 0.15 * s:
        mean = img.mean()
        img = mean + (img - mean) * float(rng.uniform(0.75, 1.25))

    if rng.random() < 0.1 * s:
        factor = float(rng.uniform(1.25, 2.0))
        small = [max(1, int(round(n / factor))) for n in img.shape]
        down = resample_image(Volume(img), small)
        img = resample_image(down, img.shape).data

    if rng.random() < 0.15 * s:
        gamma = float(rng.uniform(0.7, 1.5))
        lo, hi = img.min(), img.max()
        if hi > lo:
            img = ((img - lo) / (hi - lo)) ** gamma * (hi - lo) + lo

    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab)


# ---------------------------------------------------------------------------
# batch composition

def _compose_batches(pools: dict[SampleKind, list], per_kind: int, rng: np.random.Generator):
    """Endless stream of batches holding per_kind uniform draws of each kind."""
    kinds = sorted(pools, key=lambda k: k.value)
    while True:
        batch = []
        for kind in kinds:
            pool = pools[kind]
            for _ in range(per_kind):
                batch.append(pool[int(rng.integers(len(pool)))])
        yield batch


def compose_organ_batches(full_cases, cpl_cases, pl_cases, cfg: TrainConfig, rng: np.random.Generator):
    """Batches with the three supervision types in equal proportions."""
    for name, pool in (("full", full_cases), ("cpl", cpl_cases), ("pl", pl_cases)):
        if not pool:
            raise ValueError(f"organ batch composition needs a non-empty '{name}' pool")
    pools = {
        SampleKind.LABELED: list(full_cases),
        SampleKind.CPL: list(cpl_cases),
        SampleKind.PL: list(pl_cases),
    }
    return _compose_batches(pools, cfg.batch_size_organ // 3, rng)


# ---------------------------------------------------------------------------
# sample preparation

def prepare_image(record: CaseRecord, root, stats: NormStats, shape) -> np.ndarray:
    vol = record.load_image(root)
    return resample_image(clip_and_normalize(vol, stats), shape).data


def _resampled_label(record: CaseRecord, root, shape) -> LabelMap:
    return resample_label(record.load_label(root), shape)


def prepare_stage1_sample(record, root, stats, shape) -> TrainSample:
    target = binarize_foreground(_resampled_label(record, root, shape))
    return TrainSample(prepare_image(record, root, stats, shape), target.data,
                       SampleKind.LABELED, record.case_id)


def prepare_organ_sample(record, root, stats, shape, kind=SampleKind.LABELED) -> TrainSample:
    target = mask_tumor_out(_resampled_label(record, root, shape))
    return TrainSample(prepare_image(record, root, stats, shape), target.data, kind, record.case_id)


def prepare_tumor_sample(record, root, stats, shape) -> TrainSample:
    target = mask_organs_out(_resampled_label(record, root, shape))
    return TrainSample(prepare_image(record, root, stats, shape), target.data,
                       SampleKind.TUMOR_ANNOTATED, record.case_id)


def build_cpl_target(pseudo: LabelMap, record: CaseRecord, root, shape) -> LabelMap:
    """Static corrected pseudo-label for an organ student target."""
    released = mask_tumor_out(_resampled_label(record, root, shape))
    partial = PartialLabel(released, frozenset(record.annotated_organ_set),
                           tumor_annotated=False)
    return correct_pseudo_label(mask_tumor_out(pseudo), partial)


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainResult:
    handle: ModelHandle
    epoch_losses: list[float]
    log_path: Path | None = None
    final_ckpt: Path | None = None
    best_ckpt: Path | None = None
    teacher: ModelHandle | None = None
    teacher_ckpt: Path | None = None
    student_history: list[ParamVector] = field(default_factory=list)


class _RunLog:
    def __init__(self, path: Path | None, columns: list[str]):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(columns)

    def write(self, row) -> None:
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([repr(v) for v in row])


def _stack_batch(samples: list[TrainSample], rng, strength):
    imgs, tgts = [], []
    for s in samples:
        img, tgt = augment(s.image, s.target, rng, strength)
        imgs.append(img)
        tgts.append(tgt)
    x = torch.from_numpy(np.stack(imgs))[:, None]
    return x, tgts


def _check_finite(loss: torch.Tensor, context: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss during {context}: {loss.item()!r}")


def _finish(handle, cfg, out_dir, label, epoch_losses, log_path, best_state) -> TrainResult:
    result = TrainResult(handle=handle, epoch_losses=epoch_losses, log_path=log_path)
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.final_ckpt = out_dir / f"{label}_final.ckpt"
        save_checkpoint(handle, result.final_ckpt)
        if best_state is not None:
            current = {k: v.detach().clone() for k, v in handle.module.state_dict().items()}
            handle.module.load_state_dict(best_state)
            result.best_ckpt = out_dir / f"{label}_best.ckpt"
            save_checkpoint(handle, result.best_ckpt)
            handle.module.load_state_dict(current)
    return result


def train_supervised(
    model: ModelHandle,
    samples: list[TrainSample],
    cfg: TrainConfig,
    *,
    batch_size: int,
    out_dir: str | Path | None = None,
    label: str = "supervised",
) -> TrainResult:
    """Plain supervised training with augmentation, SGD + nesterov momentum
    and a cosine-annealed learning rate."""
    if not samples:
        raise ValueError("train_supervised needs at least one sample")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    model.set_mode("train")
    opt = torch.optim.SGD(model.module.parameters(), lr=cfg.lr0,
                          momentum=cfg.momentum, nesterov=True)
    log = _RunLog(Path(out_dir) / f"{label}_log.csv" if out_dir else None,
                  ["iter", "lr", "loss"])
    num_classes = model.spec.num_classes
    epoch_losses, best_state, best_loss = [], None, float("inf")
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        running = 0.0
        for _ in range(cfg.iters_per_epoch):
            batch = [samples[int(rng.integers(len(samples)))] for _ in range(batch_size)]
            x, targets = _stack_batch(batch, rng, cfg.augment_strength)
            logits = model.module(x)
            loss = torch.stack(
                [dice_ce_loss(logits[i], targets[i], num_classes) for i in range(len(batch))]
            ).mean()
            _check_finite(loss, f"{label} iter {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.write([step, lr, loss.item()])
            running += loss.item()
            step += 1
        mean_loss = running / cfg.iters_per_epoch
        epoch_losses.append(mean_loss)
        if mean_loss < best_loss:
            best_loss = mean_loss
            best_state = {k: v.detach().clone() for k, v in model.module.state_dict().items()}
    return _finish(model, cfg, out_dir, label, epoch_losses, log.path, best_state)


def generate_pseudo_labels(
    teacher,
    cases: list[CaseRecord],
    root,
    stats: NormStats,
    shape,
    out_dir: str | Path,
    teacher_id: str = "",
) -> tuple[dict[str, Path], dict[str, str]]:
    """Argmax teacher predictions at the task shape, stored per case with a
    provenance record. Per-case I/O failures are collected, not fatal."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if hasattr(teacher, "set_mode"):
        teacher.set_mode("eval")
    written: dict[str, Path] = {}
    failures: dict[str, str] = {}
    provenance = {}
    for record in cases:
        try:
            img = prepare_image(record, root, stats, shape)
            logits = teacher.predict_logits(img)
            pseudo = LabelMap(np.argmax(logits, axis=0).astype(np.uint8),
                              (1.0, 1.0, 1.0), teacher.num_classes)
            path = out_dir / f"{record.case_id}.svol"
            save_label(pseudo, path)
            written[record.case_id] = path
            provenance[record.case_id] = {"teacher": teacher_id or f"seed={getattr(teacher, 'seed', 0)}"}
        except (OSError, ValueError) as e:
            failures[record.case_id] = str(e)
    (out_dir / "provenance.json").write_text(json.dumps(provenance, sort_keys=True, indent=1) + "\n")
    return written, failures


def train_student_organ(
    model: ModelHandle,
    full_samples: list[TrainSample],
    cpl_samples: list[TrainSample],
    pl_samples: list[TrainSample],
    cfg: TrainConfig,
    *,
    out_dir: str | Path | None = None,
    label: str = "organ_student",
) -> TrainResult:
    """Self-training student over labeled, corrected-pseudo and raw-pseudo
    pools with the weighted three-term objective. The raw-pseudo pool may be
    empty, in which case batches hold the two remaining kinds."""
    pools = {SampleKind.LABELED: full_samples, SampleKind.CPL: cpl_samples}
    if pl_samples:
        pools[SampleKind.PL] = pl_samples
    for kind, pool in pools.items():
        if not pool:
            raise ValueError(f"organ student needs a non-empty '{kind.value}' pool")
    per_kind = cfg.batch_size_organ // 3
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    batches = _compose_batches(pools, per_kind, rng)
    model.set_mode("train")
    opt = torch.optim.SGD(model.module.parameters(), lr=cfg.lr0,
                          momentum=cfg.momentum, nesterov=True)
    log = _RunLog(Path(out_dir) / f"{label}_log.csv" if out_dir else None,
                  ["iter", "lr", "loss", "l_labeled", "l_cpl", "l_pl"])
    num_classes = model.spec.num_classes
    epoch_losses, best_state, best_loss = [], None, float("inf")
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        running = 0.0
        for _ in range(cfg.iters_per_epoch):
            batch = next(batches)
            x, targets = _stack_batch(batch, rng, cfg.augment_strength)
            logits = model.module(x)
            by_kind: dict[SampleKind, list[torch.Tensor]] = {}
            for i, sample in enumerate(batch):
                by_kind.setdefault(sample.kind, []).append(
                    dice_ce_loss(logits[i], targets[i], num_classes)
                )
            parts = {k: torch.stack(v).mean() for k, v in by_kind.items()}
            loss = parts[SampleKind.LABELED] + cfg.lambda_cpl * parts[SampleKind.CPL]
            if SampleKind.PL in parts:
                loss = loss + cfg.lambda_pl * parts[SampleKind.PL]
            _check_finite(loss, f"{label} iter {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.write([
                step, lr, loss.item(),
                parts[SampleKind.LABELED].item(),
                parts[SampleKind.CPL].item(),
                parts[SampleKind.PL].item() if SampleKind.PL in parts else float("nan"),
            ])
            running += loss.item()
            step += 1
        mean_loss = running / cfg.iters_per_epoch
        epoch_losses.append(mean_loss)
        if mean_loss < best_loss:
            best_loss = mean_loss
            best_state = {k: v.detach().clone() for k, v in model.module.state_dict().items()}
    return _finish(model, cfg, out_dir, label, epoch_losses, log.path, best_state)


def train_tumor_mean_teacher(
    student: ModelHandle,
    samples: list[TrainSample],
    cfg: TrainConfig,
    *,
    out_dir: str | Path | None = None,
    label: str = "tumor_mt",
    record_history: bool = False,
) -> TrainResult:
    """Mean-teacher tumor training with real-time pseudo-label correction.

    Each iteration the EMA teacher predicts, annotated voxels overwrite the
    prediction, the student optimizes the two-term objective, and the
    teacher is pulled toward the student by exponential moving average.
    """
    if not samples:
        raise ValueError("mean-teacher training needs at least one sample")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    student.set_mode("train")
    teacher = ModelHandle(spec=student.spec, module=copy.deepcopy(student.module),
                          seed=student.seed)
    teacher.set_mode("eval")
    opt = torch.optim.SGD(student.module.parameters(), lr=cfg.lr0,
                          momentum=cfg.momentum, nesterov=True)
    log = _RunLog(Path(out_dir) / f"{label}_log.csv" if out_dir else None,
                  ["iter", "lr", "loss", "l_annotated", "l_cpl"])
    epoch_losses, best_state, best_loss = [], None, float("inf")
    history: list[ParamVector] = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        running = 0.0
        for _ in range(cfg.iters_per_epoch):
            batch = [samples[int(rng.integers(len(samples)))] for _ in range(cfg.batch_size_tumor)]
            x, targets = _stack_batch(batch, rng, cfg.augment_strength)
            with torch.no_grad():
                teacher_pred = teacher.module(x).argmax(dim=1).to(torch.uint8).numpy()
            corrected = []
            for i in range(len(batch)):
                pred_map = LabelMap(teacher_pred[i], (1.0, 1.0, 1.0), 2)
                ann_map = LabelMap(targets[i], (1.0, 1.0, 1.0), 2)
                corrected.append(correct_tumor_pseudo(pred_map, ann_map, annotated=True).data)
            logits = student.module(x)
            losses, l_ann_acc, l_cpl_acc = [], [], []
            for i in range(len(batch)):
                total, parts = tumor_loss(logits[i], targets[i], corrected[i], cfg)
                losses.append(total)
                l_ann_acc.append(parts["l_annotated"])
                l_cpl_acc.append(parts["l_cpl"])
            loss = torch.stack(losses).mean()
            _check_finite(loss, f"{label} iter {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            student_pv = ParamVector.from_module(student.module)
            teacher_pv = ema_update(ParamVector.from_module(teacher.module), student_pv,
                                    cfg.ema_decay)
            teacher.load_parameters(teacher_pv)
            if record_history:
                history.append(student_pv)
            log.write([step, lr, loss.item(),
                       torch.stack(l_ann_acc).mean().item(),
                       torch.stack(l_cpl_acc).mean().item()])
            running += loss.item()
            step += 1
        mean_loss = running / cfg.iters_per_epoch
        epoch_losses.append(mean_loss)
        if mean_loss < best_loss:
            best_loss = mean_loss
            best_state = {k: v.detach().clone() for k, v in student.module.state_dict().items()}
    result = _finish(student, cfg, out_dir, label, epoch_losses, log.path, best_state)
    result.teacher = teacher
    result.student_history = history
    if out_dir is not None:
        result.teacher_ckpt = Path(out_dir) / f"{label}_teacher.ckpt"
        save_checkpoint(teacher, result.teacher_ckpt)
    return result
