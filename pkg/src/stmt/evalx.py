"""Accuracy metrics (DSC, NSD), efficiency metrics (runtime, peak memory,
memory-time AUC), challenge-style tolerance flags, and report emission.

The memory sampler reads process-resident bytes; the report header records
which memory source was used, since accelerator-side accounting is not
available in a device-agnostic build.
"""
from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import psutil
from scipy import ndimage

from . import ORGAN_CLASS_IDS, TUMOR_CLASS
from .volcore import LabelMap

DEFAULT_TOLERANCES = (15.0, 4096.0)  # seconds, MB
DEFAULT_NSD_TOLERANCE_MM = 1.0
SAMPLE_INTERVAL_S = 0.1


def dsc(pred: LabelMap, gt: LabelMap, class_id: int) -> float:
    """Dice overlap of one class: 2|P∩G| / (|P|+|G|).

    Both masks empty scores 1.0 so absent structures do not zero aggregates;
    exactly one empty scores 0.0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.data == class_id
    g = gt.data == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def _surface(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels: mask voxels with a 6-neighbor outside the mask
    (the volume border counts as outside)."""
    core = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(3, 1), border_value=0
    )
    return mask & ~core


def nsd(pred: LabelMap, gt: LabelMap, class_id: int, tolerance_mm: float = DEFAULT_NSD_TOLERANCE_MM) -> float:
    """Normalized surface overlap of one class at a distance tolerance in mm.

    Surfaces are 6-neighborhood boundary voxels; distances are exact
    Euclidean in mm. Score = (|S_P within tol of S_G| + |S_G within tol of
    S_P|) / (|S_P| + |S_G|). Both-empty -> 1.0, one-empty -> 0.0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.spacing != gt.spacing:
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    if tolerance_mm <= 0:
        raise ValueError(f"tolerance_mm must be positive, got {tolerance_mm}")
    p = pred.data == class_id
    g = gt.data == class_id
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    sp = _surface(p)
    sg = _surface(g)
    spacing = pred.spacing
    dist_to_sg = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dist_to_sp = ndimage.distance_transform_edt(~sp, sampling=spacing)
    near_p = int((dist_to_sg[sp] <= tolerance_mm).sum())
    near_g = int((dist_to_sp[sg] <= tolerance_mm).sum())
    return (near_p + near_g) / (int(sp.sum()) + int(sg.sum()))


# ---------------------------------------------------------------------------
# efficiency profiling

@dataclass(frozen=True)
class MemTimeCurve:
    """Memory samples over the lifetime of one profiled case."""

    samples: tuple[tuple[float, float], ...]  # (seconds since start, MB)
    case_id: str = ""

    def __post_init__(self):
        ts = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("sample times must be strictly increasing")
        if any(m < 0 for _, m in self.samples):
            raise ValueError("memory samples must be non-negative")

    @property
    def max_mem_mb(self) -> float:
        return max(m for _, m in self.samples) if self.samples else 0.0


def auc_mem_time(c: MemTimeCurve) -> float:
    """Trapezoidal integral of memory over time, in MB*s."""
    if len(c.samples) < 2:
        raise ValueError("memory-time AUC needs at least 2 samples")
    t = np.array([s[0] for s in c.samples])
    m = np.array([s[1] for s in c.samples])
    return float(np.trapezoid(m, t))


class ProfiledFailure(RuntimeError):
    """Profiled work raised; carries the partial timing evidence."""

    def __init__(self, runtime_s: float, curve: MemTimeCurve):
        super().__init__(f"profiled work failed after {runtime_s:.3f}s")
        self.runtime_s = runtime_s
        self.curve = curve


def _process_mem_mb() -> float:
    return psutil.Process().memory_info().rss / (1024.0 * 1024.0)


def profile_case(work, case_id: str = "", interval_s: float = SAMPLE_INTERVAL_S,
                 mem_probe=_process_mem_mb) -> tuple[float, MemTimeCurve]:
    """Run work() under a concurrent memory sampler.

    Returns (wall-clock runtime, curve). The curve always includes a sample
    at start and at completion. If work raises, the exception is re-raised
    as the cause of a ProfiledFailure that carries runtime and the
    truncated curve.
    """
    samples: list[tuple[float, float]] = []
    t0 = time.perf_counter()

    def _append(t: float, mem: float) -> None:
        if samples and t <= samples[-1][0]:
            t = samples[-1][0] + 1e-9
        samples.append((t, mem))

    _append(0.0, mem_probe())
    stop = threading.Event()

    def _sampler():
        while not stop.wait(interval_s):
            _append(time.perf_counter() - t0, mem_probe())

    thread = threading.Thread(target=_sampler, daemon=True)
    thread.start()
    try:
        work()
    except BaseException as e:
        runtime = time.perf_counter() - t0
        stop.set()
        thread.join()
        _append(runtime, mem_probe())
        raise ProfiledFailure(runtime, MemTimeCurve(tuple(samples), case_id)) from e
    runtime = time.perf_counter() - t0
    stop.set()
    thread.join()
    _append(runtime, mem_probe())
    return runtime, MemTimeCurve(tuple(samples), case_id)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class CaseResult:
    case_id: str
    dsc: dict[int, float]  # class id -> score
    nsd: dict[int, float]
    runtime_s: float
    max_mem_mb: float
    auc_mb_s: float


@dataclass
class EvalReport:
    rows: list[CaseResult]
    class_ids: list[int]
    time_tolerance_s: float
    mem_tolerance_mb: float
    nsd_tolerance_mm: float
    mem_source: str
    class_mean: dict[str, dict[int, float]] = field(default_factory=dict)
    class_sd: dict[str, dict[int, float]] = field(default_factory=dict)
    organ_mean: dict[str, float] = field(default_factory=dict)
    tumor_mean: dict[str, float] = field(default_factory=dict)
    time_flags: list[str] = field(default_factory=list)
    mem_flags: list[str] = field(default_factory=list)


def build_report(
    rows: list[CaseResult],
    tolerances: tuple[float, float] = DEFAULT_TOLERANCES,
    nsd_tolerance_mm: float = DEFAULT_NSD_TOLERANCE_MM,
    mem_source: str = "process-rss",
) -> EvalReport:
    """Aggregate per-case results and flag tolerance violations
    (runtime > 15 s, memory > 4096 MB by default)."""
    class_ids = sorted({c for r in rows for c in r.dsc})
    report = EvalReport(
        rows=list(rows),
        class_ids=class_ids,
        time_tolerance_s=tolerances[0],
        mem_tolerance_mb=tolerances[1],
        nsd_tolerance_mm=nsd_tolerance_mm,
        mem_source=mem_source,
    )
    for metric in ("dsc", "nsd"):
        means, sds = {}, {}
        for c in class_ids:
            vals = [getattr(r, metric).get(c) for r in rows if c in getattr(r, metric)]
            means[c] = float(np.mean(vals)) if vals else float("nan")
            sds[c] = float(np.std(vals)) if vals else float("nan")
        report.class_mean[metric] = means
        report.class_sd[metric] = sds
        organ_vals = [means[c] for c in class_ids if c in ORGAN_CLASS_IDS]
        report.organ_mean[metric] = float(np.mean(organ_vals)) if organ_vals else float("nan")
        report.tumor_mean[metric] = means.get(TUMOR_CLASS, float("nan"))
    report.time_flags = [r.case_id for r in rows if r.runtime_s > tolerances[0]]
    report.mem_flags = [r.case_id for r in rows if r.max_mem_mb > tolerances[1]]
    return report


def report_to_csv(report: EvalReport, path: str | Path) -> None:
    """Write the per-case table; column order is stable and documented:
    case_id, dsc_<c>..., nsd_<c>..., runtime_s, max_mem_mb, auc_mb_s,
    time_flag, mem_flag."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = (
        ["case_id"]
        + [f"dsc_{c}" for c in report.class_ids]
        + [f"nsd_{c}" for c in report.class_ids]
        + ["runtime_s", "max_mem_mb", "auc_mb_s", "time_flag", "mem_flag"]
    )
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in report.rows:
            writer.writerow(
                [r.case_id]
                + [repr(r.dsc.get(c, float("nan"))) for c in report.class_ids]
                + [repr(r.nsd.get(c, float("nan"))) for c in report.class_ids]
                + [repr(r.runtime_s), repr(r.max_mem_mb), repr(r.auc_mb_s),
                   int(r.case_id in report.time_flags), int(r.case_id in report.mem_flags)]
            )


def format_report_table(report: EvalReport, class_names: dict[int, str] | None = None) -> str:
    """Human-readable per-class table plus efficiency summary."""
    class_names = class_names or {}
    lines = [
        f"NSD tolerance: {report.nsd_tolerance_mm} mm | memory source: {report.mem_source}",
        f"tolerances: {report.time_tolerance_s} s / {report.mem_tolerance_mb} MB",
        f"{'Target':<24}{'DSC':>14}{'NSD':>14}",
    ]
    for c in report.class_ids:
        name = class_names.get(c, f"class {c}")
        lines.append(
            f"{name:<24}"
            f"{report.class_mean['dsc'][c]:>8.4f} ±{report.class_sd['dsc'][c]:<5.3f}"
            f"{report.class_mean['nsd'][c]:>8.4f} ±{report.class_sd['nsd'][c]:<5.3f}"
        )
    lines.append(
        f"{'Organ mean':<24}{report.organ_mean['dsc']:>8.4f}      {report.organ_mean['nsd']:>8.4f}"
    )
    if not np.isnan(report.tumor_mean["dsc"]):
        lines.append(
            f"{'Tumor':<24}{report.tumor_mean['dsc']:>8.4f}      {report.tumor_mean['nsd']:>8.4f}"
        )
    if report.rows:
        rt = [r.runtime_s for r in report.rows]
        mm = [r.max_mem_mb for r in report.rows]
        au = [r.auc_mb_s for r in report.rows]
        lines.append(
            f"runtime mean {np.mean(rt):.2f} s | max mem mean {np.mean(mm):.1f} MB "
            f"| AUC mean {np.mean(au):.1f} MB*s"
        )
    if report.time_flags:
        lines.append(f"time tolerance exceeded: {', '.join(report.time_flags)}")
    if report.mem_flags:
        lines.append(f"memory tolerance exceeded: {', '.join(report.mem_flags)}")
    return "\n".join(lines) + "\n"


def render_report_figures(
    report: EvalReport,
    out_dir: str | Path,
    curves: list[MemTimeCurve] | None = None,
    class_names: dict[int, str] | None = None,
) -> list[Path]:
    """Render the report's figures as PNG files next to the CSV output.

    Produces a per-class accuracy bar chart, a per-case efficiency chart,
    and (when curves are given) the memory-time curves with their AUC.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_names = class_names or {}
    written = []

    if report.class_ids:
        fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(report.class_ids)), 4))
        xs = np.arange(len(report.class_ids))
        names = [class_names.get(c, f"class {c}") for c in report.class_ids]
        for off, metric in ((-0.2, "dsc"), (0.2, "nsd")):
            vals = [report.class_mean[metric][c] for c in report.class_ids]
            errs = [report.class_sd[metric][c] for c in report.class_ids]
            ax.bar(xs + off, vals, width=0.4, yerr=errs, capsize=3, label=metric.upper())
        ax.set_xticks(xs, names, rotation=45, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("score")
        ax.legend()
        ax.set_title("Per-class accuracy")
        fig.tight_layout()
        p = out_dir / "metrics_by_class.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)

    if report.rows:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        ids = [r.case_id for r in report.rows]
        axes[0].bar(ids, [r.runtime_s for r in report.rows])
        axes[0].axhline(report.time_tolerance_s, color="red", linestyle="--",
                        label=f"{report.time_tolerance_s:g} s")
        axes[0].set_ylabel("runtime (s)")
        axes[0].legend()
        axes[1].bar(ids, [r.max_mem_mb for r in report.rows])
        axes[1].axhline(report.mem_tolerance_mb, color="red", linestyle="--",
                        label=f"{report.mem_tolerance_mb:g} MB")
        axes[1].set_ylabel(f"max memory (MB, {report.mem_source})")
        axes[1].legend()
        for ax in axes:
            ax.tick_params(axis="x", rotation=90)
        fig.suptitle("Per-case efficiency")
        fig.tight_layout()
        p = out_dir / "efficiency.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)

    if curves:
        fig, ax = plt.subplots(figsize=(7, 4))
        for c in curves:
            t = [s[0] for s in c.samples]
            m = [s[1] for s in c.samples]
            ax.plot(t, m, label=f"{c.case_id} (AUC {auc_mem_time(c):.0f} MB*s)")
        ax.set_xlabel("time (s)")
        ax.set_ylabel(f"memory (MB, {report.mem_source})")
        ax.legend(fontsize=7)
        ax.set_title("Memory over time")
        fig.tight_layout()
        p = out_dir / "memory_time_curves.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written
