"""Six-arm supervision study at desk scale.

Arms: naive full supervision over full + partial labels (baseline), full
supervision on fully-labeled organs only (FSO), self-training with partial
labels (ST-partial), self-training with partial and unlabeled data
(ST-partial+unlabeled), fully supervised tumor training (FST), mean-teacher
tumor training (MT), and their combination (StMt). Every arm trains at the
task input shape and is scored against hidden truth on a held-out phantom
set; scores are percent DSC/NSD.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, net_spec_from_section
from .evalx import dsc, nsd
from .hybridtrain import (
    SampleKind,
    TrainSample,
    build_cpl_target,
    generate_pseudo_labels,
    prepare_image,
    prepare_organ_sample,
    prepare_tumor_sample,
    train_student_organ,
    train_supervised,
    train_tumor_mean_teacher,
)
from .labelops import mask_organs_out, mask_tumor_out
from .nets import ModelHandle, build_model
from .phantom import DatasetManifest, SupervisionKind, generate_phantom, load_manifest
from .volcore import LabelMap, NormStats, compute_foreground_stats, load_label, resample_label

ARM_BASELINE = "baseline"
ARM_FSO = "FSO"
ARM_ST_PARTIAL = "ST-partial"
ARM_ST_FULL = "ST-partial+unlabeled"
ARM_FST = "FST"
ARM_MT = "MT"
ARM_STMT = "StMt"
ALL_ARMS = (ARM_BASELINE, ARM_FSO, ARM_ST_PARTIAL, ARM_ST_FULL, ARM_FST, ARM_MT, ARM_STMT)

CSV_COLUMNS = ["arm", "seed", "organ_dsc", "organ_nsd", "tumor_dsc", "tumor_nsd"]


@dataclass(frozen=True)
class ArmScore:
    arm: str
    seed: int
    organ_dsc: float = float("nan")
    organ_nsd: float = float("nan")
    tumor_dsc: float = float("nan")
    tumor_nsd: float = float("nan")


def compute_dataset_stats(manifest: DatasetManifest) -> NormStats:
    """Global foreground statistics over the released labels."""
    pairs = []
    for record in manifest.cases:
        if record.label_path is None:
            continue
        pairs.append((record.load_image(manifest.root), record.load_label(manifest.root)))
    return compute_foreground_stats(pairs)


def _eval_cases(manifest: DatasetManifest, stats: NormStats, shape, num_organs: int):
    """Preprocessed eval images plus organ/tumor truth at the task shape."""
    cases = []
    for record in manifest.cases:
        img = prepare_image(record, manifest.root, stats, shape)
        truth = resample_label(record.load_truth(manifest.root), shape)
        cases.append((record.case_id, img, mask_tumor_out(truth), mask_organs_out(truth)))
    return cases


def _score_organ(handle: ModelHandle, eval_cases, num_organs: int) -> tuple[float, float]:
    handle.set_mode("eval")
    d_all, n_all = [], []
    for _, img, truth_organ, _ in eval_cases:
        pred = LabelMap(np.argmax(handle.predict_logits(img), axis=0).astype(np.uint8),
                        truth_organ.spacing, handle.num_classes)
        for c in range(1, num_organs + 1):
            d_all.append(dsc(pred, truth_organ, c))
            n_all.append(nsd(pred, truth_organ, c))
    return 100.0 * float(np.mean(d_all)), 100.0 * float(np.mean(n_all))


def _score_tumor(handle: ModelHandle, eval_cases) -> tuple[float, float]:
    handle.set_mode("eval")
    d_all, n_all = [], []
    for _, img, _, truth_tumor in eval_cases:
        if not truth_tumor.data.any():
            continue  # cases whose tumor vanished under resampling carry no signal
        pred = LabelMap(np.argmax(handle.predict_logits(img), axis=0).astype(np.uint8),
                        truth_tumor.spacing, 2)
        d_all.append(dsc(pred, truth_tumor, 1))
        n_all.append(nsd(pred, truth_tumor, 1))
    if not d_all:
        return float("nan"), float("nan")
    return 100.0 * float(np.mean(d_all)), 100.0 * float(np.mean(n_all))


def run_ablation(cfg: RunConfig, out_dir: str | Path, seeds: list[int] | None = None) -> list[ArmScore]:
    """Run the full study and leave metrics.csv, table.txt and figures
    under out_dir. Deterministic for a fixed config and seed list."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if seeds is None:
        seeds = [cfg.seed + i for i in range(cfg.ablate.num_seeds)]

    dataset_dir = out_dir / "dataset"
    if (dataset_dir / "manifest.json").is_file():
        manifest = load_manifest(dataset_dir / "manifest.json")
    else:
        manifest = generate_phantom(cfg.phantom, dataset_dir)
    eval_phantom = dataclasses.replace(
        cfg.phantom,
        counts=(cfg.ablate.eval_cases, 0, 0),
        tumor_rate=1.0,
        seed=cfg.ablate.eval_seed,
    )
    eval_dir = out_dir / "evalset"
    if (eval_dir / "manifest.json").is_file():
        eval_manifest = load_manifest(eval_dir / "manifest.json")
    else:
        eval_manifest = generate_phantom(eval_phantom, eval_dir)

    stats = compute_dataset_stats(manifest)
    (out_dir / "stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True) + "\n")

    num_organs = cfg.phantom.num_organs
    organ_classes = num_organs + 1
    tcfg = cfg.train
    root = manifest.root

    full = manifest.by_supervision(SupervisionKind.FULL_ORGAN)
    partial = manifest.by_supervision(SupervisionKind.PARTIAL_ORGAN)
    unlabeled = manifest.by_supervision(SupervisionKind.UNLABELED)
    tumor_cases = manifest.tumor_annotated_cases()

    full_samples = [prepare_organ_sample(r, root, stats, tcfg.shape_organ) for r in full]
    partial_raw = [prepare_organ_sample(r, root, stats, tcfg.shape_organ) for r in partial]
    partial_images = {r.case_id: s.image for r, s in zip(partial, partial_raw)}
    unlabeled_images = {r.case_id: prepare_image(r, root, stats, tcfg.shape_organ)
                        for r in unlabeled}
    tumor_samples = [prepare_tumor_sample(r, root, stats, tcfg.shape_tumor) for r in tumor_cases]
    eval_cases = _eval_cases(eval_manifest, stats, tcfg.shape_organ, num_organs)

    organ_spec = net_spec_from_section(cfg.organ_net, organ_classes)
    tumor_spec = net_spec_from_section(cfg.tumor_net, 2)

    scores: list[ArmScore] = []
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}"
        cfg_seed = dataclasses.replace(tcfg, seed=seed)

        fso = build_model(organ_spec, seed * 100 + 1)
        train_supervised(fso, full_samples, cfg_seed, batch_size=tcfg.batch_size_organ,
                         out_dir=seed_dir, label="fso")
        organ_d, organ_n = _score_organ(fso, eval_cases, num_organs)
        scores.append(ArmScore(ARM_FSO, seed, organ_d, organ_n))

        baseline = build_model(organ_spec, seed * 100 + 2)
        train_supervised(baseline, full_samples + partial_raw, cfg_seed,
                         batch_size=tcfg.batch_size_organ, out_dir=seed_dir, label="baseline")
        organ_d, organ_n = _score_organ(baseline, eval_cases, num_organs)
        scores.append(ArmScore(ARM_BASELINE, seed, organ_d, organ_n))

        pseudo_dir = seed_dir / "pseudo"
        written, failures = generate_pseudo_labels(
            fso, partial + unlabeled, root, stats, tcfg.shape_organ, pseudo_dir,
            teacher_id=f"fso_seed{seed}",
        )
        if failures:
            raise RuntimeError(f"pseudo-label generation failed for {sorted(failures)}")
        cpl_samples = []
        for record in partial:
            pseudo = load_label(written[record.case_id], organ_classes)
            target = build_cpl_target(pseudo, record, root, tcfg.shape_organ)
            cpl_samples.append(TrainSample(partial_images[record.case_id], target.data,
                                           SampleKind.CPL, record.case_id))
        pl_samples = [
            TrainSample(unlabeled_images[r.case_id],
                        load_label(written[r.case_id], organ_classes).data,
                        SampleKind.PL, r.case_id)
            for r in unlabeled
        ]

        st_partial = build_model(organ_spec, seed * 100 + 3)
        train_student_organ(st_partial, full_samples, cpl_samples, [], cfg_seed,
                            out_dir=seed_dir, label="st_partial")
        organ_d, organ_n = _score_organ(st_partial, eval_cases, num_organs)
        scores.append(ArmScore(ARM_ST_PARTIAL, seed, organ_d, organ_n))

        st_full = build_model(organ_spec, seed * 100 + 4)
        train_student_organ(st_full, full_samples, cpl_samples, pl_samples, cfg_seed,
                            out_dir=seed_dir, label="st_full")
        organ_d, organ_n = _score_organ(st_full, eval_cases, num_organs)
        st_full_scores = (organ_d, organ_n)
        scores.append(ArmScore(ARM_ST_FULL, seed, organ_d, organ_n))

        fst = build_model(tumor_spec, seed * 100 + 5)
        train_supervised(fst, tumor_samples, cfg_seed, batch_size=tcfg.batch_size_tumor,
                         out_dir=seed_dir, label="fst")
        tumor_d, tumor_n = _score_tumor(fst, eval_cases)
        scores.append(ArmScore(ARM_FST, seed, tumor_dsc=tumor_d, tumor_nsd=tumor_n))

        # the mean-teacher phase continues from the supervised tumor model,
        # so the teacher starts out competent instead of supervising noise
        mt_student = build_model(tumor_spec, seed * 100 + 6)
        mt_student.load_parameters(fst.parameters_vector())
        mt = train_tumor_mean_teacher(mt_student, tumor_samples, cfg_seed,
                                      out_dir=seed_dir, label="mt")
        tumor_d, tumor_n = _score_tumor(mt.teacher, eval_cases)
        scores.append(ArmScore(ARM_MT, seed, tumor_dsc=tumor_d, tumor_nsd=tumor_n))

        scores.append(ArmScore(ARM_STMT, seed, st_full_scores[0], st_full_scores[1],
                               tumor_d, tumor_n))

    write_scores_csv(scores, out_dir / "metrics.csv")
    (out_dir / "table.txt").write_text(format_arm_table(scores))
    render_ablation_figure(scores, out_dir / "figures")
    return scores


def write_scores_csv(scores: list[ArmScore], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in scores:
            writer.writerow([s.arm, s.seed, repr(s.organ_dsc), repr(s.organ_nsd),
                             repr(s.tumor_dsc), repr(s.tumor_nsd)])


def load_scores_csv(path: str | Path) -> list[ArmScore]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            ArmScore(row["arm"], int(row["seed"]), float(row["organ_dsc"]),
                     float(row["organ_nsd"]), float(row["tumor_dsc"]), float(row["tumor_nsd"]))
            for row in reader
        ]


def _arm_mean(scores, arm, attr) -> tuple[float, float]:
    vals = [getattr(s, attr) for s in scores if s.arm == arm and not np.isnan(getattr(s, attr))]
    if not vals:
        return float("nan"), float("nan")
    return float(np.mean(vals)), float(np.std(vals))


def format_arm_table(scores: list[ArmScore]) -> str:
    """Comparison table over arms: organ and tumor DSC/NSD, percent,
    mean +- sd across seeds."""
    lines = [f"{'Methods':<24}{'Organ DSC(%)':>16}{'Organ NSD(%)':>16}"
             f"{'Tumour DSC(%)':>16}{'Tumour NSD(%)':>16}"]
    for arm in ALL_ARMS:
        if not any(s.arm == arm for s in scores):
            continue
        cells = []
        for attr in ("organ_dsc", "organ_nsd", "tumor_dsc", "tumor_nsd"):
            mean, sd = _arm_mean(scores, arm, attr)
            cells.append("      --        " if np.isnan(mean) else f"{mean:>8.2f} ± {sd:<5.2f}")
        lines.append(f"{arm:<24}" + "".join(cells))
    return "\n".join(lines) + "\n"


def render_ablation_figure(scores: list[ArmScore], out_dir: str | Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arms = [a for a in ALL_ARMS if any(s.arm == a for s in scores)]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, attr, title in ((axes[0], "organ_dsc", "Organ DSC (%)"),
                            (axes[1], "tumor_dsc", "Tumour DSC (%)")):
        means, sds, labels = [], [], []
        for arm in arms:
            mean, sd = _arm_mean(scores, arm, attr)
            if not np.isnan(mean):
                means.append(mean)
                sds.append(sd)
                labels.append(arm)
        ax.bar(labels, means, yerr=sds, capsize=4)
        ax.set_title(title)
        ax.set_ylim(0, 100)
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = out_dir / "ablation.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
