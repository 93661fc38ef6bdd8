"""Command-line entry point wiring the full workflow: phantom generation,
stage-1 / teacher / student / mean-teacher training, pseudo-label
generation and correction, two-stage inference with efficiency profiling,
evaluation reports, and the six-arm supervision study.

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import (
    ConfigError,
    MissingArtifactError,
    ORGAN_NAMES,
    StmtError,
    TUMOR_CLASS,
    __version__,
)
from .ablation import compute_dataset_stats, format_arm_table, run_ablation
from .config import (
    RunConfig,
    config_hash,
    echo_config,
    load_run_config,
    net_spec_from_section,
)
from .evalx import (
    CaseResult,
    MemTimeCurve,
    auc_mem_time,
    build_report,
    dsc,
    format_report_table,
    nsd,
    profile_case,
    render_report_figures,
    report_to_csv,
)
from .hybridtrain import (
    SampleKind,
    TrainSample,
    build_cpl_target,
    generate_pseudo_labels,
    prepare_image,
    prepare_organ_sample,
    prepare_stage1_sample,
    prepare_tumor_sample,
    train_student_organ,
    train_supervised,
    train_tumor_mean_teacher,
)
from .nets import build_model, load_checkpoint
from .phantom import SupervisionKind, generate_phantom, load_manifest
from .twostage import PipelineBundle, run_pipeline
from .volcore import NormStats, load_label, load_volume, save_label

CLASS_NAMES = {0: "Background", **{i + 1: n for i, n in enumerate(ORGAN_NAMES)}, TUMOR_CLASS: "Tumor"}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", default=None, help="packaged profile name (desk, flare) or path")
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--workers", type=int, default=None, help="per-case parallelism")
    parser.add_argument("--run-root", default=None, help="default output root (env: STMT_RUN_ROOT)")
    parser.add_argument("--force", action="store_true", help="overwrite existing output directories")


def _build_config(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.run_root is not None:
        overrides["run_root"] = args.run_root
    return load_run_config(profile=args.profile, config_file=args.config, cli_overrides=overrides)


def _out_dir(args, cfg: RunConfig, default_name: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg.run_root) / default_name
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out: Path, cfg: RunConfig, command: str, inputs: dict) -> None:
    (out / "config.echo.cfg").write_text(echo_config(cfg))
    (out / "run.json").write_text(
        json.dumps(
            {
                "command": command,
                "config_hash": config_hash(cfg),
                "seed": cfg.seed,
                "workers": cfg.workers,
                "inputs": {k: str(v) for k, v in inputs.items()},
                "version": __version__,
            },
            sort_keys=True,
            indent=1,
        )
        + "\n"
    )


def _require(path: Path, what: str, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found at {path}; produce it with 'stmt {producer}'")
    return Path(path)


def _load_dataset(path: str) -> tuple:
    manifest_path = _require(Path(path) / "manifest.json", "dataset manifest", "phantom")
    return load_manifest(manifest_path)


def _save_stats(stats: NormStats, out: Path) -> None:
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True) + "\n")


def _load_stats(path: Path) -> NormStats:
    return NormStats.from_dict(json.loads(_require(path, "normalization stats", "train-*").read_text()))


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args, cfg, "dataset")
    _write_run_manifest(out, cfg, "phantom", {})
    manifest = generate_phantom(cfg.phantom, out)
    counts = {kind.value: len(manifest.by_supervision(kind)) for kind in SupervisionKind}
    print(f"generated {len(manifest.cases)} cases under {out} ({counts})")
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _build_config(args)
    manifest = _load_dataset(args.dataset)
    out = _out_dir(args, cfg, "stage1")
    _write_run_manifest(out, cfg, "train-stage1", {"dataset": args.dataset})
    labeled = [c for c in manifest.cases if c.label_path is not None]
    stats = compute_dataset_stats(manifest)
    _save_stats(stats, out)
    samples = [prepare_stage1_sample(c, manifest.root, stats, cfg.train.shape_stage1)
               for c in labeled]
    model = build_model(net_spec_from_section(cfg.stage1_net, 2), cfg.seed)
    result = train_supervised(model, samples, cfg.train, batch_size=cfg.train.batch_size_stage1,
                              out_dir=out, label="stage1")
    print(f"stage-1 locator trained; final loss {result.epoch_losses[-1]:.4f}; "
          f"checkpoints under {out}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _build_config(args)
    manifest = _load_dataset(args.dataset)
    out = _out_dir(args, cfg, "teacher")
    _write_run_manifest(out, cfg, "train-teacher", {"dataset": args.dataset})
    full = manifest.by_supervision(SupervisionKind.FULL_ORGAN)
    if not full:
        raise MissingArtifactError("dataset has no fully labeled organ cases")
    stats = compute_dataset_stats(manifest)
    _save_stats(stats, out)
    num_classes = manifest.config.get("num_organs", 13) + 1
    samples = [prepare_organ_sample(c, manifest.root, stats, cfg.train.shape_organ)
               for c in full]
    model = build_model(net_spec_from_section(cfg.organ_net, num_classes), cfg.seed)
    result = train_supervised(model, samples, cfg.train, batch_size=cfg.train.batch_size_organ,
                              out_dir=out, label="teacher")
    print(f"organ teacher trained; final loss {result.epoch_losses[-1]:.4f}; "
          f"checkpoints under {out}")
    return 0


def cmd_pseudo(args) -> int:
    cfg = _build_config(args)
    manifest = _load_dataset(args.dataset)
    teacher_path = _require(Path(args.teacher), "teacher checkpoint", "train-teacher")
    out = _out_dir(args, cfg, "pseudo")
    _write_run_manifest(out, cfg, "pseudo", {"dataset": args.dataset, "teacher": args.teacher})
    teacher = load_checkpoint(teacher_path)
    stats = compute_dataset_stats(manifest)
    _save_stats(stats, out)
    partial = manifest.by_supervision(SupervisionKind.PARTIAL_ORGAN)
    unlabeled = manifest.by_supervision(SupervisionKind.UNLABELED)
    written, failures = generate_pseudo_labels(
        teacher, partial + unlabeled, manifest.root, stats, cfg.train.shape_organ,
        out / "raw", teacher_id=str(teacher_path),
    )
    for case_id, error in sorted(failures.items()):
        print(f"warning: pseudo-label generation failed for {case_id}: {error}", file=sys.stderr)
    cpl_dir = out / "cpl"
    for record in partial:
        if record.case_id not in written:
            continue
        pseudo = load_label(written[record.case_id], teacher.num_classes)
        corrected = build_cpl_target(pseudo, record, manifest.root, cfg.train.shape_organ)
        save_label(corrected, cpl_dir / f"{record.case_id}.svol")
    print(f"pseudo-labels for {len(written)} cases under {out} "
          f"({len(partial)} corrected, {len(failures)} failures)")
    return 0


def cmd_train_organ_student(args) -> int:
    cfg = _build_config(args)
    manifest = _load_dataset(args.dataset)
    pseudo_root = Path(args.pseudo)
    _require(pseudo_root / "raw", "pseudo-label directory", "pseudo")
    out = _out_dir(args, cfg, "organ_student")
    _write_run_manifest(out, cfg, "train-organ-student",
                        {"dataset": args.dataset, "pseudo": args.pseudo})
    stats = compute_dataset_stats(manifest)
    _save_stats(stats, out)
    num_classes = manifest.config.get("num_organs", 13) + 1
    shape = cfg.train.shape_organ
    full = manifest.by_supervision(SupervisionKind.FULL_ORGAN)
    partial = manifest.by_supervision(SupervisionKind.PARTIAL_ORGAN)
    unlabeled = manifest.by_supervision(SupervisionKind.UNLABELED)
    full_samples = [prepare_organ_sample(c, manifest.root, stats, shape) for c in full]
    cpl_samples = []
    for record in partial:
        path = _require(pseudo_root / "cpl" / f"{record.case_id}.svol",
                        f"corrected pseudo-label for {record.case_id}", "pseudo")
        target = load_label(path, num_classes)
        cpl_samples.append(TrainSample(prepare_image(record, manifest.root, stats, shape),
                                       target.data, SampleKind.CPL, record.case_id))
    pl_samples = []
    for record in unlabeled:
        path = _require(pseudo_root / "raw" / f"{record.case_id}.svol",
                        f"pseudo-label for {record.case_id}", "pseudo")
        pl_samples.append(TrainSample(prepare_image(record, manifest.root, stats, shape),
                                      load_label(path, num_classes).data,
                                      SampleKind.PL, record.case_id))
    model = build_model(net_spec_from_section(cfg.organ_net, num_classes), cfg.seed)
    result = train_student_organ(model, full_samples, cpl_samples, pl_samples, cfg.train,
                                 out_dir=out, label="organ_student")
    print(f"organ student trained; final loss {result.epoch_losses[-1]:.4f}; "
          f"checkpoints under {out}")
    return 0


def cmd_train_tumor_mt(args) -> int:
    cfg = _build_config(args)
    manifest = _load_dataset(args.dataset)
    out = _out_dir(args, cfg, "tumor_mt")
    _write_run_manifest(out, cfg, "train-tumor-mt", {"dataset": args.dataset})
    cases = manifest.tumor_annotated_cases()
    if not cases:
        raise MissingArtifactError("dataset has no tumor-annotated cases")
    stats = compute_dataset_stats(manifest)
    _save_stats(stats, out)
    samples = [prepare_tumor_sample(c, manifest.root, stats, cfg.train.shape_tumor)
               for c in cases]
    student = build_model(net_spec_from_section(cfg.tumor_net, 2), cfg.seed)
    if args.init_from:
        warm = load_checkpoint(_require(Path(args.init_from), "warm-start checkpoint",
                                        "train-tumor-mt (supervised phase)"),
                               expected_spec=student.spec)
        student.load_parameters(warm.parameters_vector())
    result = train_tumor_mean_teacher(student, samples, cfg.train, out_dir=out, label="tumor_mt")
    print(f"mean-teacher tumor model trained on {len(samples)} cases; "
          f"teacher checkpoint {result.teacher_ckpt}")
    return 0


def cmd_infer(args) -> int:
    cfg = _build_config(args)
    in_dir = _require(Path(args.in_dir), "input volume directory", "phantom")
    stage1 = load_checkpoint(_require(Path(args.stage1), "stage-1 checkpoint", "train-stage1"))
    organ = load_checkpoint(_require(Path(args.organ), "organ checkpoint", "train-organ-student"))
    tumor = load_checkpoint(_require(Path(args.tumor), "tumor checkpoint", "train-tumor-mt"))
    stats = _load_stats(Path(args.stats))
    out = _out_dir(args, cfg, "predictions")
    _write_run_manifest(out, cfg, "infer", {
        "in_dir": str(in_dir), "stage1": args.stage1, "organ": args.organ,
        "tumor": args.tumor, "stats": args.stats,
    })
    if cfg.train.shape_organ != cfg.train.shape_tumor:
        raise ConfigError("organ and tumor task shapes must match for stage-2 inference")
    bundle = PipelineBundle(
        stage1_model=stage1.set_mode("eval"),
        organ_model=organ.set_mode("eval"),
        tumor_model=tumor.set_mode("eval"),
        stage1_stats=stats,
        stage2_stats=stats,
        stage1_shape=cfg.train.shape_stage1,
        stage2_shape=cfg.train.shape_organ,
        options=cfg.pipeline,
    )
    efficiency = {}
    volumes = sorted(in_dir.glob("*.svol"))
    if not volumes:
        raise MissingArtifactError(f"no .svol volumes found in {in_dir}")
    for path in volumes:
        volume = load_volume(path)
        holder = {}

        def work():
            holder["seg"] = run_pipeline(bundle, volume)

        runtime, curve = profile_case(work, case_id=path.stem)
        save_label(holder["seg"], out / path.name)
        efficiency[path.stem] = {
            "runtime_s": runtime,
            "max_mem_mb": curve.max_mem_mb,
            "auc_mb_s": auc_mem_time(curve),
            "samples": [list(s) for s in curve.samples],
        }
        print(f"{path.stem}: {runtime:.2f} s, peak {curve.max_mem_mb:.0f} MB")
    (out / "efficiency.json").write_text(json.dumps(efficiency, sort_keys=True, indent=1) + "\n")
    return 0


def _eval_one_case(pred_path: Path, truth_path: Path, nsd_tol: float, efficiency: dict):
    pred = load_label(pred_path)
    truth = load_label(truth_path)
    classes = sorted((set(np.unique(pred.data)) | set(np.unique(truth.data))) - {0})
    num_classes = max([2] + [c + 1 for c in classes])
    pred = load_label(pred_path, num_classes)
    truth = load_label(truth_path, num_classes)
    eff = efficiency.get(pred_path.stem, {})
    return CaseResult(
        case_id=pred_path.stem,
        dsc={c: dsc(pred, truth, c) for c in classes},
        nsd={c: nsd(pred, truth, c, nsd_tol) for c in classes},
        runtime_s=float(eff.get("runtime_s", 0.0)),
        max_mem_mb=float(eff.get("max_mem_mb", 0.0)),
        auc_mb_s=float(eff.get("auc_mb_s", 0.0)),
    )


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    pred_dir = _require(Path(args.pred_dir), "prediction directory", "infer")
    truth_dir = _require(Path(args.truth_dir), "truth directory", "phantom")
    out = _out_dir(args, cfg, "report")
    _write_run_manifest(out, cfg, "eval", {"pred": str(pred_dir), "truth": str(truth_dir)})
    efficiency = {}
    eff_path = pred_dir / "efficiency.json"
    if eff_path.is_file():
        efficiency = json.loads(eff_path.read_text())
    preds = sorted(p for p in pred_dir.glob("*.svol"))
    if not preds:
        raise MissingArtifactError(f"no predictions in {pred_dir}")
    pairs = []
    for pred_path in preds:
        truth_path = truth_dir / pred_path.name
        if not truth_path.is_file():
            raise MissingArtifactError(f"no truth volume for {pred_path.name} in {truth_dir}")
        pairs.append((pred_path, truth_path))

    tol = cfg.eval.nsd_tolerance_mm
    if cfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(lambda pair: _eval_one_case(*pair, tol, efficiency), pairs))
    else:
        rows = [_eval_one_case(p, t, tol, efficiency) for p, t in pairs]

    report = build_report(rows, tolerances=(cfg.eval.time_tolerance_s, cfg.eval.mem_tolerance_mb),
                          nsd_tolerance_mm=tol)
    report_to_csv(report, out / "report.csv")
    table = format_report_table(report, CLASS_NAMES)
    (out / "report.txt").write_text(table)
    curves = [
        MemTimeCurve(tuple((float(t), float(m)) for t, m in eff["samples"]), case_id)
        for case_id, eff in sorted(efficiency.items())
        if len(eff.get("samples", [])) >= 2
    ]
    render_report_figures(report, out / "figures", curves or None, CLASS_NAMES)
    print(table, end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args, cfg, "ablation")
    _write_run_manifest(out, cfg, "ablate", {})
    seeds = None
    if args.seeds is not None:
        seeds = [cfg.seed + i for i in range(args.seeds)]
    scores = run_ablation(cfg, out, seeds=seeds)
    print(format_arm_table(scores), end="")
    print(f"metrics written to {out / 'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stmt",
        description="Two-stage hybrid-supervision volumetric segmentation workbench",
    )
    parser.add_argument("--version", action="version", version=f"stmt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "generate a synthetic phantom dataset")
    p.add_argument("--out", default=None)

    p = add("train-stage1", cmd_train_stage1, "train the coarse abdomen locator")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)

    p = add("train-teacher", cmd_train_teacher, "train the organ teacher on fully labeled cases")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)

    p = add("pseudo", cmd_pseudo, "generate and correct pseudo-labels with a trained teacher")
    p.add_argument("--dataset", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")
    p.add_argument("--out", default=None)

    p = add("train-organ-student", cmd_train_organ_student,
            "train the self-training organ student")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pseudo", required=True, help="output directory of 'stmt pseudo'")
    p.add_argument("--out", default=None)

    p = add("train-tumor-mt", cmd_train_tumor_mt, "train the mean-teacher tumor model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--init-from", default=None,
                   help="checkpoint to warm-start the student from (e.g. a supervised tumor model)")

    p = add("infer", cmd_infer, "run two-stage inference over a directory of volumes")
    p.add_argument("in_dir")
    p.add_argument("out_dir", nargs="?", default=None)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--organ", required=True, help="organ checkpoint")
    p.add_argument("--tumor", required=True, help="tumor checkpoint")
    p.add_argument("--stats", required=True, help="stats.json from training")
    p.add_argument("--out", dest="out", default=None, help=argparse.SUPPRESS)

    p = add("eval", cmd_eval, "score predictions against truth and emit reports")
    p.add_argument("pred_dir")
    p.add_argument("truth_dir")
    p.add_argument("--out", default=None)

    p = add("ablate", cmd_ablate, "run the six-arm supervision study")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", type=int, default=None, help="number of seeds (default from config)")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "infer" and args.out_dir is not None:
        args.out = args.out_dir
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return 3
    except StmtError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"unexpected failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
