"""
Command-line interface.

Every subcommand takes an optional JSON config file (``--config``), flag
overrides and an output run directory (``--out``). The config file has one
section per component (``synthetic``, ``train``, ``apm``, ``eval``) plus an
``options`` section for the subcommand's own flags; a run manifest can be
passed instead to replay a run. Effective settings always land in
``<out>/manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any

from .apm import APMConfig, ClassStatsStore, FixedThresholds, ThresholdSchedule, populate_from_labeled
from .context import RunContext, configure_logging, load_config_file, resolve_config
from .core import ConfigError, DatasetBundle, GroupScheme, PyCascadeError, Split, by_image, count_instances
from .cpl import PseudoLabelSet, TeacherMode, unlabeled_batch
from .evaluation import (
    EvalConfig,
    audit_sources,
    best_fixed_at_precision,
    collapse_stages,
    evaluate,
    pseudo_accuracy,
    retained_counts,
    retention_comparison,
)
from .parser import decode_json, export_coco, export_pseudo_labels, export_results, ingest_coco, load_results
from .saod import erase
from .synthetic import SyntheticConfig, generate_dataset, generate_test_bundle, generate_world, simulate_detector
from .trainer import TrainConfig, ablation_suite, accuracy, new_model, sweep, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(PyCascadeError):
    """Bad flags or a missing input file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> Any:  # type: ignore[override]
        raise UsageError(message)


class _Options:
    """Subcommand options with precedence flags > config ``options`` > defaults."""

    def __init__(self, args: argparse.Namespace, file_options: Mapping[str, Any]) -> None:
        self._args = args
        self._file = dict(file_options)
        self.resolved: dict[str, Any] = {}

    def get(self, name: str, default: Any = None) -> Any:
        value = getattr(self._args, name, None)
        if value is None:
            value = self._file.get(name, default)
        self.resolved[name] = value
        return value


def _input(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"Missing required input: {what}")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"Input {what} not found: {path}")
    return path


def _float_list(values: Sequence[Any] | None) -> tuple[float, ...] | None:
    return None if values is None else tuple(float(v) for v in values)


def _synthetic(config: Mapping[str, Any], args: argparse.Namespace) -> SyntheticConfig:
    return resolve_config(
        SyntheticConfig,
        config.get("synthetic"),
        {
            "seed": args.seed,
            "num_classes": getattr(args, "classes", None),
            "exponent": getattr(args, "exponent", None),
            "num_images": getattr(args, "images", None),
            "labeled_fraction": getattr(args, "labeled_fraction", None),
            "num_stages": getattr(args, "stages", None),
            "num_test_images": getattr(args, "test_images", None),
        },
    )


def _train(config: Mapping[str, Any], args: argparse.Namespace) -> TrainConfig:
    return resolve_config(
        TrainConfig,
        config.get("train"),
        {
            "seed": args.seed,
            "total_iters": getattr(args, "iters", None),
            "burn_in_iters": getattr(args, "burn_in", None),
            "lambda_u": getattr(args, "lambda_u", None),
            "teacher_mode": getattr(args, "mode", None),
            "apm": getattr(args, "apm", None),
        },
    )


def _bundle_summary(bundle: DatasetBundle) -> dict[str, Any]:
    groups: dict[str, int] = {}
    for c in bundle.categories:
        groups[c.group] = groups.get(c.group, 0) + 1
    return {
        "split": bundle.split.value,
        "images": len(bundle.images),
        "annotations": len(bundle.annotations),
        "hidden_annotations": len(bundle.audit_annotations()) if bundle.has_hidden_annotations else 0,
        "categories": len(bundle.categories),
        "classes_per_group": groups,
        "zero_instance_categories": bundle.zero_instance_categories(),
    }


def cmd_generate(ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options) -> None:
    synthetic = _synthetic(config, args)
    quality = float(opts.get("quality", 0.0))
    rounds = int(opts.get("rounds", 1))
    if rounds < 1:
        raise UsageError(f"--rounds must be >= 1, got {rounds}")
    ctx.config["synthetic"] = synthetic.to_dict()
    ctx.seed = synthetic.seed
    labeled, unlabeled = generate_dataset(synthetic)
    test = generate_test_bundle(synthetic)
    summary = {}
    for name, bundle in (("labeled", labeled), ("unlabeled", unlabeled), ("test", test)):
        ctx.record_output(export_coco(bundle, ctx.path("data", f"{name}.json"), include_hidden=True))
        records = simulate_detector(bundle, synthetic, quality)
        ctx.record_output(export_results(records, ctx.path("data", f"detections_{name}.json"), bundle.class_index))
        summary[name] = _bundle_summary(bundle)
    for r in range(1, rounds):
        records = simulate_detector(labeled, synthetic, quality, round_index=r)
        path = ctx.path("data", f"detections_labeled_round{r}.json")
        ctx.record_output(export_results(records, path, labeled.class_index))
    ctx.write_json("reports", "dataset.json", summary)


def cmd_ingest(ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options) -> None:
    path = _input(opts.get("ann"), "--ann")
    split = Split(opts.get("split", "labeled"))
    groups = opts.get("groups", "lvis3")
    ctx.add_inputs([path])
    bundle = ingest_coco(path, split, groups)
    ctx.record_output(export_coco(bundle, ctx.path("data", f"{split.value}.json"), include_hidden=True))
    ctx.write_json("reports", "ingest.json", _bundle_summary(bundle))


def _apm(config: Mapping[str, Any], args: argparse.Namespace) -> APMConfig:
    return resolve_config(
        APMConfig,
        config.get("apm"),
        {
            "epsilons": _float_list(args.epsilons),
            "capacity": args.capacity,
            "min_samples": args.min_samples,
            "recorded_value": args.recorded_value,
            "default_thresholds": _float_list(args.default_thresholds),
        },
    )


def cmd_mine_thresholds(
    ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options
) -> None:
    ann = _input(opts.get("ann"), "--ann")
    detections = opts.get("detections")
    if isinstance(detections, str):
        detections = [detections]
    dets = [_input(d, "--detections") for d in detections or [None]]
    iou = float(opts.get("iou", 0.5))
    apm = _apm(config, args)
    ctx.config["apm"] = apm.to_dict()
    ctx.add_inputs([ann, *dets])
    bundle = ingest_coco(ann, Split.LABELED, opts.get("groups", "lvis3"))
    index = bundle.class_index
    store = ClassStatsStore(index.num_classes, apm)
    for det in dets:
        teacher = collapse_stages(load_results(det, index))
        populate_from_labeled(store, by_image(teacher), bundle.annotations, index, iou)
    ctx.write_json("reports", "thresholds.json", store.to_dict())
    path = ctx.path("logs", "thresholds.csv")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        stages = [f"tau_{k}" for k in range(1, store.num_stages + 1)]
        writer.writerow(["slot", "category_id", "count", "mu", "sigma", *stages])
        for slot in range(index.num_classes):
            stats = [store.count(slot), store.mean(slot), store.std(slot)]
            writer.writerow([slot, index.category_id(slot), *stats, *store.thresholds(slot)])
    ctx.record_output(path)
    adaptive = sum(store.is_adaptive(c) for c in range(index.num_classes))
    logger.info("Mined thresholds for %d classes, %d adaptive", index.num_classes, adaptive)


def _schedule(opts: _Options, num_classes: int) -> ThresholdSchedule:
    snapshot = opts.get("thresholds")
    if snapshot is not None:
        path = _input(snapshot, "--thresholds")
        store = ClassStatsStore.from_dict(decode_json(path.read_bytes()))
        if store.num_classes != num_classes:
            raise ConfigError(f"Threshold store has {store.num_classes} classes, dataset has {num_classes}")
        return store
    return FixedThresholds(tuple(float(v) for v in opts.get("fixed", (0.5, 0.6, 0.7))))


def cmd_pseudo_label(
    ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options
) -> None:
    ann = _input(opts.get("ann"), "--ann")
    det = _input(opts.get("detections"), "--detections")
    mode = TeacherMode(opts.get("mode", "ensemble"))
    nms_value = float(opts.get("nms_threshold", 0.5))
    nms = nms_value if nms_value > 0 else None
    iou = float(opts.get("iou", 0.5))
    ctx.add_inputs([ann, det, opts.get("thresholds")])
    bundle = ingest_coco(ann, Split.UNLABELED, opts.get("groups", "lvis3"))
    index = bundle.class_index
    schedule = _schedule(opts, index.num_classes)
    records = load_results(det, index)
    pseudo = unlabeled_batch(records, schedule, nms, mode)
    ctx.record_output(export_pseudo_labels(pseudo, ctx.path("data", "pseudo_labels.json"), index))
    report: dict[str, Any] = {
        "proposals": len(pseudo),
        "retained_per_stage": list(pseudo.sizes()),
        "nested": pseudo.is_nested(),
        "retained_counts": {str(k): v for k, v in retained_counts(pseudo, index).items()},
    }
    if bundle.has_hidden_annotations:
        hidden = bundle.audit_annotations()
        report["accuracy_per_stage"] = pseudo_accuracy(pseudo, hidden, index, iou)
        report["accuracy_per_source"] = pseudo_accuracy(audit_sources(records, schedule, 1, nms), hidden, index, iou)
        if isinstance(schedule, ClassStatsStore):
            rows = retention_comparison(records, schedule, hidden, bundle, EvalConfig().tau_grid, 1, iou)
            best = best_fixed_at_precision(rows, rows[0].precision)
            report["retention"] = [asdict(row) for row in rows]
            report["best_fixed_at_apm_precision"] = best.schedule if best else None
    else:
        logger.warning("No hidden ground truth in %s; pseudo-label accuracy not reported", ann)
    ctx.write_json("reports", "pseudo_labels.json", report)


def cmd_train_toy(ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options) -> None:
    synthetic = _synthetic(config, args)
    train_config = _train(config, args)
    ctx.config.update(synthetic=synthetic.to_dict(), train=train_config.to_dict())
    ctx.seed = train_config.seed
    world = generate_world(synthetic)
    model, log = train(new_model(world, train_config), world, train_config)
    for path in log.write(ctx.root / "logs"):
        ctx.record_output(path)
    ctx.write_json(
        "reports",
        "train.json",
        {
            "final_losses": log.final,
            "retained_total_stage_1": log.total_retained(1),
            "test_accuracy": accuracy(model, world.test).to_dict(),
            "train_accuracy": accuracy(model, world.labeled).to_dict(),
        },
    )


def _pseudo_for_eval(
    ctx: RunContext, opts: _Options, eval_config: EvalConfig
) -> tuple[PseudoLabelSet | None, DatasetBundle | None]:
    if opts.get("pseudo_detections") is None:
        return None, None
    ann = _input(opts.get("pseudo_ann"), "--pseudo-ann")
    det = _input(opts.get("pseudo_detections"), "--pseudo-detections")
    ctx.add_inputs([ann, det, opts.get("thresholds")])
    unlabeled = ingest_coco(ann, Split.UNLABELED, eval_config.group_scheme)
    schedule = _schedule(opts, unlabeled.class_index.num_classes)
    return unlabeled_batch(load_results(det, unlabeled.class_index), schedule), unlabeled


def cmd_evaluate(ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options) -> None:
    ann = _input(opts.get("ann"), "--ann")
    det = _input(opts.get("detections"), "--detections")
    metric = opts.get("metric", "fixed-ap")
    groups = opts.get("groups")
    stage = opts.get("stage")
    eval_config = resolve_config(
        EvalConfig,
        config.get("eval"),
        {"group_scheme": groups, "cap_per_class": args.cap, "iou_threshold": args.iou, "profile": args.profile},
    )
    ctx.add_inputs([ann, det])
    bundle = ingest_coco(ann, Split.LABELED, eval_config.group_scheme)
    detections = collapse_stages(load_results(det, bundle.class_index), stage)
    if metric == "ap":
        eval_config = resolve_config(EvalConfig, {**eval_config.to_dict(), "cap_per_class": max(1, len(detections))})
    pseudo, unlabeled = _pseudo_for_eval(ctx, opts, eval_config)
    ctx.config["eval"] = eval_config.to_dict()
    report = evaluate(detections, bundle, eval_config, pseudo, unlabeled)
    ctx.write_json("reports", "eval.json", report.to_dict())
    ctx.record_output(report.to_csv(ctx.path("reports", "eval.csv")))
    ctx.record_output(report.pr_to_csv(ctx.path("reports", "pr_curve.csv")))


def cmd_erase(ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options) -> None:
    ann = _input(opts.get("ann"), "--ann")
    ratio = opts.get("ratio")
    if ratio is None:
        raise UsageError("Missing required option: --ratio")
    seed = int(args.seed if args.seed is not None else opts.get("seed", 0))
    ctx.seed = seed
    ctx.add_inputs([ann])
    bundle = ingest_coco(ann, Split.LABELED, opts.get("groups", "lvis3"))
    sparse, report = erase(bundle, float(ratio), seed, opts.get("mode", "exact"))
    ctx.record_output(export_coco(sparse, ctx.path("data", "sparse.json")))
    erased = replace(bundle, annotations=report.removed, categories=count_instances(bundle.categories, report.removed))
    ctx.record_output(export_coco(erased, ctx.path("data", "erased.json")))
    ctx.write_json("reports", "erasure.json", report.to_dict())


def cmd_ablate(ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options) -> None:
    synthetic = _synthetic(config, args)
    base = _train(config, args)
    ctx.config.update(synthetic=synthetic.to_dict(), train=base.to_dict())
    ctx.seed = base.seed
    num_seeds = int(opts.get("num_seeds", 5))
    seeds = tuple(range(base.seed, base.seed + num_seeds))
    world = generate_world(synthetic)
    tables = list(ablation_suite(world, base, seeds))
    for parameter in opts.get("sweep", ()) or ():
        tables.append(sweep(world, base, parameter, seeds=seeds))
    names = ["ablation", "burn_in", *[f"sweep_{p}" for p in opts.get("sweep", ()) or ()]]
    for name, table in zip(names, tables):
        ctx.write_json("reports", f"{name}.json", table.to_dict())
        ctx.write_text("reports", f"{name}.md", table.to_markdown())


def _render(name: str, data: Any) -> list[str]:
    lines = [f"## {name}", ""]
    if isinstance(data, dict):
        scalars = {k: v for k, v in data.items() if not isinstance(v, (dict, list))}
        if scalars:
            lines += ["| key | value |", "|---|---|"]
            lines += [f"| {k} | {v} |" for k, v in sorted(scalars.items())]
            lines.append("")
        for key, value in sorted(data.items()):
            if isinstance(value, dict) and all(not isinstance(v, (dict, list)) for v in value.values()):
                lines += [f"**{key}**", "", "| key | value |", "|---|---|"]
                lines += [f"| {k} | {v} |" for k, v in value.items()]
                lines.append("")
    else:
        lines += ["```json", json.dumps(data, indent=2)[:4000], "```", ""]
    return lines


def cmd_report(ctx: RunContext, config: Mapping[str, Any], args: argparse.Namespace, opts: _Options) -> None:
    if opts.get("run") is None:
        raise UsageError("Missing required option: --run")
    run = Path(opts.get("run"))
    reports = run / "reports"
    if not reports.is_dir():
        raise UsageError(f"No reports directory in run {run}")
    lines = [f"# Run summary: {run.name}", ""]
    manifest = run / "manifest.json"
    if manifest.is_file():
        ctx.add_inputs([manifest])
        lines += [f"Command: `{json.loads(manifest.read_text(encoding='utf-8')).get('command')}`", ""]
    for path in sorted(reports.glob("*.md")):
        ctx.add_inputs([path])
        lines += [path.read_text(encoding="utf-8"), ""]
    for path in sorted(reports.glob("*.json")):
        ctx.add_inputs([path])
        lines += _render(path.stem, json.loads(path.read_text(encoding="utf-8")))
    ctx.write_text("reports", "summary.md", "\n".join(lines).rstrip() + "\n")


COMMANDS: dict[str, Callable[[RunContext, Mapping[str, Any], argparse.Namespace, _Options], None]] = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "mine-thresholds": cmd_mine_thresholds,
    "pseudo-label": cmd_pseudo_label,
    "train-toy": cmd_train_toy,
    "evaluate": cmd_evaluate,
    "erase": cmd_erase,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _add_world_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--classes", type=int, help="number of foreground classes")
    p.add_argument("--exponent", type=float, help="power-law exponent of class frequencies")
    p.add_argument("--images", type=int, help="number of training images")
    p.add_argument("--labeled-fraction", type=float)
    p.add_argument("--stages", type=int, help="number of cascade stages")
    p.add_argument("--test-images", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, help="total training iterations")
    p.add_argument("--burn-in", type=int, help="supervised-only iterations")
    p.add_argument("--lambda-u", type=float, help="weight of the unlabeled losses")
    p.add_argument("--mode", choices=[m.value for m in TeacherMode])
    p.add_argument("--apm", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file or run manifest")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", default="INFO")

    parser = _Parser(prog="pycascade", description="Cascade pseudo-labeling experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="synthetic long-tailed dataset and detections")
    _add_world_flags(p)
    p.add_argument("--quality", type=float, help="simulated detector quality in [0, 1]")
    p.add_argument("--rounds", type=int, help="detector passes over the labeled split")

    p = sub.add_parser("ingest", parents=[common], help="validate and normalize a COCO file")
    p.add_argument("--ann")
    p.add_argument("--split", choices=[s.value for s in Split])
    p.add_argument("--groups", choices=[g.value for g in GroupScheme])

    p = sub.add_parser("mine-thresholds", parents=[common], help="per-class thresholds from labeled detections")
    p.add_argument("--ann")
    p.add_argument("--detections", nargs="+", help="labeled detection files, one per teacher pass")
    p.add_argument("--groups", choices=[g.value for g in GroupScheme])
    p.add_argument("--iou", type=float)
    p.add_argument("--epsilons", type=float, nargs="+")
    p.add_argument("--default-thresholds", type=float, nargs="+")
    p.add_argument("--capacity", type=int)
    p.add_argument("--min-samples", type=int)
    p.add_argument("--recorded-value", choices=["gt_class", "max_foreground"])

    p = sub.add_parser("pseudo-label", parents=[common], help="gate unlabeled detections into pseudo-labels")
    p.add_argument("--ann", help="unlabeled COCO file; its annotations are used for auditing only")
    p.add_argument("--detections")
    p.add_argument("--thresholds", help="threshold store written by mine-thresholds")
    p.add_argument("--fixed", type=float, nargs="+", help="fixed per-stage thresholds")
    p.add_argument("--mode", choices=[m.value for m in TeacherMode])
    p.add_argument("--nms-threshold", type=float, help="teacher NMS IoU; 0 disables")
    p.add_argument("--iou", type=float)
    p.add_argument("--groups", choices=[g.value for g in GroupScheme])

    p = sub.add_parser("train-toy", parents=[common], help="train the toy cascade on a synthetic world")
    _add_world_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="Fixed AP and PR curve of detections")
    p.add_argument("--ann")
    p.add_argument("--detections")
    p.add_argument("--metric", choices=["fixed-ap", "ap"])
    p.add_argument("--groups", choices=[g.value for g in GroupScheme])
    p.add_argument("--cap", type=int, help="dataset-wide detections per class")
    p.add_argument("--iou", type=float)
    p.add_argument("--profile", choices=["default", "coco"])
    p.add_argument("--stage", type=int, help="evaluate one stage instead of the ensemble")
    p.add_argument("--pseudo-ann", help="unlabeled COCO file whose hidden boxes audit the pseudo-labels")
    p.add_argument("--pseudo-detections", help="unlabeled detections to gate into pseudo-labels")
    p.add_argument("--thresholds", help="threshold store written by mine-thresholds")
    p.add_argument("--fixed", type=float, nargs="+", help="fixed per-stage thresholds")

    p = sub.add_parser("erase", parents=[common], help="sparsify annotations per category")
    p.add_argument("--ann")
    p.add_argument("--ratio", type=float)
    p.add_argument("--mode", choices=["exact", "bernoulli"])
    p.add_argument("--groups", choices=[g.value for g in GroupScheme])

    p = sub.add_parser("ablate", parents=[common], help="CPL x APM ablation and sweeps")
    _add_world_flags(p)
    _add_train_flags(p)
    p.add_argument("--num-seeds", type=int)
    p.add_argument("--sweep", nargs="+", choices=["num_stages", "epsilons", "lambda_u"])

    p = sub.add_parser("report", parents=[common], help="summarize the reports of a run")
    p.add_argument("--run", help="run directory to summarize")
    return parser


def _error(exc: BaseException, command: str | None) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc), "command": command}
    print(json.dumps(payload), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 2 for usage, config or missing-input errors, 1 otherwise
    """
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        config = load_config_file(args.config)
        ctx = RunContext(Path(args.out), command)
        configure_logging(args.log_level, ctx.log_file)
        if args.config:
            ctx.add_inputs([args.config])
        opts = _Options(args, config.get("options", {}))
        COMMANDS[command](ctx, config, args, opts)
        ctx.config["options"] = {k: v for k, v in opts.resolved.items() if v is not None}
        ctx.write_manifest()
    except (UsageError, ConfigError) as exc:
        _error(exc, command)
        return EXIT_USAGE
    except (PyCascadeError, OSError, ValueError) as exc:
        _error(exc, command)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
